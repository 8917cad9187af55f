//! A tiny bidirectional transformer denoiser with hand-written gradients.
//!
//! Pre-norm blocks: `h += Attn(LN(h))`, `h += FFN(LN(h))`, then a final
//! layer norm whose output is the feature grid, then the vocabulary
//! projection. Attention is full-context (no causal mask). All parameters
//! live in one flat `f64` vector so optimizers and finite-difference checks
//! can treat the model as a point in `R^n`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, FeatureGrid, PosteriorGrid, Prediction};
use crate::diffusion::{MaskedSeq, Vocab};
use crate::error::{Error, Result};
use crate::linalg::{
    acc_a_bt, acc_at_b, acc_col_sum, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_bias, softmax_in_place,
};
use crate::rng::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Arch {
    pub fn small(max_len: usize) -> Self {
        Self { d_model: 24, n_heads: 2, n_layers: 1, d_ff: 64, max_len }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("architecture dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
    /// Ranges that receive weight decay (matrices and embeddings).
    decay: Vec<(usize, usize)>,
}

impl Layout {
    fn new(arch: &Arch, vocab: usize) -> Self {
        let d = arch.d_model;
        let f = arch.d_ff;
        let mut off = 0;
        let mut decay = Vec::new();
        let mut take = |n: usize, decayed: bool| {
            let start = off;
            off += n;
            if decayed {
                decay.push((start, n));
            }
            start
        };
        let tok = take((vocab + 1) * d, true);
        let pos = take(arch.max_len * d, true);
        let layers = (0..arch.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d, false),
                ln1_b: take(d, false),
                wq: take(d * d, true),
                bq: take(d, false),
                wk: take(d * d, true),
                bk: take(d, false),
                wv: take(d * d, true),
                bv: take(d, false),
                wo: take(d * d, true),
                bo: take(d, false),
                ln2_g: take(d, false),
                ln2_b: take(d, false),
                w1: take(d * f, true),
                b1: take(f, false),
                w2: take(f * d, true),
                b2: take(d, false),
            })
            .collect();
        let lnf_g = take(d, false);
        let lnf_b = take(d, false);
        let w_out = take(d * vocab, true);
        let b_out = take(vocab, false);
        Self { tok, pos, layers, lnf_g, lnf_b, w_out, b_out, total: off, decay }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    a2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    arch: Arch,
    vocab: Vocab,
    params: Vec<f64>,
    frozen: bool,
}

impl TinyDenoiser {
    pub fn new(arch: Arch, vocab: Vocab, seed: Seed) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, vocab.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = seed.derive_str("init").rng();
        let d = arch.d_model;
        let fill = |params: &mut [f64], start: usize, n: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[start..start + n] {
                *p = normal.sample(rng);
            }
        };
        let resid = 1.0 / ((2 * arch.n_layers) as f64).sqrt();
        fill(&mut params, layout.tok, (vocab.len() + 1) * d, 1.0, &mut rng);
        fill(&mut params, layout.pos, arch.max_len * d, 1.0, &mut rng);
        for l in &layout.layers {
            let inv = 1.0 / (d as f64).sqrt();
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
            fill(&mut params, l.wq, d * d, inv, &mut rng);
            fill(&mut params, l.wk, d * d, inv, &mut rng);
            fill(&mut params, l.wv, d * d, inv, &mut rng);
            fill(&mut params, l.wo, d * d, inv * resid, &mut rng);
            fill(&mut params, l.w1, d * arch.d_ff, inv, &mut rng);
            fill(&mut params, l.w2, arch.d_ff * d, resid / (arch.d_ff as f64).sqrt(), &mut rng);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.w_out, d * vocab.len(), 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self { arch, vocab, params, frozen: false })
    }

    pub fn from_params(arch: Arch, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, vocab.len());
        if params.len() != layout.total {
            return Err(Error::LengthMismatch { expected: layout.total, got: params.len() });
        }
        Ok(Self { arch, vocab, params, frozen: false })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Parameter ranges that receive weight decay.
    pub fn decay_ranges(&self) -> Vec<(usize, usize)> {
        Layout::new(&self.arch, self.vocab.len()).decay
    }

    pub fn input_ids(&self, x: &MaskedSeq) -> Vec<usize> {
        x.0.iter().map(|&t| self.vocab.input_id(t)).collect()
    }

    /// Forward pass with an explicit parameter vector.
    pub fn forward_with(&self, params: &[f64], ids: &[usize]) -> ForwardCache {
        let layout = Layout::new(&self.arch, self.vocab.len());
        let Arch { d_model: d, n_heads, d_ff: f, .. } = self.arch;
        let n = ids.len();
        assert!(n <= self.arch.max_len, "sequence longer than the position table");
        let v = self.vocab.len();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = |off: usize, len: usize| &params[off..off + len];

        let mut h = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            let te = p(layout.tok + id * d, d);
            let pe = p(layout.pos + i * d, d);
            for j in 0..d {
                h[i * d + j] = te[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(layout.layers.len());
        for lo in &layout.layers {
            let mut c = LayerCache {
                ln1_xhat: vec![0.0; n * d],
                ln1_rstd: vec![0.0; n],
                a1: vec![0.0; n * d],
                q: vec![0.0; n * d],
                k: vec![0.0; n * d],
                v: vec![0.0; n * d],
                att: vec![0.0; n_heads * n * n],
                o: vec![0.0; n * d],
                ln2_xhat: vec![0.0; n * d],
                ln2_rstd: vec![0.0; n],
                a2: vec![0.0; n * d],
                u: vec![0.0; n * f],
                g: vec![0.0; n * f],
            };
            layer_norm(&h, p(lo.ln1_g, d), p(lo.ln1_b, d), &mut c.a1, &mut c.ln1_xhat, &mut c.ln1_rstd, d);
            matmul_bias(&c.a1, p(lo.wq, d * d), Some(p(lo.bq, d)), &mut c.q, n, d, d);
            matmul_bias(&c.a1, p(lo.wk, d * d), Some(p(lo.bk, d)), &mut c.k, n, d, d);
            matmul_bias(&c.a1, p(lo.wv, d * d), Some(p(lo.bv, d)), &mut c.v, n, d, d);
            for hd in 0..n_heads {
                let off = hd * dh;
                for i in 0..n {
                    let row = &mut c.att[(hd * n + i) * n..(hd * n + i + 1) * n];
                    let qi = &c.q[i * d + off..i * d + off + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &c.k[j * d + off..j * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut c.o[i * d + off..i * d + off + dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &c.v[j * d + off..j * d + off + dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += a * vv;
                        }
                    }
                }
            }
            let mut proj = vec![0.0; n * d];
            matmul_bias(&c.o, p(lo.wo, d * d), Some(p(lo.bo, d)), &mut proj, n, d, d);
            for (hv, pv) in h.iter_mut().zip(&proj) {
                *hv += pv;
            }
            layer_norm(&h, p(lo.ln2_g, d), p(lo.ln2_b, d), &mut c.a2, &mut c.ln2_xhat, &mut c.ln2_rstd, d);
            matmul_bias(&c.a2, p(lo.w1, d * f), Some(p(lo.b1, f)), &mut c.u, n, d, f);
            for (g, &u) in c.g.iter_mut().zip(&c.u) {
                *g = gelu(u);
            }
            matmul_bias(&c.g, p(lo.w2, f * d), Some(p(lo.b2, d)), &mut proj, n, f, d);
            for (hv, pv) in h.iter_mut().zip(&proj) {
                *hv += pv;
            }
            layers.push(c);
        }

        let mut features = vec![0.0; n * d];
        let mut lnf_xhat = vec![0.0; n * d];
        let mut lnf_rstd = vec![0.0; n];
        layer_norm(&h, p(layout.lnf_g, d), p(layout.lnf_b, d), &mut features, &mut lnf_xhat, &mut lnf_rstd, d);
        let mut probs = vec![0.0; n * v];
        matmul_bias(&features, p(layout.w_out, d * v), Some(p(layout.b_out, v)), &mut probs, n, d, v);
        for row in probs.chunks_mut(v) {
            softmax_in_place(row);
        }
        ForwardCache { ids: ids.to_vec(), layers, lnf_xhat, lnf_rstd, features, probs }
    }

    /// Accumulate parameter gradients into `grad` given upstream gradients
    /// on the logits (`n × vocab`) and optionally on the features (`n × d`).
    pub fn backward_with(&self, params: &[f64], cache: &ForwardCache, dlogits: &[f64], dfeat: Option<&[f64]>, grad: &mut [f64]) {
        let layout = Layout::new(&self.arch, self.vocab.len());
        let Arch { d_model: d, n_heads, d_ff: f, .. } = self.arch;
        let n = cache.ids.len();
        let v = self.vocab.len();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = |off: usize, len: usize| &params[off..off + len];

        acc_at_b(&cache.features, dlogits, &mut grad[layout.w_out..layout.w_out + d * v], n, d, v);
        acc_col_sum(dlogits, &mut grad[layout.b_out..layout.b_out + v], n, v);
        let mut dfe = match dfeat {
            Some(df) => df.to_vec(),
            None => vec![0.0; n * d],
        };
        acc_a_bt(dlogits, p(layout.w_out, d * v), &mut dfe, n, d, v);

        let mut dh_buf = vec![0.0; n * d];
        {
            let (gg, gb) = split_pair(grad, layout.lnf_g, layout.lnf_b, d);
            layer_norm_backward(&dfe, &cache.lnf_xhat, &cache.lnf_rstd, p(layout.lnf_g, d), &mut dh_buf, gg, gb, d);
        }

        for (lo, c) in layout.layers.iter().zip(&cache.layers).rev() {
            // FFN: h_out = h_mid + gelu(a2 W1 + b1) W2 + b2
            acc_at_b(&c.g, &dh_buf, &mut grad[lo.w2..lo.w2 + f * d], n, f, d);
            acc_col_sum(&dh_buf, &mut grad[lo.b2..lo.b2 + d], n, d);
            let mut du = vec![0.0; n * f];
            acc_a_bt(&dh_buf, p(lo.w2, f * d), &mut du, n, f, d);
            for (x, &u) in du.iter_mut().zip(&c.u) {
                *x *= gelu_grad(u);
            }
            acc_at_b(&c.a2, &du, &mut grad[lo.w1..lo.w1 + d * f], n, d, f);
            acc_col_sum(&du, &mut grad[lo.b1..lo.b1 + f], n, f);
            let mut da2 = vec![0.0; n * d];
            acc_a_bt(&du, p(lo.w1, d * f), &mut da2, n, d, f);
            {
                let (gg, gb) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
                layer_norm_backward(&da2, &c.ln2_xhat, &c.ln2_rstd, p(lo.ln2_g, d), &mut dh_buf, gg, gb, d);
            }

            // Attention: h_mid = h_in + (softmax(q kᵀ s) v) Wo + bo
            acc_at_b(&c.o, &dh_buf, &mut grad[lo.wo..lo.wo + d * d], n, d, d);
            acc_col_sum(&dh_buf, &mut grad[lo.bo..lo.bo + d], n, d);
            let mut d_o = vec![0.0; n * d];
            acc_a_bt(&dh_buf, p(lo.wo, d * d), &mut d_o, n, d, d);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut datt = vec![0.0; n];
            for hd in 0..n_heads {
                let off = hd * dh;
                for i in 0..n {
                    let a = &c.att[(hd * n + i) * n..(hd * n + i + 1) * n];
                    let doi = &d_o[i * d + off..i * d + off + dh];
                    for j in 0..n {
                        let vj = &c.v[j * d + off..j * d + off + dh];
                        datt[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for (x, &g) in dvj.iter_mut().zip(doi) {
                            *x += a[j] * g;
                        }
                    }
                    let dot: f64 = a.iter().zip(&datt).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        let ds = a[j] * (datt[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for e in 0..dh {
                            dq[i * d + off + e] += ds * c.k[j * d + off + e];
                            dk[j * d + off + e] += ds * c.q[i * d + off + e];
                        }
                    }
                }
            }
            let mut da1 = vec![0.0; n * d];
            for (w, b, dx) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
                acc_at_b(&c.a1, dx, &mut grad[w..w + d * d], n, d, d);
                acc_col_sum(dx, &mut grad[b..b + d], n, d);
                acc_a_bt(dx, p(w, d * d), &mut da1, n, d, d);
            }
            {
                let (gg, gb) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
                layer_norm_backward(&da1, &c.ln1_xhat, &c.ln1_rstd, p(lo.ln1_g, d), &mut dh_buf, gg, gb, d);
            }
        }

        for (i, &id) in cache.ids.iter().enumerate() {
            let g = &dh_buf[i * d..(i + 1) * d];
            for (x, &y) in grad[layout.tok + id * d..layout.tok + (id + 1) * d].iter_mut().zip(g) {
                *x += y;
            }
            for (x, &y) in grad[layout.pos + i * d..layout.pos + (i + 1) * d].iter_mut().zip(g) {
                *x += y;
            }
        }
    }

    pub fn forward(&self, x: &MaskedSeq) -> ForwardCache {
        self.forward_with(&self.params, &self.input_ids(x))
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], dfeat: Option<&[f64]>, grad: &mut [f64]) {
        self.backward_with(&self.params, cache, dlogits, dfeat, grad)
    }
}

/// Disjoint mutable views of two equal-length, non-overlapping ranges where `a < b`.
fn split_pair(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

impl Denoiser for TinyDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn feature_dim(&self) -> usize {
        self.arch.d_model
    }

    fn predict(&self, x: &MaskedSeq) -> Prediction {
        let cache = self.forward(x);
        let n = x.len();
        Prediction {
            posterior: PosteriorGrid { len: n, vocab: self.vocab.len(), data: cache.probs },
            features: FeatureGrid { len: n, dim: self.arch.d_model, data: cache.features },
        }
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}
