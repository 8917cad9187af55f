//! Correction heads: per-token error probabilities for committed tokens.
//!
//! [`BayesHead`] computes them exactly by enumeration; [`LearnedHead`] is a
//! row-wise MLP over denoiser features, trained either on a frozen
//! denoiser ([`train_head_decoupled`]) or together with it
//! ([`train_joint_baseline`]).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{Label, LabeledSample};
use crate::denoiser::{
    demask_batch, leave_one_out_posterior, Denoiser, DenoiserTrainConfig, Prediction, TinyDenoiser,
};
use crate::diffusion::{MaskedSeq, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, sigmoid, softplus};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::Seed;
use crate::tasks::{Instance, TaskSpec};

/// Score carried by positions a head does not rate.
pub const INVALID_SCORE: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionScores {
    /// Error probability per position, `INVALID_SCORE` where not valid.
    pub p_error: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CorrectionScores {
    pub fn new(p_error: Vec<f64>, valid: Vec<bool>) -> Self {
        let p_error = p_error.into_iter().zip(&valid).map(|(p, &v)| if v { p } else { INVALID_SCORE }).collect();
        Self { p_error, valid }
    }

    pub fn len(&self) -> usize {
        self.p_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_error.is_empty()
    }
}

/// Positions a head should score in `z`: unmasked and maskable.
pub fn scorable(z: &MaskedSeq, maskable: &[bool]) -> Vec<bool> {
    z.0.iter().zip(maskable).map(|(t, &m)| m && t.is_some()).collect()
}

/// Mean binary cross-entropy over applicable positions, positive class =
/// incorrect. Zero (with a warning) when nothing is applicable.
pub fn bce_head_loss(scores: &CorrectionScores, labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), got: scores.len() });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&p, &v), &l) in scores.p_error.iter().zip(&scores.valid).zip(labels) {
        if v != (l != Label::NotApplicable) {
            return Err(Error::InvalidConfig("score validity does not match label applicability".into()));
        }
        if !v {
            continue;
        }
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if l == Label::Incorrect { p.ln() } else { (1.0 - p).ln() };
        n += 1;
    }
    if n == 0 {
        tracing::warn!("bce_head_loss: no applicable positions");
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

/// `1 - P(x0_i = z_i | other unmasked positions)`, by enumeration.
/// Returns `(1.0, true)` when the other positions admit no completion.
pub fn bayes_error_prob(spec: &TaskSpec, z: &MaskedSeq, i: usize) -> Result<(f64, bool)> {
    if i >= z.len() {
        return Err(Error::IndexOutOfRange { index: i, len: z.len() });
    }
    let zi = z.get(i).ok_or_else(|| Error::InvalidConfig(format!("position {i} is masked")))?;
    let prompt: Vec<TokenId> = z.0[..spec.prompt_len]
        .iter()
        .map(|t| t.ok_or_else(|| Error::InvalidPrompt { task: spec.name.as_str().into(), reason: "masked prompt".into() }))
        .collect::<Result<_>>()?;
    if i < spec.prompt_len {
        return Ok((0.0, false));
    }
    let j = i - spec.prompt_len;
    let gen = &z.0[spec.prompt_len..];
    let mut z_all = 0.0;
    let mut z_hit = 0.0;
    for c in spec.prior_completions(&prompt)? {
        let consistent = gen.iter().enumerate().all(|(k, t)| k == j || t.is_none_or(|t| t == c.tokens[k]));
        if consistent {
            z_all += c.weight;
            if c.tokens[j] == zi {
                z_hit += c.weight;
            }
        }
    }
    if z_all == 0.0 {
        return Ok((1.0, true));
    }
    Ok(((1.0 - z_hit / z_all).clamp(0.0, 1.0), false))
}

/// A correction head: error probabilities for the `valid` positions of `x`,
/// given the denoiser's prediction at `x`.
pub trait CorrectionHead: Sync {
    fn score(&self, x: &MaskedSeq, pred: &Prediction, valid: &[bool]) -> CorrectionScores;
}

impl<H: CorrectionHead + ?Sized> CorrectionHead for &H {
    fn score(&self, x: &MaskedSeq, pred: &Prediction, valid: &[bool]) -> CorrectionScores {
        (**self).score(x, pred, valid)
    }
}

/// Exact head. Uses the nearest-completion leave-one-out posterior, so a
/// token is judged against the completions that best explain the rest of
/// the sequence even when the rest already contains errors.
#[derive(Debug, Clone)]
pub struct BayesHead {
    spec: TaskSpec,
}

impl BayesHead {
    pub fn new(spec: TaskSpec) -> Self {
        Self { spec }
    }
}

impl CorrectionHead for BayesHead {
    fn score(&self, x: &MaskedSeq, _pred: &Prediction, valid: &[bool]) -> CorrectionScores {
        let loo = leave_one_out_posterior(&self.spec, x).expect("input must match the task layout");
        let p = x
            .0
            .iter()
            .zip(&loo)
            .zip(valid)
            .map(|((t, (row, _)), &v)| match (t, v) {
                (Some(t), true) => (1.0 - row[*t as usize]).clamp(0.0, 1.0),
                _ => INVALID_SCORE,
            })
            .collect();
        CorrectionScores::new(p, valid.to_vec())
    }
}

/// Row-wise MLP `in → hidden → hidden → 1` with GELU and a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

struct RowCache {
    u1: Vec<f64>,
    g1: Vec<f64>,
    u2: Vec<f64>,
    g2: Vec<f64>,
    logit: f64,
}

impl LearnedHead {
    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        in_dim * hidden + hidden + hidden * hidden + hidden + hidden + 1
    }

    pub fn new(in_dim: usize, hidden: usize, seed: Seed) -> Self {
        let mut rng = seed.derive_str("head-init").rng();
        let mut params = vec![0.0; Self::param_count(in_dim, hidden)];
        let (w1, rest) = params.split_at_mut(in_dim * hidden);
        let (_, rest) = rest.split_at_mut(hidden);
        let (w2, rest) = rest.split_at_mut(hidden * hidden);
        let (_, w3) = rest.split_at_mut(hidden);
        for (w, fan_in) in [(w1, in_dim), (w2, hidden), (&mut w3[..hidden], hidden)] {
            let a = (3.0 / fan_in as f64).sqrt();
            for p in w.iter_mut() {
                *p = rng.gen_range(-a..a);
            }
        }
        Self { in_dim, hidden, params }
    }

    fn offsets(&self) -> [usize; 6] {
        let (f, h) = (self.in_dim, self.hidden);
        let w1 = 0;
        let b1 = w1 + f * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        [w1, b1, w2, b2, w3, b3]
    }

    fn forward_row(&self, params: &[f64], x: &[f64]) -> RowCache {
        let (f, h) = (self.in_dim, self.hidden);
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        let mut u1 = params[b1..b1 + h].to_vec();
        for (k, &xv) in x.iter().enumerate().take(f) {
            if xv == 0.0 {
                continue;
            }
            for (u, &w) in u1.iter_mut().zip(&params[w1 + k * h..w1 + (k + 1) * h]) {
                *u += xv * w;
            }
        }
        let g1: Vec<f64> = u1.iter().map(|&u| gelu(u)).collect();
        let mut u2 = params[b2..b2 + h].to_vec();
        for (k, &gv) in g1.iter().enumerate() {
            for (u, &w) in u2.iter_mut().zip(&params[w2 + k * h..w2 + (k + 1) * h]) {
                *u += gv * w;
            }
        }
        let g2: Vec<f64> = u2.iter().map(|&u| gelu(u)).collect();
        let logit = params[b3] + g2.iter().zip(&params[w3..w3 + h]).map(|(a, b)| a * b).sum::<f64>();
        RowCache { u1, g1, u2, g2, logit }
    }

    fn backward_row(&self, params: &[f64], x: &[f64], c: &RowCache, dlogit: f64, grad: &mut [f64], dx: Option<&mut [f64]>) {
        let h = self.hidden;
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        grad[b3] += dlogit;
        let mut du2 = vec![0.0; h];
        for k in 0..h {
            grad[w3 + k] += dlogit * c.g2[k];
            du2[k] = dlogit * params[w3 + k] * gelu_grad(c.u2[k]);
        }
        let mut du1 = vec![0.0; h];
        for k in 0..h {
            let row = w2 + k * h;
            let mut acc = 0.0;
            for m in 0..h {
                grad[row + m] += c.g1[k] * du2[m];
                acc += params[row + m] * du2[m];
            }
            du1[k] = acc * gelu_grad(c.u1[k]);
        }
        for m in 0..h {
            grad[b2 + m] += du2[m];
            grad[b1 + m] += du1[m];
        }
        for (k, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                for m in 0..h {
                    grad[w1 + k * h + m] += xv * du1[m];
                }
            }
        }
        if let Some(dx) = dx {
            for (k, d) in dx.iter_mut().enumerate() {
                *d += params[w1 + k * h..w1 + (k + 1) * h].iter().zip(&du1).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward_row(&self.params, x).logit)
    }

    /// Mean BCE over `(features, incorrect)` rows at `params`, with its gradient.
    pub fn batch_loss(&self, params: &[f64], rows: &[(Vec<f64>, bool)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let w = 1.0 / rows.len().max(1) as f64;
        let loss = rows.iter().map(|(x, y)| w * self.row_loss(params, x, *y, w, &mut grad, None)).sum();
        (loss, grad)
    }

    /// BCE (positive = incorrect) of one row and its gradient, scaled by `w`.
    fn row_loss(&self, params: &[f64], x: &[f64], incorrect: bool, w: f64, grad: &mut [f64], dx: Option<&mut [f64]>) -> f64 {
        let c = self.forward_row(params, x);
        let y = if incorrect { 1.0 } else { 0.0 };
        // BCE with logits: softplus(s) - y s
        let loss = softplus(c.logit) - y * c.logit;
        let dlogit = w * (sigmoid(c.logit) - y);
        self.backward_row(params, x, &c, dlogit, grad, dx);
        loss
    }
}

impl CorrectionHead for LearnedHead {
    fn score(&self, x: &MaskedSeq, pred: &Prediction, valid: &[bool]) -> CorrectionScores {
        let p = (0..x.len()).map(|i| if valid[i] { self.prob(pred.features.row(i)) } else { INVALID_SCORE }).collect();
        CorrectionScores::new(p, valid.to_vec())
    }
}

/// Area under the ROC curve of `scores` for the positive rows; ties count one half.
/// Returns `None` when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Hidden width as a multiple of the feature dimension.
    pub width_mult: usize,
    pub optim: AdamWConfig,
    /// Weight on incorrect-labeled rows.
    pub pos_weight: f64,
    /// Fraction of samples held out for AUC.
    pub holdout_frac: f64,
    pub seed: Seed,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            width_mult: 4,
            optim: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..AdamWConfig::default() },
            pos_weight: 1.0,
            holdout_frac: 0.2,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub curve: Vec<(usize, f64)>,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub holdout_auc: Option<f64>,
    /// Norm of the gradient reaching the denoiser. Always zero here.
    pub denoiser_grad_norm: f64,
}

/// Feature rows and "incorrect" targets of every applicable position.
pub fn feature_rows<D: Denoiser>(den: &D, samples: &[LabeledSample]) -> Vec<(Vec<f64>, bool)> {
    let per: Vec<Vec<(Vec<f64>, bool)>> = samples
        .par_iter()
        .map(|s| {
            let pred = den.predict(&s.z);
            s.applicable().map(|(i, l)| (pred.features.row(i).to_vec(), l == Label::Incorrect)).collect()
        })
        .collect();
    per.into_iter().flatten().collect()
}

/// AUC of `head` over the applicable positions of `samples`.
pub fn head_auc<D: Denoiser, H: CorrectionHead>(den: &D, head: &H, samples: &[LabeledSample]) -> Option<f64> {
    let per: Vec<(Vec<f64>, Vec<bool>)> = samples
        .par_iter()
        .map(|s| {
            let pred = den.predict(&s.z);
            let sc = head.score(&s.z, &pred, &scorable(&s.z, &s.maskable));
            s.applicable().map(|(i, l)| (sc.p_error[i], l == Label::Incorrect)).unzip()
        })
        .collect();
    let (mut scores, mut pos) = (Vec::new(), Vec::new());
    for (s, p) in per {
        scores.extend(s);
        pos.extend(p);
    }
    auc(&scores, &pos)
}

/// Train a head on a frozen denoiser's features. The last `holdout_frac`
/// of `samples` is held out for AUC.
pub fn train_head_decoupled<D: Denoiser>(
    den: &D,
    samples: &[LabeledSample],
    cfg: &HeadTrainConfig,
) -> Result<(LearnedHead, HeadReport)> {
    if !den.is_frozen() {
        return Err(Error::MissingPrerequisite("decoupled head training needs a frozen denoiser".into()));
    }
    let n_hold = ((samples.len() as f64) * cfg.holdout_frac).round() as usize;
    let (train, hold) = samples.split_at(samples.len() - n_hold.min(samples.len()));
    let rows = feature_rows(den, train);
    let dim = den.feature_dim();
    let mut head = LearnedHead::new(dim, (cfg.width_mult * dim).max(1), cfg.seed);
    let mut report = HeadReport { curve: Vec::new(), train_rows: rows.len(), holdout_rows: 0, holdout_auc: None, denoiser_grad_norm: 0.0 };
    if !rows.is_empty() {
        let mut opt = AdamW::new(cfg.optim, head.params.len(), &[(0, head.params.len())]);
        let mut grad = vec![0.0; head.params.len()];
        for step in 0..cfg.steps {
            let mut rng = cfg.seed.derive_str("head-batches").derive(step as u64).rng();
            grad.fill(0.0);
            let mut loss = 0.0;
            for _ in 0..cfg.batch_size {
                let (x, y) = &rows[rng.gen_range(0..rows.len())];
                let w = if *y { cfg.pos_weight } else { 1.0 } / cfg.batch_size as f64;
                loss += w * head.row_loss(&head.params, x, *y, w, &mut grad, None);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if step % 50 == 0 || step + 1 == cfg.steps {
                report.curve.push((step, loss));
            }
            opt.clip(&mut grad);
            let lr = cosine_lr(step, cfg.steps, cfg.optim.lr, cfg.optim.warmup_frac);
            opt.step(&mut head.params, &grad, lr);
        }
    }
    report.holdout_rows = hold.iter().map(|s| s.applicable().count()).sum();
    report.holdout_auc = head_auc(den, &head, hold);
    Ok((head, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointTrainConfig {
    pub gamma: f64,
    /// Labeled samples per step for the error term.
    pub head_batch: usize,
    pub denoiser: DenoiserTrainConfig,
    pub head_optim: AdamWConfig,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            head_batch: 16,
            denoiser: DenoiserTrainConfig::default(),
            head_optim: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub demask_curve: Vec<(usize, f64)>,
    pub error_curve: Vec<(usize, f64)>,
}

/// Simultaneous steps on `demask + gamma * bce`. The error term's gradient
/// flows through the head into the denoiser's features. The demask part
/// draws exactly the batches [`crate::denoiser::train_denoiser`] draws.
pub fn train_joint_baseline(
    model: &mut TinyDenoiser,
    head: &mut LearnedHead,
    data: &[Instance],
    samples: &[LabeledSample],
    cfg: &JointTrainConfig,
) -> Result<JointReport> {
    if cfg.gamma < 0.0 || !cfg.gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must be finite and non-negative, got {}", cfg.gamma)));
    }
    if model.is_frozen() {
        return Err(Error::Frozen);
    }
    if head.in_dim != model.feature_dim() {
        return Err(Error::LengthMismatch { expected: model.feature_dim(), got: head.in_dim });
    }
    let dc = &cfg.denoiser;
    if data.is_empty() || dc.batch_size == 0 {
        return Err(Error::InvalidConfig("training needs data and a positive batch size".into()));
    }
    let mut opt = AdamW::new(dc.optim, model.param_count(), &model.decay_ranges());
    let mut head_opt = AdamW::new(cfg.head_optim, head.params.len(), &[(0, head.params.len())]);
    let mut grad = vec![0.0; model.param_count()];
    let mut report = JointReport { demask_curve: Vec::new(), error_curve: Vec::new() };

    for step in 0..dc.steps {
        let batch = crate::denoiser::draw_batch(data, dc.batch_size, dc.seed, step)?;
        let (demask, _) = demask_batch(model, model.params(), &batch, &mut grad);
        if !demask.is_finite() {
            return Err(Error::Diverged { step, loss: demask });
        }

        let mut g_err = vec![0.0; model.param_count()];
        let mut g_head = vec![0.0; head.params.len()];
        let mut err = 0.0;
        if !samples.is_empty() && cfg.head_batch > 0 {
            let mut rng = dc.seed.derive_str("joint-samples").derive(step as u64).rng();
            let picks: Vec<&LabeledSample> = (0..cfg.head_batch).map(|_| &samples[rng.gen_range(0..samples.len())]).collect();
            let rows: usize = picks.iter().map(|s| s.applicable().count()).sum();
            if rows > 0 {
                let w = 1.0 / rows as f64;
                for s in picks {
                    let cache = model.forward(&s.z);
                    let dim = head.in_dim;
                    let mut dfeat = vec![0.0; s.z.len() * dim];
                    for (i, l) in s.applicable() {
                        let x = &cache.features[i * dim..(i + 1) * dim];
                        err += w * head.row_loss(&head.params, x, l == Label::Incorrect, w, &mut g_head, Some(&mut dfeat[i * dim..(i + 1) * dim]));
                    }
                    let zero = vec![0.0; s.z.len() * model.vocab().len()];
                    model.backward(&cache, &zero, Some(&dfeat), &mut g_err);
                }
            }
        }
        if !err.is_finite() {
            return Err(Error::Diverged { step, loss: err });
        }
        for (g, e) in grad.iter_mut().zip(&g_err) {
            *g += cfg.gamma * e;
        }
        g_head.iter_mut().for_each(|g| *g *= cfg.gamma);

        if dc.log_every > 0 && (step % dc.log_every == 0 || step + 1 == dc.steps) {
            report.demask_curve.push((step, demask));
            report.error_curve.push((step, err));
        }
        opt.clip(&mut grad);
        head_opt.clip(&mut g_head);
        let lr = cosine_lr(step, dc.steps, dc.optim.lr, dc.optim.warmup_frac);
        opt.step(model.params_mut()?, &grad, lr);
        let hlr = cosine_lr(step, dc.steps, cfg.head_optim.lr, cfg.head_optim.warmup_frac);
        head_opt.step(&mut head.params, &g_head, hlr);
    }
    Ok(report)
}
