//! Demasking-loss training for [`TinyDenoiser`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, TinyDenoiser, T_MIN};
use crate::diffusion::{forward_corrupt, MaskedSeq, TokenId};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::Seed;
use crate::tasks::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: Seed,
    /// Record the batch loss every `log_every` steps.
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, optim: AdamWConfig::default(), seed: Seed(0), log_every: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, batch-mean loss)` pairs.
    pub curve: Vec<(usize, f64)>,
    /// Number of samples whose `1/t` weight was clamped.
    pub clamped: usize,
    pub final_loss: f64,
}

/// One training example: clean sequence, its corruption and the time used.
#[derive(Debug, Clone, PartialEq)]
pub struct DemaskSample {
    pub x0: Vec<TokenId>,
    pub x_t: MaskedSeq,
    pub t: f64,
}

impl DemaskSample {
    pub fn draw(inst: &Instance, seed: Seed) -> Result<Self> {
        let t: f64 = seed.derive_str("t").rng().gen();
        let x_t = forward_corrupt(&inst.full_seq(), &inst.maskable, t, seed.derive_str("mask"))?;
        Ok(Self { x0: inst.full.clone(), x_t, t })
    }
}

/// `Σ_{i in masked} -ln p_i(x0_i)` for a `len × vocab` probability grid,
/// and its gradient w.r.t. the logits scaled by `weight`.
pub fn masked_cross_entropy(probs: &[f64], vocab: usize, x0: &[TokenId], masked: &[usize], weight: f64) -> (f64, Vec<f64>) {
    let mut nll = 0.0;
    let mut dlogits = vec![0.0; probs.len()];
    for &i in masked {
        let row = &probs[i * vocab..(i + 1) * vocab];
        let y = x0[i] as usize;
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
        let d = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (dv, &p) in d.iter_mut().zip(row) {
            *dv = weight * p;
        }
        d[y] -= weight;
    }
    (nll, dlogits)
}

/// Batch-mean demasking loss and its parameter gradient (written to `grad`).
///
/// Per-sample gradients are summed in batch order, so the result does not
/// depend on the rayon thread count.
pub fn demask_batch(model: &TinyDenoiser, params: &[f64], batch: &[DemaskSample], grad: &mut [f64]) -> (f64, usize) {
    let v = model.vocab().len();
    let parts: Vec<(f64, bool, Vec<f64>)> = batch
        .par_iter()
        .map(|s| {
            let ids = model.input_ids(&s.x_t);
            let cache = model.forward_with(params, &ids);
            let w = 1.0 / s.t.max(T_MIN);
            let masked = s.x_t.masked();
            let (nll, dlogits) = masked_cross_entropy(&cache.probs, v, &s.x0, &masked, w / batch.len() as f64);
            let mut g = vec![0.0; params.len()];
            if !masked.is_empty() {
                model.backward_with(params, &cache, &dlogits, None, &mut g);
            }
            (w * nll, s.t < T_MIN, g)
        })
        .collect();
    grad.fill(0.0);
    let mut loss = 0.0;
    let mut clamped = 0;
    for (l, c, g) in parts {
        loss += l;
        clamped += usize::from(c);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss / batch.len().max(1) as f64, clamped)
}

/// Seed for batch slot `slot` at optimizer step `step`.
pub(crate) fn slot_seed(seed: Seed, step: usize, slot: usize) -> Seed {
    seed.derive(step as u64).derive(slot as u64)
}

pub(crate) fn draw_batch(data: &[Instance], batch_size: usize, seed: Seed, step: usize) -> Result<Vec<DemaskSample>> {
    let mut rng = seed.derive_str("batches").derive(step as u64).rng();
    (0..batch_size)
        .map(|b| {
            let inst = &data[rng.gen_range(0..data.len())];
            DemaskSample::draw(inst, slot_seed(seed.derive_str("demask"), step, b))
        })
        .collect()
}

/// Train with AdamW on the demasking loss. Fails on frozen models, empty
/// data, or a non-finite loss.
pub fn train_denoiser(model: &mut TinyDenoiser, data: &[Instance], cfg: &DenoiserTrainConfig) -> Result<TrainReport> {
    if model.is_frozen() {
        return Err(Error::Frozen);
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("training needs data and a positive batch size".into()));
    }
    let mut opt = AdamW::new(cfg.optim, model.param_count(), &model.decay_ranges());
    let mut grad = vec![0.0; model.param_count()];
    let mut report = TrainReport { curve: Vec::new(), clamped: 0, final_loss: f64::NAN };
    for step in 0..cfg.steps {
        let batch = draw_batch(data, cfg.batch_size, cfg.seed, step)?;
        let (loss, clamped) = demask_batch(model, model.params(), &batch, &mut grad);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        report.clamped += clamped;
        report.final_loss = loss;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            tracing::debug!(step, loss, "denoiser");
            report.curve.push((step, loss));
        }
        opt.clip(&mut grad);
        let lr = cosine_lr(step, cfg.steps, cfg.optim.lr, cfg.optim.warmup_frac);
        opt.step(model.params_mut()?, &grad, lr);
    }
    Ok(report)
}

/// Mean `-ln p(x0_i)` per masked token over `draws` corruptions of each
/// instance. Works for any denoiser so learned and exact models compare.
pub fn mean_masked_nll<D: Denoiser>(den: &D, data: &[Instance], seed: Seed, draws: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, inst) in data.iter().enumerate() {
        for k in 0..draws {
            let s = DemaskSample::draw(inst, slot_seed(seed, n, k))?;
            let masked = s.x_t.masked();
            if masked.is_empty() {
                continue;
            }
            let post = den.predict(&s.x_t).posterior;
            for &i in &masked {
                total -= post.row(i)[s.x0[i] as usize].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
