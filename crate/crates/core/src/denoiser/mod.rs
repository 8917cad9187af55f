//! Mask predictors `p(x_0 | x_t)`.
//!
//! [`Denoiser`] is the interface every decoder and trainer talks to. Two
//! implementations ship: [`OracleDenoiser`], which computes exact posteriors
//! by enumerating a task's completions, and [`TinyDenoiser`], a small
//! bidirectional transformer trained with the demasking loss.

mod neural;
mod oracle;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::{MaskedSeq, TokenId, Vocab};

pub use neural::{Arch, ForwardCache, TinyDenoiser};
pub use oracle::{leave_one_out_posterior, oracle_predict, MismatchPosterior, OracleDenoiser};
pub(crate) use train::draw_batch;
pub use train::{demask_batch, masked_cross_entropy, mean_masked_nll, train_denoiser, DemaskSample, DenoiserTrainConfig, TrainReport};

/// Smallest `t` used for the `1/t` weight of the demasking loss.
pub const T_MIN: f64 = 1e-3;

/// Per-position categorical distributions, `len × vocab`, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl PosteriorGrid {
    pub fn zeros(len: usize, vocab: usize) -> Self {
        Self { len, vocab, data: vec![0.0; len * vocab] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn set_point_mass(&mut self, i: usize, tok: TokenId) {
        let row = self.row_mut(i);
        row.fill(0.0);
        row[tok as usize] = 1.0;
    }

    /// Most likely token and its probability; ties go to the lowest id.
    pub fn argmax(&self, i: usize) -> (TokenId, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (v, &p) in self.row(i).iter().enumerate() {
            if p > best.1 {
                best = (v as TokenId, p);
            }
        }
        best
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.argmax(i).1
    }
}

/// Per-position feature vectors (`len × dim`), the input of correction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub posterior: PosteriorGrid,
    pub features: FeatureGrid,
}

/// A mask predictor. `predict` is deterministic and read-only.
pub trait Denoiser: Sync {
    fn vocab(&self) -> Vocab;
    fn feature_dim(&self) -> usize;
    fn predict(&self, x: &MaskedSeq) -> Prediction;
    fn is_frozen(&self) -> bool;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn feature_dim(&self) -> usize {
        (**self).feature_dim()
    }
    fn predict(&self, x: &MaskedSeq) -> Prediction {
        (**self).predict(x)
    }
    fn is_frozen(&self) -> bool {
        (**self).is_frozen()
    }
}

/// Wraps a denoiser and counts `predict` calls.
pub struct CountingDenoiser<D> {
    pub inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn vocab(&self) -> Vocab {
        self.inner.vocab()
    }
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }
    fn predict(&self, x: &MaskedSeq) -> Prediction {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(x)
    }
    fn is_frozen(&self) -> bool {
        self.inner.is_frozen()
    }
}

/// Demasking loss of one sequence: `(1/t) Σ_{i masked} -ln p_i(x0_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemaskLoss {
    pub value: f64,
    /// The `1/t` weight was computed with `T_MIN` instead of `t`.
    pub clamped: bool,
}

pub fn demask_loss(posterior: &PosteriorGrid, x0: &[TokenId], x_t: &MaskedSeq, t: f64) -> DemaskLoss {
    let masked: Vec<usize> = x_t.masked();
    if masked.is_empty() {
        return DemaskLoss { value: 0.0, clamped: false };
    }
    let clamped = t < T_MIN;
    let w = 1.0 / t.max(T_MIN);
    let nll: f64 = masked.iter().map(|&i| -posterior.row(i)[x0[i] as usize].ln()).sum();
    DemaskLoss { value: w * nll, clamped }
}
