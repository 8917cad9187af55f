//! Masked-diffusion primitives: vocabulary, masked sequences, the linear
//! schedule, forward and bridge corruption, and `replace`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

pub type TokenId = u32;

/// Vocabulary layout. Real tokens are `0..size`; `mask_id == size` is the
/// input-embedding row used for the mask sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
    pub mask_id: u32,
    pub eos_id: u32,
}

impl Vocab {
    pub fn new(size: u32, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!("vocab size {size} < 2")));
        }
        if eos_id >= size {
            return Err(Error::InvalidConfig(format!("eos id {eos_id} outside vocab of {size}")));
        }
        Ok(Self { size, mask_id: size, eos_id })
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Embedding index of a possibly masked token.
    pub fn input_id(&self, tok: Option<TokenId>) -> usize {
        tok.unwrap_or(self.mask_id) as usize
    }
}

/// Fixed-length sequence over the vocabulary plus MASK (`None`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskedSeq(pub Vec<Option<TokenId>>);

impl MaskedSeq {
    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        Self(tokens.iter().map(|&t| Some(t)).collect())
    }

    pub fn all_masked(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<TokenId> {
        self.0[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.0[i].is_none()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|t| t.is_none()).count()
    }

    /// Tokens if nothing is masked.
    pub fn unmasked_tokens(&self) -> Option<Vec<TokenId>> {
        self.0.iter().copied().collect()
    }

    /// Wire encoding used by the JSONL formats: MASK is `-1`.
    pub fn to_wire(&self) -> Vec<i64> {
        self.0.iter().map(|t| t.map_or(-1, i64::from)).collect()
    }

    pub fn from_wire(v: &[i64]) -> Self {
        Self(v.iter().map(|&t| if t < 0 { None } else { Some(t as TokenId) }).collect())
    }
}

/// Noise schedule. Only the linear schedule ships.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Keep probability at time `t`.
    pub fn alpha(self, t: f64) -> Result<f64> {
        check_time(t)?;
        match self {
            NoiseSchedule::Linear => Ok(1.0 - t),
        }
    }
}

pub fn alpha(t: f64) -> Result<f64> {
    NoiseSchedule::Linear.alpha(t)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(())
}

/// Independently mask each maskable position with probability `1 - alpha(t)`.
///
/// Position `i` uses the `i`-th uniform of `seed`'s counter stream, so
/// corrupting the same sequence at two times with one seed yields nested
/// mask sets.
pub fn forward_corrupt(x0: &MaskedSeq, maskable: &[bool], t: f64, seed: Seed) -> Result<MaskedSeq> {
    let keep = alpha(t)?;
    if maskable.len() != x0.len() {
        return Err(Error::LengthMismatch { expected: x0.len(), got: maskable.len() });
    }
    if x0.masked_count() > 0 {
        return Err(Error::InvalidConfig("forward corruption needs a clean sequence".into()));
    }
    let out = x0
        .0
        .iter()
        .zip(maskable)
        .enumerate()
        .map(|(i, (&tok, &m))| {
            if m && seed.uniform_at(i as u64) >= keep {
                None
            } else {
                tok
            }
        })
        .collect();
    Ok(MaskedSeq(out))
}

/// Sample `x_{t+t_fwd}` given `x_t`: masks stay masked, every unmasked
/// maskable position survives with probability `alpha(t+t_fwd)/alpha(t)`.
pub fn bridge_corrupt(
    x_t: &MaskedSeq,
    maskable: &[bool],
    t: f64,
    t_fwd: f64,
    seed: Seed,
) -> Result<MaskedSeq> {
    check_time(t)?;
    if t_fwd < 0.0 || t + t_fwd > 1.0 + 1e-12 {
        return Err(Error::InvalidBridge { t, t_fwd });
    }
    if maskable.len() != x_t.len() {
        return Err(Error::LengthMismatch { expected: x_t.len(), got: maskable.len() });
    }
    if t_fwd == 0.0 {
        return Ok(x_t.clone());
    }
    if t >= 1.0 {
        return Err(Error::InvalidBridge { t, t_fwd });
    }
    // P(mask | unmasked at t) = 1 - (1 - t - t_fwd) / (1 - t) = t_fwd / (1 - t)
    let p_mask = (t_fwd / (1.0 - t)).min(1.0);
    let out = x_t
        .0
        .iter()
        .zip(maskable)
        .enumerate()
        .map(|(i, (&tok, &m))| match tok {
            Some(_) if m && (p_mask >= 1.0 || seed.uniform_at(i as u64) < p_mask) => None,
            other => other,
        })
        .collect();
    Ok(MaskedSeq(out))
}

/// `out[i] = y[i]` for `i` in `positions`, else `x[i]`.
pub fn replace(x: &MaskedSeq, y: &[TokenId], positions: &[usize]) -> Result<MaskedSeq> {
    if y.len() != x.len() {
        return Err(Error::LengthMismatch { expected: x.len(), got: y.len() });
    }
    let mut out = x.clone();
    for &i in positions {
        if i >= x.len() {
            return Err(Error::IndexOutOfRange { index: i, len: x.len() });
        }
        out.0[i] = Some(y[i]);
    }
    Ok(out)
}
