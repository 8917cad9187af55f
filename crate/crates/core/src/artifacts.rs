//! Labeled training samples for correction heads.
//!
//! Every policy shares one construction: draw `t`, corrupt `x0` to `x_t`,
//! bridge further to `x_{t+t'}`, pick a set `M` of positions masked in the
//! more corrupted state, and write artifact tokens `y` into `x_t` at `M`.
//! Policies differ in how `t'`, `M` and `y` are drawn.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PosteriorGrid};
use crate::diffusion::{bridge_corrupt, forward_corrupt, replace, MaskedSeq, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tasks::Instance;

/// Attempts before a sample is rejected.
pub const MAX_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Confidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ArtifactPolicy {
    /// `t' ~ U[dt, 1-t]`, `y` sampled from the denoiser, `M` by confidence.
    Lbc { dt: f64 },
    /// Same positions machinery with `M` drawn uniformly and `y` uniform over the vocabulary.
    Uniform { rate: f64 },
    /// `t' = dt` exactly.
    SingleStep { dt: f64, selection: Selection },
}

impl ArtifactPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Lbc { dt } | Self::SingleStep { dt, .. } if !(dt > 0.0 && dt <= 1.0) => {
                Err(Error::InvalidConfig(format!("artifact dt must lie in (0, 1], got {dt}")))
            }
            Self::Uniform { rate } if !(rate > 0.0 && rate < 1.0) => {
                Err(Error::InvalidConfig(format!("uniform rate must lie in (0, 1), got {rate}")))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Lbc { .. } => "lbc",
            Self::Uniform { .. } => "uniform",
            Self::SingleStep { selection: Selection::Confidence, .. } => "single-step-confidence",
            Self::SingleStep { selection: Selection::Random, .. } => "single-step-random",
        }
    }

    fn dt(&self) -> f64 {
        match *self {
            Self::Lbc { dt } | Self::SingleStep { dt, .. } => dt,
            Self::Uniform { rate } => rate,
        }
    }

    fn needs_denoiser(&self) -> bool {
        !matches!(self, Self::Uniform { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Correct,
    Incorrect,
    NotApplicable,
}

impl Label {
    pub fn to_wire(self) -> i8 {
        match self {
            Self::Correct => 1,
            Self::Incorrect => 0,
            Self::NotApplicable => -1,
        }
    }

    pub fn from_wire(v: i8) -> Result<Self> {
        match v {
            1 => Ok(Self::Correct),
            0 => Ok(Self::Incorrect),
            -1 => Ok(Self::NotApplicable),
            _ => Err(Error::InvalidConfig(format!("bad label {v}"))),
        }
    }
}

/// Labels of `z` against `x0`; positions that are masked or not maskable are not applicable.
pub fn compute_labels(z: &MaskedSeq, x0: &[TokenId], maskable: &[bool]) -> Vec<Label> {
    z.0.iter()
        .zip(x0)
        .zip(maskable)
        .map(|((tok, &truth), &m)| match tok {
            Some(v) if m => {
                if *v == truth {
                    Label::Correct
                } else {
                    Label::Incorrect
                }
            }
            _ => Label::NotApplicable,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub z: MaskedSeq,
    pub x0: Vec<TokenId>,
    pub maskable: Vec<bool>,
    pub t: f64,
    pub t_fwd: f64,
    pub labels: Vec<Label>,
    /// Artifact positions, ascending.
    pub m: Vec<usize>,
    pub policy: String,
}

impl LabeledSample {
    pub fn applicable(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.labels.iter().copied().enumerate().filter(|(_, l)| *l != Label::NotApplicable)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleWire {
    z: Vec<i64>,
    x0: Vec<TokenId>,
    t: f64,
    labels: Vec<i8>,
    m: Vec<usize>,
    policy: String,
    t_fwd: f64,
}

pub fn write_samples<W: Write>(mut w: W, samples: &[LabeledSample]) -> Result<()> {
    for s in samples {
        let wire = SampleWire {
            z: s.z.to_wire(),
            x0: s.x0.clone(),
            t: s.t,
            labels: s.labels.iter().map(|l| l.to_wire()).collect(),
            m: s.m.clone(),
            policy: s.policy.clone(),
            t_fwd: s.t_fwd,
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads samples back. Maskability is recovered from the labels and `z`: a
/// position counts as maskable when it is labeled or masked.
pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: SampleWire = serde_json::from_str(&line)?;
        let z = MaskedSeq::from_wire(&w.z);
        let labels = w.labels.iter().map(|&v| Label::from_wire(v)).collect::<Result<Vec<_>>>()?;
        let maskable = labels.iter().zip(&z.0).map(|(l, t)| *l != Label::NotApplicable || t.is_none()).collect();
        out.push(LabeledSample { z, x0: w.x0, maskable, t: w.t, t_fwd: w.t_fwd, labels, m: w.m, policy: w.policy });
    }
    Ok(out)
}

/// Indices of the `k` highest `scores`, ties to the lowest index; result ascending.
pub fn top_k_indices(candidates: &[usize], scores: impl Fn(usize) -> f64, k: usize) -> Vec<usize> {
    let mut c: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, scores(i))).collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = c.into_iter().take(k).map(|(i, _)| i).collect();
    out.sort_unstable();
    out
}

/// Draw one token per row from a posterior grid using uniforms from `seed`.
pub fn sample_tokens(post: &PosteriorGrid, positions: &[usize], seed: Seed) -> Vec<(usize, TokenId)> {
    positions
        .iter()
        .map(|&i| {
            let u = seed.uniform_at(i as u64);
            let row = post.row(i);
            let mut acc = 0.0;
            let mut tok = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            for (v, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = v;
                    break;
                }
            }
            (i, tok as TokenId)
        })
        .collect()
}

fn build<D: Denoiser>(inst: &Instance, policy: ArtifactPolicy, den: Option<&D>, vocab: Vocab, seed: Seed) -> Result<(LabeledSample, MaskedSeq)> {
    policy.validate()?;
    let dt = policy.dt();
    let len = inst.full.len();
    let gen_len = inst.maskable.iter().filter(|&&m| m).count();
    let size = ((gen_len as f64) * dt).ceil() as usize;
    let x0 = inst.full_seq();

    for attempt in 0..MAX_RETRIES {
        let s = seed.derive(attempt as u64);
        let t: f64 = s.derive_str("t").rng().gen();
        if 1.0 - t < dt {
            continue;
        }
        let t_fwd = match policy {
            ArtifactPolicy::SingleStep { .. } => dt,
            _ => {
                let hi = 1.0 - t;
                dt + (hi - dt) * s.derive_str("t_fwd").rng().gen::<f64>()
            }
        };
        let x_t = forward_corrupt(&x0, &inst.maskable, t, s.derive_str("x_t"))?;
        let x_up = bridge_corrupt(&x_t, &inst.maskable, t, t_fwd, s.derive_str("bridge"))?;
        let candidates = x_up.masked();
        if candidates.len() < size {
            continue;
        }

        let (m, y_at): (Vec<usize>, Vec<(usize, TokenId)>) = match policy {
            ArtifactPolicy::Uniform { .. } => {
                let mut rng = s.derive_str("select").rng();
                let mut m: Vec<usize> = candidates.choose_multiple(&mut rng, size).copied().collect();
                m.sort_unstable();
                let mut rng = s.derive_str("y").rng();
                let y = m.iter().map(|&i| (i, rng.gen_range(0..vocab.size))).collect();
                (m, y)
            }
            _ => {
                let den = den.ok_or_else(|| Error::MissingPrerequisite("artifact policy needs a denoiser".into()))?;
                let post = den.predict(&x_up).posterior;
                let m = match policy {
                    ArtifactPolicy::SingleStep { selection: Selection::Random, .. } => {
                        let mut rng = s.derive_str("select").rng();
                        let mut m: Vec<usize> = candidates.choose_multiple(&mut rng, size).copied().collect();
                        m.sort_unstable();
                        m
                    }
                    _ => top_k_indices(&candidates, |i| post.confidence(i), size),
                };
                let y = sample_tokens(&post, &m, s.derive_str("y"));
                (m, y)
            }
        };

        let mut y: Vec<TokenId> = inst.full.clone();
        for &(i, tok) in &y_at {
            y[i] = tok;
        }
        let z = replace(&x_t, &y, &m)?;
        debug_assert_eq!(z.len(), len);
        let labels = compute_labels(&z, &inst.full, &inst.maskable);
        let sample = LabeledSample {
            z,
            x0: inst.full.clone(),
            maskable: inst.maskable.clone(),
            t,
            t_fwd,
            labels,
            m,
            policy: policy.tag().into(),
        };
        return Ok((sample, x_t));
    }
    Err(Error::SampleRejected { retries: MAX_RETRIES })
}

fn require_frozen<D: Denoiser>(den: &D) -> Result<()> {
    if den.is_frozen() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite("artifact construction needs a frozen denoiser".into()))
    }
}

pub fn make_lbc_sample<D: Denoiser>(inst: &Instance, den: &D, dt: f64, seed: Seed) -> Result<LabeledSample> {
    require_frozen(den)?;
    Ok(build(inst, ArtifactPolicy::Lbc { dt }, Some(den), den.vocab(), seed)?.0)
}

pub fn make_uniform_sample(inst: &Instance, vocab: Vocab, rate: f64, seed: Seed) -> Result<LabeledSample> {
    Ok(build::<crate::denoiser::OracleDenoiser>(inst, ArtifactPolicy::Uniform { rate }, None, vocab, seed)?.0)
}

pub fn make_single_step_sample<D: Denoiser>(
    inst: &Instance,
    den: &D,
    dt: f64,
    selection: Selection,
    seed: Seed,
) -> Result<LabeledSample> {
    require_frozen(den)?;
    Ok(build(inst, ArtifactPolicy::SingleStep { dt, selection }, Some(den), den.vocab(), seed)?.0)
}

pub fn make_sample<D: Denoiser>(inst: &Instance, den: &D, policy: ArtifactPolicy, seed: Seed) -> Result<LabeledSample> {
    Ok(make_sample_with_state(inst, den, policy, seed)?.0)
}

/// [`make_sample`] that also returns the clean-side state `x_t` the
/// artifacts were written into.
pub fn make_sample_with_state<D: Denoiser>(
    inst: &Instance,
    den: &D,
    policy: ArtifactPolicy,
    seed: Seed,
) -> Result<(LabeledSample, MaskedSeq)> {
    if policy.needs_denoiser() {
        require_frozen(den)?;
    }
    build(inst, policy, Some(den), den.vocab(), seed)
}

/// `per_instance` samples for each instance, in dataset order. Rejected
/// samples are skipped; the count of skips is returned alongside.
pub fn generate_samples<D: Denoiser>(
    den: &D,
    data: &[Instance],
    policy: ArtifactPolicy,
    per_instance: usize,
    seed: Seed,
) -> Result<(Vec<LabeledSample>, usize)> {
    policy.validate()?;
    if policy.needs_denoiser() {
        require_frozen(den)?;
    }
    let base = seed.derive_str(policy.tag());
    let results: Vec<Result<LabeledSample>> = (0..data.len() * per_instance)
        .into_par_iter()
        .map(|j| make_sample(&data[j / per_instance.max(1)], den, policy, base.derive(j as u64)))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(s) => out.push(s),
            Err(Error::SampleRejected { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}
