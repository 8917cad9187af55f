//! Decoding engines: confidence baseline, head-guided self-correction and
//! random remasking, all driven block by block.
//!
//! One engine runs all three strategies; they differ only in where the
//! per-token error probabilities come from. Within a block the time `t`
//! tracks the fraction of the block still masked: each step moves it down
//! by `k/L` (clamped at 0) and a remask of `r` tokens moves it back up by
//! `r/L`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::top_k_indices;
use crate::denoiser::{Denoiser, Prediction};
use crate::diffusion::{MaskedSeq, TokenId};
use crate::error::{Error, Result};
use crate::head::{CorrectionHead, CorrectionScores};
use crate::rng::Seed;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Confidence,
    Dsc,
    RandomRemask,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Confidence => "confidence",
            Self::Dsc => "dsc",
            Self::RandomRemask => "random-remask",
        }
    }

    pub fn remasks(self) -> bool {
        !matches!(self, Self::Confidence)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Self::Confidence),
            "dsc" => Ok(Self::Dsc),
            "random-remask" => Ok(Self::RandomRemask),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Tokens demasked per step.
    pub k: usize,
    /// Remask budget per trigger.
    pub remask_budget: usize,
    /// Error-probability gate.
    pub tau: f64,
    /// Remasking triggers when the step counter is a multiple of this.
    pub stride: usize,
    /// Capacity of the recently-remasked buffer.
    pub buffer: usize,
    /// Semi-autoregressive block length; `None` decodes the whole region as one block.
    pub block_len: Option<usize>,
    pub early_stop: bool,
    /// Cap on forward passes per episode.
    pub max_iters: usize,
    pub sampling: Sampling,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Confidence,
            k: 1,
            remask_budget: 2,
            tau: 0.75,
            stride: 4,
            buffer: 4,
            block_len: None,
            early_stop: true,
            max_iters: 10_000,
            sampling: Sampling::Sample,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.block_len == Some(0) {
            return Err(Error::InvalidConfig("block_len must be positive".into()));
        }
        if self.strategy.remasks() && self.remask_budget > 0 && self.k * self.stride <= self.remask_budget {
            return Err(Error::InvalidConfig(format!(
                "k*stride must exceed the remask budget ({} * {} <= {})",
                self.k, self.stride, self.remask_budget
            )));
        }
        Ok(())
    }

    /// Upper bound on steps for a block of `len` positions.
    pub fn step_bound(&self, len: usize) -> usize {
        if !self.strategy.remasks() || self.remask_budget == 0 {
            return len.div_ceil(self.k);
        }
        let net = self.k as f64 - self.remask_budget as f64 / self.stride as f64;
        (len as f64 / net).ceil() as usize + self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Demask,
    Remask,
    Rollback,
    EosStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Index of the forward pass this event belongs to.
    pub step: usize,
    pub block: usize,
    pub kind: EventKind,
    pub positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    pub t_before: f64,
    pub t_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub initial: MaskedSeq,
    /// `(start, end)` of each block, in decode order.
    pub blocks: Vec<(usize, usize)>,
    pub events: Vec<TraceEvent>,
    pub forward_passes: usize,
}

/// Rebuild the final sequence from a trace.
pub fn replay(trace: &DecodeTrace) -> MaskedSeq {
    let mut x = trace.initial.clone();
    for e in &trace.events {
        match e.kind {
            EventKind::Demask | EventKind::EosStop => {
                for (&i, &tok) in e.positions.iter().zip(e.tokens.as_deref().unwrap_or(&[])) {
                    x.0[i] = Some(tok);
                }
            }
            EventKind::Remask => {
                for &i in &e.positions {
                    x.0[i] = None;
                }
            }
            EventKind::Rollback => {}
        }
    }
    x
}

pub fn write_trace<W: Write>(mut w: W, trace: &DecodeTrace) -> Result<()> {
    for e in &trace.events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_events<R: BufRead>(r: R) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub output: MaskedSeq,
    pub trace: DecodeTrace,
    /// The pass cap was hit before every block finished.
    pub incomplete: bool,
}

/// Mutable decoding state of the active block.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub x: MaskedSeq,
    pub t: f64,
    pub n: usize,
    pub history: VecDeque<usize>,
    pub block: (usize, usize),
    /// Tokens filled since the last remask trigger, this step included.
    pub filled: usize,
}

impl DecodeState {
    fn block_len(&self) -> usize {
        self.block.1 - self.block.0
    }

    pub fn masked_in_block(&self) -> Vec<usize> {
        (self.block.0..self.block.1).filter(|&i| self.x.is_masked(i)).collect()
    }
}

enum ErrorSource<'a> {
    None,
    Head(&'a dyn CorrectionHead),
    Random,
}

fn sample_token(pred: &Prediction, i: usize, mode: Sampling, u: f64) -> TokenId {
    match mode {
        Sampling::Greedy => pred.posterior.argmax(i).0,
        Sampling::Sample => {
            let row = pred.posterior.row(i);
            let mut acc = 0.0;
            for (v, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return v as TokenId;
                }
            }
            row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
        }
    }
}

struct Engine<'a, D> {
    den: &'a D,
    source: ErrorSource<'a>,
    cfg: DecodeConfig,
    seed: Seed,
    passes: usize,
    events: Vec<TraceEvent>,
    block_idx: usize,
}

impl<D: Denoiser> Engine<'_, D> {
    /// One step of the shared loop body. Returns `false` if no pass was made.
    fn step(&mut self, s: &mut DecodeState) -> bool {
        let masked = s.masked_in_block();
        if masked.is_empty() {
            return false;
        }
        let l = s.block_len() as f64;
        let pass = self.passes;
        let pred = self.den.predict(&s.x);
        self.passes += 1;

        let fill = top_k_indices(&masked, |i| pred.posterior.confidence(i), self.cfg.k);
        let u = self.seed.derive_str("demask").derive(pass as u64);
        let tokens: Vec<TokenId> =
            fill.iter().map(|&i| sample_token(&pred, i, self.cfg.sampling, u.uniform_at(i as u64))).collect();
        let t_before = s.t;
        let t_new = (s.t - self.cfg.k as f64 / l).max(0.0);

        // Candidates are scored on the pre-step state. A trigger remasks fewer
        // tokens than were filled since the previous one, so every window
        // makes progress. Without this a tail with fewer than `k` masks can be
        // refilled and remasked forever; with full windows the cap is
        // `k*stride - 1` and never binds under the guard.
        let mut remask = Vec::new();
        let mut remask_scores = Vec::new();
        s.filled += fill.len();
        let triggered = s.n.is_multiple_of(self.cfg.stride) && self.cfg.remask_budget > 0;
        let cap = self.cfg.remask_budget.min(s.filled - 1);
        if triggered {
            s.filled = 0;
        }
        if triggered && cap > 0 && !matches!(self.source, ErrorSource::None) {
            let valid: Vec<bool> = (0..s.x.len()).map(|i| i >= s.block.0 && i < s.block.1 && !s.x.is_masked(i)).collect();
            let scores = match self.source {
                ErrorSource::Head(h) => h.score(&s.x, &pred, &valid),
                ErrorSource::Random => {
                    let r = self.seed.derive_str("random-remask").derive(pass as u64);
                    CorrectionScores::new((0..s.x.len()).map(|i| r.uniform_at(i as u64)).collect(), valid.clone())
                }
                ErrorSource::None => unreachable!(),
            };
            let cands: Vec<usize> = (0..s.x.len()).filter(|&i| valid[i]).collect();
            let mut top = top_k_indices(&cands, |i| scores.p_error[i], self.cfg.remask_budget);
            // Visit candidates from most to least likely erroneous.
            top.sort_by(|&a, &b| scores.p_error[b].total_cmp(&scores.p_error[a]).then(a.cmp(&b)));
            for i in top {
                if remask.len() < cap && scores.p_error[i] > self.cfg.tau && !s.history.contains(&i) {
                    remask.push(i);
                    remask_scores.push(scores.p_error[i]);
                }
            }
        }

        for (&i, &tok) in fill.iter().zip(&tokens) {
            s.x.0[i] = Some(tok);
        }
        self.events.push(TraceEvent {
            step: pass,
            block: self.block_idx,
            kind: EventKind::Demask,
            positions: fill,
            tokens: Some(tokens),
            scores: None,
            t_before,
            t_after: t_new,
        });
        s.t = t_new;
        if !remask.is_empty() {
            for &i in &remask {
                s.x.0[i] = None;
                if self.cfg.buffer > 0 {
                    if s.history.len() >= self.cfg.buffer {
                        s.history.pop_front();
                    }
                    s.history.push_back(i);
                }
            }
            let t_back = t_new + remask.len() as f64 / l;
            self.events.push(TraceEvent {
                step: pass,
                block: self.block_idx,
                kind: EventKind::Remask,
                positions: remask.clone(),
                tokens: None,
                scores: Some(remask_scores),
                t_before: t_new,
                t_after: t_new,
            });
            self.events.push(TraceEvent {
                step: pass,
                block: self.block_idx,
                kind: EventKind::Rollback,
                positions: remask,
                tokens: None,
                scores: None,
                t_before: t_new,
                t_after: t_back,
            });
            s.t = t_back;
        }
        s.n += 1;
        true
    }
}

/// Blocks covering positions `start..end`.
pub fn block_ranges(start: usize, end: usize, block_len: Option<usize>) -> Vec<(usize, usize)> {
    let b = block_len.unwrap_or(end - start).max(1);
    (start..end).step_by(b).map(|s| (s, (s + b).min(end))).collect()
}

/// Decode the generation region of `prompt` block by block.
///
/// `head` is required for [`Strategy::Dsc`] and ignored otherwise.
pub fn run_semi_ar<D: Denoiser>(
    spec: &TaskSpec,
    prompt: &[TokenId],
    den: &D,
    head: Option<&dyn CorrectionHead>,
    cfg: &DecodeConfig,
    seed: Seed,
) -> Result<Decoded> {
    cfg.validate()?;
    spec.check_prompt(prompt)?;
    let source = match cfg.strategy {
        Strategy::Confidence => ErrorSource::None,
        Strategy::Dsc => ErrorSource::Head(head.ok_or_else(|| Error::MissingPrerequisite("dsc decoding needs a correction head".into()))?),
        Strategy::RandomRemask => ErrorSource::Random,
    };
    let initial = spec.initial_state(prompt);
    let blocks = block_ranges(spec.prompt_len, spec.max_len, cfg.block_len);
    let mut engine = Engine { den, source, cfg: *cfg, seed, passes: 0, events: Vec::new(), block_idx: 0 };
    let mut x = initial.clone();
    let mut incomplete = false;
    let eos = spec.vocab.eos_id;

    for (b, &block) in blocks.iter().enumerate() {
        engine.block_idx = b;
        let mut s = DecodeState { x, t: 1.0, n: 0, history: VecDeque::new(), block, filled: 0 };
        while s.t > 0.0 && !s.masked_in_block().is_empty() {
            if engine.passes >= cfg.max_iters {
                incomplete = true;
                break;
            }
            engine.step(&mut s);
        }
        x = s.x;
        if incomplete {
            break;
        }
        let rest = block.1..spec.max_len;
        if cfg.early_stop && !rest.is_empty() && (block.0..block.1).any(|i| x.get(i) == Some(eos)) {
            let positions: Vec<usize> = rest.collect();
            for &i in &positions {
                x.0[i] = Some(eos);
            }
            engine.events.push(TraceEvent {
                step: engine.passes,
                block: b,
                kind: EventKind::EosStop,
                tokens: Some(vec![eos; positions.len()]),
                positions,
                scores: None,
                t_before: 0.0,
                t_after: 0.0,
            });
            break;
        }
    }
    let trace = DecodeTrace { initial, blocks, events: engine.events, forward_passes: engine.passes };
    Ok(Decoded { output: x, trace, incomplete })
}

/// Decode many prompts in parallel; episode `j` uses `seed.derive(j)`.
pub fn decode_many<D: Denoiser>(
    spec: &TaskSpec,
    prompts: &[Vec<TokenId>],
    den: &D,
    head: Option<&dyn CorrectionHead>,
    cfg: &DecodeConfig,
    seed: Seed,
) -> Result<Vec<Decoded>> {
    prompts.par_iter().enumerate().map(|(j, p)| run_semi_ar(spec, p, den, head, cfg, seed.derive(j as u64))).collect()
}

/// Whether a decoded sequence passes the task verifier.
pub fn is_correct(spec: &TaskSpec, d: &Decoded) -> bool {
    !d.incomplete && spec.verify_full(&d.output)
}
