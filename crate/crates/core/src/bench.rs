//! Sweeps over strategies and tokens-per-step, result rows, Pareto
//! analysis and the directional checks used by the ablation suite.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifacts::{compute_labels, Label};
use crate::config::BenchSettings;
use crate::decode::{decode_many, is_correct, DecodeConfig, DecodeTrace, EventKind, Strategy};
use crate::denoiser::Denoiser;
use crate::diffusion::{MaskedSeq, TokenId};
use crate::error::{Error, Result};
use crate::head::{auc, scorable, CorrectionHead};
use crate::rng::Seed;
use crate::tasks::{generate_dataset, TaskSpec};

/// One decoding variant in a sweep.
pub struct Arm<'a> {
    pub label: String,
    pub strategy: Strategy,
    pub head: Option<&'a dyn CorrectionHead>,
}

impl<'a> Arm<'a> {
    pub fn plain(strategy: Strategy) -> Self {
        Self { label: strategy.as_str().into(), strategy, head: None }
    }

    pub fn with_head(label: impl Into<String>, head: &'a dyn CorrectionHead) -> Self {
        Self { label: label.into(), strategy: Strategy::Dsc, head: Some(head) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub strategy: String,
    pub tokens_per_step: usize,
    pub accuracy: f64,
    pub iter_avg: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Decode settings for one sweep cell. With `clip` the remask budget is
/// lowered to `k * stride - 1` when needed to keep the termination guard.
pub fn effective_config(base: &DecodeConfig, strategy: Strategy, k: usize, clip: bool) -> DecodeConfig {
    let mut c = DecodeConfig { strategy, k, ..*base };
    if clip && strategy.remasks() {
        c.remask_budget = c.remask_budget.min(k * c.stride - 1);
    }
    c
}

/// Evaluation prompts of one seed.
pub fn eval_prompts(spec: &TaskSpec, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    generate_dataset(spec, n, Seed(seed).derive_str("eval")).into_iter().map(|i| i.prompt).collect()
}

/// Root of the decoding randomness of one seed. Shared by every arm, so
/// arms are compared on identical noise.
pub fn decode_seed(seed: u64) -> Seed {
    Seed(seed).derive_str("decode")
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    /// `(file stem, trace)` for the first `trace_limit` episodes of every cell.
    pub traces: Vec<(String, DecodeTrace)>,
}

fn preflight<D: Denoiser>(spec: &TaskSpec, den: &D, arms: &[Arm<'_>], base: &DecodeConfig, bench: &BenchSettings) -> Result<()> {
    if den.vocab() != spec.vocab {
        return Err(Error::VocabMismatch(format!("denoiser has {:?}, task has {:?}", den.vocab(), spec.vocab)));
    }
    for arm in arms {
        if arm.strategy == Strategy::Dsc && arm.head.is_none() {
            return Err(Error::MissingPrerequisite(format!("arm {} needs a correction head", arm.label)));
        }
        for &k in &bench.ks {
            effective_config(base, arm.strategy, k, bench.clip_budget).validate()?;
        }
    }
    if bench.n_eval == 0 {
        return Err(Error::InvalidConfig("n_eval must be at least 1".into()));
    }
    Ok(())
}

/// Every `(arm, k)` cell for one evaluation seed.
pub fn run_seed<D: Denoiser>(
    spec: &TaskSpec,
    den: &D,
    arms: &[Arm<'_>],
    base: &DecodeConfig,
    bench: &BenchSettings,
    seed: u64,
) -> Result<RunOutput> {
    preflight(spec, den, arms, base, bench)?;
    let prompts = eval_prompts(spec, bench.n_eval, seed);
    let mut out = RunOutput::default();
    for arm in arms {
        for &k in &bench.ks {
            let cfg = effective_config(base, arm.strategy, k, bench.clip_budget);
            let start = Instant::now();
            let decoded = decode_many(spec, &prompts, den, arm.head, &cfg, decode_seed(seed))?;
            let wall_ms = if bench.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
            let n = decoded.len();
            let correct = decoded.iter().filter(|d| is_correct(spec, d)).count();
            let passes: usize = decoded.iter().map(|d| d.trace.forward_passes).sum();
            out.rows.push(ResultRow {
                task: spec.name.as_str().into(),
                strategy: arm.label.clone(),
                tokens_per_step: k,
                accuracy: correct as f64 / n as f64,
                iter_avg: passes as f64 / n as f64,
                n,
                seed,
                wall_ms,
            });
            for (j, d) in decoded.into_iter().take(bench.trace_limit).enumerate() {
                let stem = format!("{}_{}_k{}_s{}_{:04}", spec.name.as_str(), arm.label, k, seed, j);
                out.traces.push((stem, d.trace));
            }
        }
    }
    Ok(out)
}

/// [`run_seed`] over every seed in `bench.seeds`.
pub fn run_experiment<D: Denoiser>(
    spec: &TaskSpec,
    den: &D,
    arms: &[Arm<'_>],
    base: &DecodeConfig,
    bench: &BenchSettings,
) -> Result<RunOutput> {
    preflight(spec, den, arms, base, bench)?;
    let mut out = RunOutput::default();
    for &seed in &bench.seeds {
        let r = run_seed(spec, den, arms, base, bench, seed)?;
        out.rows.extend(r.rows);
        out.traces.extend(r.traces);
    }
    Ok(out)
}

pub fn write_rows<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    if rows.is_empty() {
        wr.write_record(["task", "strategy", "tokens_per_step", "accuracy", "iter_avg", "n", "seed", "wall_ms"])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Seed-aggregated operating point of one strategy at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub strategy: String,
    pub k: usize,
    pub accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub accuracy_std: f64,
    pub iter_avg: f64,
    pub seeds: usize,
}

impl Point {
    /// At least as accurate and at most as many iterations.
    pub fn weakly_dominates(&self, other: &Point) -> bool {
        self.accuracy >= other.accuracy && self.iter_avg <= other.iter_avg
    }

    pub fn strictly_dominates(&self, other: &Point) -> bool {
        self.weakly_dominates(other) && (self.accuracy > other.accuracy || self.iter_avg < other.iter_avg)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean over seeds for every `(strategy, k)`, sorted by strategy then `k`.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Point> {
    let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.strategy.clone(), r.tokens_per_step)).or_default();
        g.0.push(r.accuracy);
        g.1.push(r.iter_avg);
    }
    groups
        .into_iter()
        .map(|((strategy, k), (acc, it))| {
            let (accuracy, accuracy_std) = mean_std(&acc);
            let (iter_avg, _) = mean_std(&it);
            Point { strategy, k, accuracy, accuracy_std, iter_avg, seeds: acc.len() }
        })
        .collect()
}

/// Points not strictly dominated by any other point of the same set.
pub fn frontier(points: &[Point]) -> Vec<Point> {
    points.iter().filter(|p| !points.iter().any(|q| q.strictly_dominates(p))).cloned().collect()
}

pub fn find<'a>(points: &'a [Point], strategy: &str, k: usize) -> Option<&'a Point> {
    points.iter().find(|p| p.strategy == strategy && p.k == k)
}

fn of<'a>(points: &'a [Point], strategy: &str) -> Vec<&'a Point> {
    points.iter().filter(|p| p.strategy == strategy).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dominance {
    FirstDominates,
    SecondDominates,
    Equal,
    TradeOff,
}

fn compare(a: &Point, b: &Point) -> Dominance {
    match (a.strictly_dominates(b), b.strictly_dominates(a)) {
        (true, _) => Dominance::FirstDominates,
        (_, true) => Dominance::SecondDominates,
        _ if a.accuracy == b.accuracy && a.iter_avg == b.iter_avg => Dominance::Equal,
        _ => Dominance::TradeOff,
    }
}

/// Head-to-head at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KVerdict {
    pub first: String,
    pub second: String,
    pub k: usize,
    pub verdict: Dominance,
    /// `first − second`, absolute accuracy.
    pub accuracy_delta: f64,
    /// Relative iteration change of `first` versus `second`, in percent.
    pub iter_delta_pct: f64,
}

/// "`first` at `k_first` beats `second` at `k_second` with X% fewer iterations".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossOver {
    pub first: String,
    pub k_first: usize,
    pub second: String,
    pub k_second: usize,
    pub accuracy_first: f64,
    pub accuracy_second: f64,
    pub iter_reduction_pct: f64,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub points: Vec<Point>,
    pub frontiers: BTreeMap<String, Vec<Point>>,
    pub verdicts: Vec<KVerdict>,
    /// Whole-frontier statements such as "dsc Pareto-dominates confidence".
    pub dominance: Vec<String>,
    pub cross_overs: Vec<CrossOver>,
}

fn reduction_pct(fast: f64, slow: f64) -> f64 {
    if slow > 0.0 {
        100.0 * (slow - fast) / slow
    } else {
        0.0
    }
}

/// Every point of `b` is weakly dominated by some point of `a`.
fn covers(a: &[&Point], b: &[&Point]) -> bool {
    !b.is_empty() && b.iter().all(|q| a.iter().any(|p| p.weakly_dominates(q)))
}

pub fn pareto_report(rows: &[ResultRow]) -> ParetoReport {
    let points = aggregate(rows);
    let names: Vec<String> = {
        let mut v: Vec<String> = points.iter().map(|p| p.strategy.clone()).collect();
        v.dedup();
        v
    };
    let frontiers: BTreeMap<String, Vec<Point>> = names
        .iter()
        .map(|s| (s.clone(), frontier(&of(&points, s).into_iter().cloned().collect::<Vec<_>>())))
        .collect();

    let mut verdicts = Vec::new();
    let mut dominance = Vec::new();
    let mut cross_overs = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            for pa in of(&points, a) {
                if let Some(pb) = find(&points, b, pa.k) {
                    verdicts.push(KVerdict {
                        first: a.clone(),
                        second: b.clone(),
                        k: pa.k,
                        verdict: compare(pa, pb),
                        accuracy_delta: pa.accuracy - pb.accuracy,
                        iter_delta_pct: -reduction_pct(pa.iter_avg, pb.iter_avg),
                    });
                }
            }
            let (fa, fb) = (of(&points, a), of(&points, b));
            match (covers(&fa, &fb), covers(&fb, &fa)) {
                (true, false) => dominance.push(format!("{a} Pareto-dominates {b}")),
                (false, true) => dominance.push(format!("{b} Pareto-dominates {a}")),
                (true, true) => dominance.push(format!("{a} and {b} have identical frontiers")),
                (false, false) => dominance.push(format!("{a} and {b} trade off")),
            }
        }
    }
    for a in &names {
        for b in names.iter().filter(|b| *b != a) {
            let best = of(&points, a)
                .into_iter()
                .flat_map(|pa| of(&points, b).into_iter().map(move |pb| (pa, pb)))
                .filter(|(pa, pb)| pa.accuracy >= pb.accuracy && pa.iter_avg < pb.iter_avg)
                .max_by(|x, y| reduction_pct(x.0.iter_avg, x.1.iter_avg).total_cmp(&reduction_pct(y.0.iter_avg, y.1.iter_avg)));
            if let Some((pa, pb)) = best {
                let pct = reduction_pct(pa.iter_avg, pb.iter_avg);
                cross_overs.push(CrossOver {
                    first: a.clone(),
                    k_first: pa.k,
                    second: b.clone(),
                    k_second: pb.k,
                    accuracy_first: pa.accuracy,
                    accuracy_second: pb.accuracy,
                    iter_reduction_pct: pct,
                    statement: format!("{a} at k={} beats {b} at k={} with {pct:.1}% fewer iterations", pa.k, pb.k),
                });
            }
        }
    }
    ParetoReport { points, frontiers, verdicts, dominance, cross_overs }
}

/// `fast` at `k` compared with `base` at `k − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerKComparison {
    pub k: usize,
    pub accuracy_fast: f64,
    pub accuracy_base: f64,
    pub iter_fast: f64,
    pub iter_base: f64,
    pub iter_reduction_pct: f64,
}

pub fn against_lower_k(points: &[Point], fast: &str, base: &str) -> Vec<LowerKComparison> {
    of(points, fast)
        .into_iter()
        .filter(|p| p.k >= 2)
        .filter_map(|p| {
            let b = find(points, base, p.k - 1)?;
            Some(LowerKComparison {
                k: p.k,
                accuracy_fast: p.accuracy,
                accuracy_base: b.accuracy,
                iter_fast: p.iter_avg,
                iter_base: b.iter_avg,
                iter_reduction_pct: reduction_pct(p.iter_avg, b.iter_avg),
            })
        })
        .collect()
}

/// For every shared `k`: is the point of `b` weakly dominated by some
/// point on `a`'s frontier?
pub fn covered_at_shared_k(points: &[Point], a: &str, b: &str) -> Vec<(usize, bool)> {
    let fa = frontier(&of(points, a).into_iter().cloned().collect::<Vec<_>>());
    of(points, b)
        .into_iter()
        .filter(|pb| find(points, a, pb.k).is_some())
        .map(|pb| (pb.k, fa.iter().any(|pa| pa.weakly_dominates(pb))))
        .collect()
}

/// A `slow` operating point and the cheapest way for `fast` to match its
/// accuracy within the tolerance on either side.
///
/// `fast` may split instances between two of its points: decoding a share
/// `weight` of them at `k_fast.1` and the rest at `k_fast.0` yields the
/// weighted mean of both accuracies and iteration counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub k_slow: usize,
    pub accuracy_slow: f64,
    pub iter_slow: f64,
    /// Equal entries when a single point suffices.
    pub k_fast: (usize, usize),
    pub weight: f64,
    pub accuracy_fast: f64,
    pub iter_fast: f64,
    /// `iter_slow / iter_fast − 1`.
    pub overhead: f64,
}

/// Pair each `slow` point with `k ≥ min_k` to the cheapest `fast` point, or
/// mixture of two, whose accuracy is within `tol` of `accuracy_slow`. A
/// single point that is more accurate still counts if it is no more
/// expensive. Slow points no such option can match are left out.
pub fn matched_accuracy(points: &[Point], slow: &str, fast: &str, tol: f64, min_k: usize) -> Vec<MatchedPair> {
    let fast_pts = of(points, fast);
    of(points, slow)
        .into_iter()
        .filter(|p| p.k >= min_k)
        .filter_map(|ps| {
            let target = ps.accuracy - tol;
            // (k_lo, k_hi, weight on hi, accuracy, iterations)
            let mut best: Option<(usize, usize, f64, f64, f64)> = None;
            let mut offer = |c: (usize, usize, f64, f64, f64)| {
                if best.is_none_or(|b| c.4 < b.4 || (c.4 == b.4 && c.3 > b.3)) {
                    best = Some(c);
                }
            };
            for hi in fast_pts.iter().filter(|q| q.accuracy >= target) {
                if hi.accuracy <= ps.accuracy + tol || hi.iter_avg <= ps.iter_avg {
                    offer((hi.k, hi.k, 1.0, hi.accuracy, hi.iter_avg));
                }
                for lo in fast_pts.iter().filter(|q| q.accuracy < target) {
                    let w = (target - lo.accuracy) / (hi.accuracy - lo.accuracy);
                    offer((lo.k, hi.k, w, target, lo.iter_avg + w * (hi.iter_avg - lo.iter_avg)));
                }
            }
            let (k_lo, k_hi, weight, accuracy_fast, iter_fast) = best?;
            Some(MatchedPair {
                k_slow: ps.k,
                accuracy_slow: ps.accuracy,
                iter_slow: ps.iter_avg,
                k_fast: (k_lo, k_hi),
                weight,
                accuracy_fast,
                iter_fast,
                overhead: ps.iter_avg / iter_fast - 1.0,
            })
        })
        .collect()
}

/// A decoding state with labels against the completion it is closest to.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    pub z: MaskedSeq,
    pub labels: Vec<Label>,
}

/// Label committed tokens of `z` against the completion with the fewest
/// disagreements. `None` when that completion is not unique.
pub fn label_against_nearest(spec: &TaskSpec, z: &MaskedSeq) -> Result<Option<Vec<Label>>> {
    let prompt: Vec<TokenId> = z.0[..spec.prompt_len].iter().map(|t| t.expect("prompt positions are never masked")).collect();
    let comps = spec.prior_completions(&prompt)?;
    let gen = &z.0[spec.prompt_len..];
    let dist: Vec<usize> =
        comps.iter().map(|c| gen.iter().zip(&c.tokens).filter(|(g, &t)| g.is_some_and(|g| g != t)).count()).collect();
    let best = *dist.iter().min().expect("at least one completion");
    let mut at_best = comps.iter().zip(&dist).filter(|(_, &d)| d == best);
    let nearest = at_best.next().expect("minimum exists").0;
    if at_best.next().is_some() {
        return Ok(None);
    }
    let mut x0 = prompt;
    x0.extend_from_slice(&nearest.tokens);
    Ok(Some(compute_labels(z, &x0, &spec.generation_mask())))
}

/// Intermediate states of confidence-decoding rollouts (after every
/// demask step, including the final output), labeled against the nearest
/// completion. States with an ambiguous nearest completion are skipped.
pub fn harvest_rollouts<D: Denoiser>(
    spec: &TaskSpec,
    den: &D,
    prompts: &[Vec<TokenId>],
    cfg: &DecodeConfig,
    seed: Seed,
) -> Result<Vec<RolloutState>> {
    let cfg = DecodeConfig { strategy: Strategy::Confidence, ..*cfg };
    let decoded = decode_many(spec, prompts, den, None, &cfg, seed)?;
    let mut out = Vec::new();
    for d in decoded {
        let mut x = d.trace.initial.clone();
        for e in &d.trace.events {
            if e.kind != EventKind::Demask {
                continue;
            }
            for (&i, &tok) in e.positions.iter().zip(e.tokens.as_deref().unwrap_or(&[])) {
                x.0[i] = Some(tok);
            }
            if let Some(labels) = label_against_nearest(spec, &x)? {
                if labels.iter().any(|l| *l != Label::NotApplicable) {
                    out.push(RolloutState { z: x.clone(), labels });
                }
            }
        }
    }
    Ok(out)
}

/// AUC of `head` at separating incorrect from correct committed tokens.
pub fn rollout_auc<D: Denoiser>(den: &D, head: &dyn CorrectionHead, states: &[RolloutState], spec: &TaskSpec) -> Option<f64> {
    let mask = spec.generation_mask();
    let (mut scores, mut pos) = (Vec::new(), Vec::new());
    for s in states {
        let pred = den.predict(&s.z);
        let sc = head.score(&s.z, &pred, &scorable(&s.z, &mask));
        for (i, l) in s.labels.iter().enumerate() {
            if *l != Label::NotApplicable {
                scores.push(sc.p_error[i]);
                pos.push(*l == Label::Incorrect);
            }
        }
    }
    auc(&scores, &pos)
}

/// Outcome of the fidelity ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    /// Parameters and no-remask rows unchanged by head training.
    pub frozen_bit_identical: bool,
    pub baseline_accuracy: f64,
    /// `(gamma, accuracy, accuracy − baseline)`.
    pub joint: Vec<(f64, f64, f64)>,
    pub pass: bool,
}

fn mean_accuracy(rows: &[ResultRow]) -> f64 {
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len().max(1) as f64
}

/// Paired comparison of no-remask accuracy: the frozen model before and
/// after head training, and every jointly trained model.
pub fn fidelity_verdict(before: &[ResultRow], after: &[ResultRow], joint: &[(f64, Vec<ResultRow>)]) -> FidelityResult {
    let baseline = mean_accuracy(before);
    let identical = before == after;
    let joint: Vec<(f64, f64, f64)> = joint
        .iter()
        .map(|(g, rows)| {
            let a = mean_accuracy(rows);
            (*g, a, a - baseline)
        })
        .collect();
    let pass = identical && joint.iter().all(|j| j.2 <= 0.0);
    FidelityResult { frozen_bit_identical: identical, baseline_accuracy: baseline, joint, pass }
}

/// Outcome of the artifact ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactResult {
    pub auc_lbc: Vec<Option<f64>>,
    pub auc_uniform: Vec<Option<f64>>,
    pub seeds_won: usize,
    pub covered: Vec<(usize, bool)>,
    pub pass: bool,
}

pub fn artifact_verdict(auc_lbc: Vec<Option<f64>>, auc_uniform: Vec<Option<f64>>, points: &[Point], lbc: &str, uniform: &str, need: usize) -> ArtifactResult {
    let seeds_won = auc_lbc.iter().zip(&auc_uniform).filter(|(a, b)| matches!((a, b), (Some(a), Some(b)) if a > b)).count();
    let covered = covered_at_shared_k(points, lbc, uniform);
    let pass = seeds_won >= need && !covered.is_empty() && covered.iter().all(|c| c.1);
    ArtifactResult { auc_lbc, auc_uniform, seeds_won, covered, pass }
}

/// Outcome of the random-remask ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomResult {
    pub pairs: Vec<MatchedPair>,
    pub pass: bool,
}

/// Random remasking must pay at least `min_overhead` extra iterations at
/// every accuracy dsc can match. Points at `k = 1` are skipped: with a
/// clipped budget neither strategy remasks there.
pub fn random_verdict(points: &[Point], random: &str, dsc: &str, tol: f64, min_overhead: f64) -> RandomResult {
    let pairs = matched_accuracy(points, random, dsc, tol, 2);
    let pass = !pairs.is_empty() && pairs.iter().all(|p| p.overhead >= min_overhead);
    RandomResult { pairs, pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub fidelity: Option<FidelityResult>,
    pub artifacts: Option<ArtifactResult>,
    pub random: Option<RandomResult>,
}
