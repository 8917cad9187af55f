//! Exact posteriors by enumeration of a task's completion set.

use crate::denoiser::{Denoiser, FeatureGrid, PosteriorGrid, Prediction};
use crate::diffusion::{MaskedSeq, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::tasks::{Completion, TaskSpec};

fn split_prompt(spec: &TaskSpec, x: &MaskedSeq) -> Result<Vec<TokenId>> {
    if x.len() != spec.max_len {
        return Err(Error::LengthMismatch { expected: spec.max_len, got: x.len() });
    }
    x.0[..spec.prompt_len]
        .iter()
        .map(|t| t.ok_or_else(|| Error::InvalidPrompt { task: spec.name.as_str().into(), reason: "masked prompt".into() }))
        .collect()
}

/// Exact marginals `P(x_0^i = v | unmasked evidence in x_t)`.
///
/// Unmasked positions (prompt included) get a point mass on their token.
/// Fails when no completion agrees with the evidence.
pub fn oracle_predict(spec: &TaskSpec, x_t: &MaskedSeq) -> Result<PosteriorGrid> {
    let prompt = split_prompt(spec, x_t)?;
    let completions = spec.prior_completions(&prompt)?;
    let gen = &x_t.0[spec.prompt_len..];

    // Condition one revealed position at a time.
    let mut weights: Vec<f64> = completions.iter().map(|c| c.weight).collect();
    for (j, tok) in gen.iter().enumerate() {
        if let Some(tok) = tok {
            for (w, c) in weights.iter_mut().zip(&completions) {
                if c.tokens[j] != *tok {
                    *w = 0.0;
                }
            }
        }
    }
    let z: f64 = weights.iter().sum();
    if z == 0.0 {
        return Err(Error::ContradictoryEvidence);
    }

    let mut grid = PosteriorGrid::zeros(spec.max_len, spec.vocab.len());
    for (i, &p) in prompt.iter().enumerate() {
        grid.set_point_mass(i, p);
    }
    for (j, tok) in gen.iter().enumerate() {
        let i = spec.prompt_len + j;
        match tok {
            Some(t) => grid.set_point_mass(i, *t),
            None => {
                let row = grid.row_mut(i);
                for (w, c) in weights.iter().zip(&completions) {
                    if *w > 0.0 {
                        row[c.tokens[j] as usize] += w / z;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Posterior over completions that disagree with the evidence in the
/// fewest positions. Equals the exact posterior whenever the evidence is
/// consistent (`min_mismatch == 0`); otherwise it is the natural fallback
/// for decoding states that already contain errors.
#[derive(Debug, Clone)]
pub struct MismatchPosterior {
    pub grid: PosteriorGrid,
    pub min_mismatch: usize,
}

fn mismatch_counts(completions: &[Completion], gen: &[Option<TokenId>]) -> Vec<usize> {
    completions
        .iter()
        .map(|c| gen.iter().zip(&c.tokens).filter(|(g, &t)| g.is_some_and(|g| g != t)).count())
        .collect()
}

impl MismatchPosterior {
    pub fn compute(spec: &TaskSpec, x: &MaskedSeq) -> Result<Self> {
        let prompt = split_prompt(spec, x)?;
        let completions = spec.prior_completions(&prompt)?;
        let gen = &x.0[spec.prompt_len..];
        let counts = mismatch_counts(&completions, gen);
        let min_mismatch = counts.iter().copied().min().unwrap_or(0);
        let z: f64 = completions.iter().zip(&counts).filter(|(_, &m)| m == min_mismatch).map(|(c, _)| c.weight).sum();

        let mut grid = PosteriorGrid::zeros(spec.max_len, spec.vocab.len());
        for (i, &p) in prompt.iter().enumerate() {
            grid.set_point_mass(i, p);
        }
        for (j, tok) in gen.iter().enumerate() {
            let i = spec.prompt_len + j;
            match tok {
                Some(t) => grid.set_point_mass(i, *t),
                None => {
                    let row = grid.row_mut(i);
                    for (c, &m) in completions.iter().zip(&counts) {
                        if m == min_mismatch {
                            row[c.tokens[j] as usize] += c.weight / z;
                        }
                    }
                }
            }
        }
        Ok(Self { grid, min_mismatch })
    }
}

/// Row `i` of the result is the posterior of position `i` given every
/// *other* unmasked position, plus the smallest number of disagreements
/// with that evidence (0 when the evidence is consistent).
pub fn leave_one_out_posterior(spec: &TaskSpec, x: &MaskedSeq) -> Result<Vec<(Vec<f64>, usize)>> {
    let prompt = split_prompt(spec, x)?;
    let completions = spec.prior_completions(&prompt)?;
    let gen = &x.0[spec.prompt_len..];
    let counts = mismatch_counts(&completions, gen);
    let v = spec.vocab.len();

    let mut out = Vec::with_capacity(spec.max_len);
    for &p in &prompt {
        let mut row = vec![0.0; v];
        row[p as usize] = 1.0;
        out.push((row, 0));
    }
    let mut loo = vec![0usize; completions.len()];
    for (j, tok) in gen.iter().enumerate() {
        for ((l, &m), c) in loo.iter_mut().zip(&counts).zip(&completions) {
            *l = m - usize::from(tok.is_some_and(|t| t != c.tokens[j]));
        }
        let min = loo.iter().copied().min().unwrap_or(0);
        let mut row = vec![0.0; v];
        let mut z = 0.0;
        for (c, &l) in completions.iter().zip(&loo) {
            if l == min {
                row[c.tokens[j] as usize] += c.weight;
                z += c.weight;
            }
        }
        row.iter_mut().for_each(|r| *r /= z);
        out.push((row, min));
    }
    Ok(out)
}

/// Enumeration-backed denoiser. Its features are
/// `one_hot(token ∪ MASK) ‖ leave-one-out posterior row`, so a correction
/// head trained on them sees each token next to what its context implies.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    spec: TaskSpec,
}

impl OracleDenoiser {
    pub fn new(spec: TaskSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab(&self) -> Vocab {
        self.spec.vocab
    }

    fn feature_dim(&self) -> usize {
        2 * self.spec.vocab.len() + 1
    }

    fn predict(&self, x: &MaskedSeq) -> Prediction {
        let posterior = MismatchPosterior::compute(&self.spec, x).expect("oracle input must match the task layout").grid;
        let loo = leave_one_out_posterior(&self.spec, x).expect("oracle input must match the task layout");
        let v = self.spec.vocab.len();
        let dim = self.feature_dim();
        let mut data = vec![0.0; x.len() * dim];
        for (i, (row, _)) in loo.iter().enumerate() {
            let f = &mut data[i * dim..(i + 1) * dim];
            f[self.spec.vocab.input_id(x.get(i))] = 1.0;
            f[v + 1..].copy_from_slice(row);
        }
        Prediction { posterior, features: FeatureGrid { len: x.len(), dim, data } }
    }

    fn is_frozen(&self) -> bool {
        true
    }
}
