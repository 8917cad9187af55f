//! Synthetic sequence tasks with exactly enumerable completion sets.
//!
//! Token layout shared by every task: id 0 is end-of-sequence. A full
//! training sequence is `prompt ‖ target ‖ EoS padding` of length `max_len`;
//! the first `eos_maskable` padding tokens take part in corruption, the
//! rest are frozen.

use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{MaskedSeq, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::rng::Seed;

pub const EOS: TokenId = 0;
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    CoinPair,
    ModularChain,
    KvRetrieval,
}

impl TaskName {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::CoinPair => "coin-pair",
            TaskName::ModularChain => "modular-chain",
            TaskName::KvRetrieval => "kv-retrieval",
        }
    }
}

/// User-facing task description (the `task` section of the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: TaskName,
    /// Completion length (coin-pair, modular-chain) or repeat count (kv-retrieval).
    #[serde(default = "default_length")]
    pub length: usize,
    /// Letters in the coin-pair vocabulary; completions only use the first two.
    #[serde(default = "default_alphabet")]
    pub alphabet: u32,
    #[serde(default = "default_modulus")]
    pub modulus: u32,
    #[serde(default = "default_keys")]
    pub keys: u32,
    #[serde(default = "default_values")]
    pub values: u32,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Total sequence length; defaults to prompt + completion (no padding).
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "default_eos_maskable")]
    pub eos_maskable: usize,
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
}

fn default_length() -> usize {
    8
}
fn default_alphabet() -> u32 {
    4
}
fn default_modulus() -> u32 {
    7
}
fn default_keys() -> u32 {
    4
}
fn default_values() -> u32 {
    4
}
fn default_pairs() -> usize {
    2
}
fn default_eos_maskable() -> usize {
    4
}
fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

impl TaskConfig {
    pub fn new(name: TaskName) -> Self {
        Self {
            name,
            length: default_length(),
            alphabet: default_alphabet(),
            modulus: default_modulus(),
            keys: default_keys(),
            values: default_values(),
            pairs: default_pairs(),
            max_len: None,
            eos_maskable: default_eos_maskable(),
            enumeration_cap: default_cap(),
        }
    }

    pub fn with_length(mut self, length: usize) -> Self {
        self.length = length;
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = Some(max_len);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    CoinPair { alphabet: u32 },
    ModularChain { modulus: u32 },
    KvRetrieval { keys: u32, values: u32, pairs: usize },
}

/// A validated task: vocabulary, lengths and the completion model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: TaskName,
    pub vocab: Vocab,
    pub prompt_len: usize,
    pub target_len: usize,
    pub max_len: usize,
    pub eos_maskable: usize,
    pub enumeration_cap: usize,
    kind: Kind,
}

/// One completion of the generation region and its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub full: Vec<TokenId>,
    pub maskable: Vec<bool>,
}

impl Instance {
    pub fn full_seq(&self) -> MaskedSeq {
        MaskedSeq::from_tokens(&self.full)
    }
}

/// Pad `response` with `eos` up to `max_len`. Original tokens and the first
/// `eos_maskable` padding tokens are maskable; later padding is frozen.
pub fn pad_with_eos(
    response: &[TokenId],
    max_len: usize,
    eos: TokenId,
    eos_maskable: usize,
) -> Result<(Vec<TokenId>, Vec<bool>)> {
    if response.len() > max_len {
        return Err(Error::Overflow { len: response.len(), max_len });
    }
    let pad = max_len - response.len();
    let mut tokens = response.to_vec();
    tokens.extend(std::iter::repeat_n(eos, pad));
    let mut maskable = vec![true; response.len()];
    maskable.extend((0..pad).map(|j| j < eos_maskable));
    Ok((tokens, maskable))
}

impl TaskSpec {
    pub fn from_config(cfg: &TaskConfig) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if cfg.length == 0 {
            return bad("task length must be positive".into());
        }
        let (kind, vocab_size, prompt_len) = match cfg.name {
            TaskName::CoinPair => {
                if cfg.alphabet < 2 {
                    return bad("coin-pair needs an alphabet of at least 2".into());
                }
                (Kind::CoinPair { alphabet: cfg.alphabet }, cfg.alphabet + 2, 1)
            }
            TaskName::ModularChain => {
                if cfg.modulus < 2 {
                    return bad("modular-chain modulus must be at least 2".into());
                }
                (Kind::ModularChain { modulus: cfg.modulus }, cfg.modulus + 1, 1)
            }
            TaskName::KvRetrieval => {
                if cfg.pairs == 0 || cfg.pairs as u32 > cfg.keys || cfg.values == 0 {
                    return bad("kv-retrieval needs 1 <= pairs <= keys and values >= 1".into());
                }
                (
                    Kind::KvRetrieval { keys: cfg.keys, values: cfg.values, pairs: cfg.pairs },
                    1 + cfg.keys + cfg.values,
                    2 * cfg.pairs + 1,
                )
            }
        };
        let target_len = cfg.length;
        let max_len = cfg.max_len.unwrap_or(prompt_len + target_len);
        if max_len < prompt_len + target_len {
            return Err(Error::Overflow { len: prompt_len + target_len, max_len });
        }
        let spec = Self {
            name: cfg.name,
            vocab: Vocab::new(vocab_size, EOS)?,
            prompt_len,
            target_len,
            max_len,
            eos_maskable: cfg.eos_maskable,
            enumeration_cap: cfg.enumeration_cap,
            kind,
        };
        let support = spec.support_size();
        if support > spec.enumeration_cap {
            return Err(Error::EnumerationCap { task: spec.name.as_str().into(), cap: spec.enumeration_cap });
        }
        Ok(spec)
    }

    /// Length of the generation region (everything after the prompt).
    pub fn gen_len(&self) -> usize {
        self.max_len - self.prompt_len
    }

    fn support_size(&self) -> usize {
        match self.kind {
            Kind::CoinPair { .. } => 2,
            Kind::ModularChain { modulus } => modulus as usize,
            Kind::KvRetrieval { .. } => 1,
        }
    }

    /// Human readable rendering of a token, for logs and the CLI.
    pub fn token_name(&self, tok: TokenId) -> String {
        if tok == EOS {
            return "<eos>".into();
        }
        match self.kind {
            Kind::CoinPair { alphabet } => {
                if tok == alphabet + 1 {
                    "<go>".into()
                } else {
                    char::from(b'A' + (tok - 1) as u8).to_string()
                }
            }
            Kind::ModularChain { .. } => (tok - 1).to_string(),
            Kind::KvRetrieval { keys, .. } => {
                if tok <= keys {
                    format!("k{}", tok - 1)
                } else {
                    format!("v{}", tok - 1 - keys)
                }
            }
        }
    }

    fn pad_target(&self, target: &[TokenId]) -> Vec<TokenId> {
        let mut out = target.to_vec();
        out.resize(self.gen_len(), EOS);
        out
    }

    /// Every completion of the generation region for `prompt`, with weights.
    pub fn prior_completions(&self, prompt: &[TokenId]) -> Result<Vec<Completion>> {
        self.check_prompt(prompt)?;
        let n = self.target_len;
        let out = match self.kind {
            Kind::CoinPair { .. } => [1, 2]
                .iter()
                .map(|&c| Completion { tokens: self.pad_target(&vec![c; n]), weight: 0.5 })
                .collect(),
            Kind::ModularChain { modulus } => {
                let s = prompt[0] - 1;
                (0..modulus)
                    .map(|c0| Completion {
                        tokens: self.pad_target(&chain(c0, s, modulus, n)),
                        weight: 1.0 / f64::from(modulus),
                    })
                    .collect()
            }
            Kind::KvRetrieval { .. } => {
                let q = prompt[prompt.len() - 1];
                let v = prompt.chunks(2).take(self.prompt_len / 2).find(|kv| kv[0] == q).map(|kv| kv[1]);
                let v = v.expect("checked by check_prompt");
                vec![Completion { tokens: self.pad_target(&vec![v; n]), weight: 1.0 }]
            }
        };
        Ok(out)
    }

    /// Completions consistent with every unmasked position of `partial`
    /// (a generation-region sequence), renormalized. Empty when the
    /// evidence is contradictory.
    pub fn enumerate_completions(&self, prompt: &[TokenId], partial: &MaskedSeq) -> Result<Vec<Completion>> {
        if partial.len() != self.gen_len() {
            return Err(Error::LengthMismatch { expected: self.gen_len(), got: partial.len() });
        }
        let mut kept: Vec<Completion> = self
            .prior_completions(prompt)?
            .into_iter()
            .filter(|c| partial.0.iter().zip(&c.tokens).all(|(p, &t)| p.is_none_or(|p| p == t)))
            .collect();
        let z: f64 = kept.iter().map(|c| c.weight).sum();
        for c in &mut kept {
            c.weight /= z;
        }
        Ok(kept)
    }

    pub fn check_prompt(&self, prompt: &[TokenId]) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidPrompt { task: self.name.as_str().into(), reason: reason.into() })
        };
        if prompt.len() != self.prompt_len {
            return fail("wrong prompt length");
        }
        match self.kind {
            Kind::CoinPair { alphabet } => {
                if prompt[0] != alphabet + 1 {
                    return fail("expected the <go> token");
                }
            }
            Kind::ModularChain { modulus } => {
                if prompt[0] == EOS || prompt[0] > modulus {
                    return fail("checksum must be a digit");
                }
            }
            Kind::KvRetrieval { keys, values, pairs } => {
                let is_key = |t: TokenId| (1..=keys).contains(&t);
                let is_val = |t: TokenId| (keys + 1..=keys + values).contains(&t);
                let mut seen = Vec::with_capacity(pairs);
                for kv in prompt[..2 * pairs].chunks(2) {
                    if !is_key(kv[0]) || !is_val(kv[1]) || seen.contains(&kv[0]) {
                        return fail("malformed key/value list");
                    }
                    seen.push(kv[0]);
                }
                if !seen.contains(&prompt[2 * pairs]) {
                    return fail("query key not in the list");
                }
            }
        }
        Ok(())
    }

    /// Task verifier. `output` is either the target region or the whole
    /// generation region; in the latter case everything past the target
    /// must be end-of-sequence.
    pub fn verify(&self, prompt: &[TokenId], output: &[TokenId]) -> bool {
        if self.check_prompt(prompt).is_err() || output.len() < self.target_len {
            return false;
        }
        let (target, rest) = output.split_at(self.target_len);
        if rest.iter().any(|&t| t != EOS) {
            return false;
        }
        match self.kind {
            Kind::CoinPair { .. } => (target[0] == 1 || target[0] == 2) && target.iter().all(|&t| t == target[0]),
            Kind::ModularChain { modulus } => {
                if target.iter().any(|&t| t == EOS || t > modulus) {
                    return false;
                }
                let d: Vec<u32> = target.iter().map(|&t| t - 1).collect();
                let s = prompt[0] - 1;
                if d.len() >= 2 && (d[1] + modulus - d[0]) % modulus != s {
                    return false;
                }
                d.windows(3).all(|w| w[2] == (w[0] + w[1]) % modulus)
            }
            Kind::KvRetrieval { .. } => {
                let want = self.prior_completions(prompt).expect("prompt checked")[0].tokens[0];
                target.iter().all(|&t| t == want)
            }
        }
    }

    /// Verify a full-length sequence (prompt ‖ generation region).
    pub fn verify_full(&self, seq: &MaskedSeq) -> bool {
        match seq.unmasked_tokens() {
            Some(toks) if toks.len() == self.max_len => self.verify(&toks[..self.prompt_len], &toks[self.prompt_len..]),
            _ => false,
        }
    }

    pub fn sample_prompt<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        match self.kind {
            Kind::CoinPair { alphabet } => vec![alphabet + 1],
            Kind::ModularChain { modulus } => vec![1 + rng.gen_range(0..modulus)],
            Kind::KvRetrieval { keys, values, pairs } => {
                let ks = sample_indices(rng, keys as usize, pairs);
                let mut p = Vec::with_capacity(2 * pairs + 1);
                for k in ks.iter() {
                    p.push(1 + k as u32);
                    p.push(1 + keys + rng.gen_range(0..values));
                }
                let q = rng.gen_range(0..pairs);
                p.push(p[2 * q]);
                p
            }
        }
    }

    pub fn sample_instance<R: Rng>(&self, rng: &mut R) -> Instance {
        let prompt = self.sample_prompt(rng);
        let target = match self.kind {
            Kind::CoinPair { .. } => vec![rng.gen_range(1..=2); self.target_len],
            Kind::ModularChain { modulus } => chain(rng.gen_range(0..modulus), prompt[0] - 1, modulus, self.target_len),
            Kind::KvRetrieval { .. } => {
                self.prior_completions(&prompt).expect("sampled prompt is valid")[0].tokens[..self.target_len].to_vec()
            }
        };
        self.instance_from(prompt, target).expect("sampled instance fits")
    }

    pub fn instance_from(&self, prompt: Vec<TokenId>, target: Vec<TokenId>) -> Result<Instance> {
        let (response, resp_mask) = pad_with_eos(&target, self.gen_len(), EOS, self.eos_maskable)?;
        let mut full = prompt.clone();
        full.extend_from_slice(&response);
        let mut maskable = vec![false; prompt.len()];
        maskable.extend(resp_mask);
        Ok(Instance { prompt, target, full, maskable })
    }

    /// Maskable flags for a fresh decode: every generation position.
    pub fn generation_mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|i| i >= self.prompt_len).collect()
    }

    /// Full sequence with the prompt filled in and the generation region masked.
    pub fn initial_state(&self, prompt: &[TokenId]) -> MaskedSeq {
        let mut x = MaskedSeq::all_masked(self.max_len);
        for (i, &p) in prompt.iter().enumerate() {
            x.0[i] = Some(p);
        }
        x
    }
}

/// `c1 = c0 + s`, then `c_j = c_{j-1} + c_{j-2}`, all mod `m`; returned as token ids.
fn chain(c0: u32, s: u32, m: u32, n: usize) -> Vec<TokenId> {
    let mut d = Vec::with_capacity(n);
    d.push(c0 % m);
    if n > 1 {
        d.push((c0 + s) % m);
    }
    while d.len() < n {
        let k = d.len();
        d.push((d[k - 1] + d[k - 2]) % m);
    }
    d.into_iter().map(|v| v + 1).collect()
}

/// `n` i.i.d. instances.
pub fn generate_dataset(spec: &TaskSpec, n: usize, seed: Seed) -> Vec<Instance> {
    let mut rng = seed.derive_str("dataset").rng();
    (0..n).map(|_| spec.sample_instance(&mut rng)).collect()
}

pub fn write_dataset<W: Write>(mut w: W, data: &[Instance]) -> Result<()> {
    for inst in data {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
