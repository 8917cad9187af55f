//! Versioned JSON container for denoiser and head parameters.
//!
//! One container type holds either section; the `section` tag says which.
//! Floats are written with round-trip precision, so load(save(m)) == m.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, TinyDenoiser};
use crate::diffusion::Vocab;
use crate::error::{Error, Result};
use crate::head::LearnedHead;

pub const FORMAT: &str = "dlm-remask-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub arch: Arch,
    pub vocab: Vocab,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    /// Vocabulary of the denoiser whose features the head reads.
    pub vocab: Vocab,
    pub head: LearnedHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
pub enum Section {
    Denoiser(DenoiserSection),
    Head(HeadSection),
}

impl Section {
    fn tag(&self) -> &'static str {
        match self {
            Section::Denoiser(_) => "denoiser",
            Section::Head(_) => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub body: Section,
}

impl Checkpoint {
    pub fn denoiser(m: &TinyDenoiser) -> Self {
        Self::wrap(Section::Denoiser(DenoiserSection { arch: m.arch(), vocab: crate::denoiser::Denoiser::vocab(m), params: m.params().to_vec() }))
    }

    pub fn head(head: &LearnedHead, vocab: Vocab) -> Self {
        Self::wrap(Section::Head(HeadSection { vocab, head: head.clone() }))
    }

    fn wrap(body: Section) -> Self {
        Self { format: FORMAT.into(), version: VERSION, body }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::InvalidConfig(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })?;
        Self::from_json(&text).map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })
    }

    /// Rebuild the denoiser; the result is frozen.
    pub fn into_denoiser(self) -> Result<TinyDenoiser> {
        match self.body {
            Section::Denoiser(d) => Ok(TinyDenoiser::from_params(d.arch, d.vocab, d.params)?.frozen()),
            other => Err(Error::InvalidConfig(format!("expected a denoiser section, found {}", other.tag()))),
        }
    }

    pub fn into_head(self) -> Result<(LearnedHead, Vocab)> {
        match self.body {
            Section::Head(h) => {
                let want = LearnedHead::param_count(h.head.in_dim, h.head.hidden);
                if h.head.params.len() != want {
                    return Err(Error::LengthMismatch { expected: want, got: h.head.params.len() });
                }
                Ok((h.head, h.vocab))
            }
            other => Err(Error::InvalidConfig(format!("expected a head section, found {}", other.tag()))),
        }
    }
}

/// Load a denoiser checkpoint from disk.
pub fn load_denoiser(path: &Path) -> Result<TinyDenoiser> {
    Checkpoint::load(path)?.into_denoiser().map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })
}

/// Load a head checkpoint and check it reads `den_vocab`-sized features.
pub fn load_head(path: &Path, den_vocab: Vocab, feature_dim: usize) -> Result<LearnedHead> {
    let (head, vocab) = Checkpoint::load(path)?.into_head().map_err(|e| Error::Checkpoint { path: path.into(), reason: e.to_string() })?;
    if vocab != den_vocab {
        return Err(Error::VocabMismatch(format!("head trained on {vocab:?}, denoiser has {den_vocab:?}")));
    }
    if head.in_dim != feature_dim {
        return Err(Error::LengthMismatch { expected: feature_dim, got: head.in_dim });
    }
    Ok(head)
}
