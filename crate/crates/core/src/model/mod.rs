//! SE-RRM and vanilla RRM architectures.
//!
//! States are stored token-major: an SE state is `[batch, positions, symbols,
//! d]` and a vanilla state is `[batch, positions, d]`, so the feature axis is
//! contiguous for every projection.

mod batch;
pub mod checkpoint;
mod forward;
mod init;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::nn::{swiglu_hidden, RopeSpec};
use crate::tensor::{Float, Tensor};

pub use batch::Batch;
pub use forward::{Bound, RecurrentState};

/// Named parameter arrays, ordered by name.
pub type Params<F> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    SeRrm,
    VanillaRrm,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SeRrm => "se_rrm",
            Arch::VanillaRrm => "vanilla_rrm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se_rrm" | "se" => Ok(Arch::SeRrm),
            "vanilla_rrm" | "vanilla" => Ok(Arch::VanillaRrm),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

/// How usual symbols are embedded in the SE architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// One shared vector `d` for every usual symbol (symbol-equivariant).
    Equivariant,
    /// A separate vector per usual symbol (equivariance broken).
    PerSymbol,
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Equivariant => "equivariant",
            EmbeddingMode::PerSymbol => "per_symbol",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivariant" | "shared" => Ok(EmbeddingMode::Equivariant),
            "per_symbol" => Ok(EmbeddingMode::PerSymbol),
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

/// Ordered symbol set. Special symbols (e.g. `MASK`) occupy the first slots,
/// usual symbols follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolAlphabet {
    special: Vec<String>,
    usual: Vec<String>,
}

impl SymbolAlphabet {
    pub fn new(special: Vec<String>, usual: Vec<String>) -> Result<Self> {
        let mut all: Vec<&String> = special.iter().chain(&usual).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("alphabet symbols must be distinct".into()));
        }
        if all.iter().any(|s| s.is_empty() || s.contains([',', '\n', '='])) {
            return Err(Error::Config("alphabet symbols must be non-empty and free of `,` `=`".into()));
        }
        Ok(Self { special, usual })
    }

    /// `MASK` followed by digits `1..=n`; cell value `v` maps to slot `v`.
    pub fn sudoku(side: usize) -> Self {
        Self { special: vec!["MASK".into()], usual: (1..=side).map(|d| d.to_string()).collect() }
    }

    /// `k` interchangeable colors and no special symbols.
    pub fn colors(k: usize) -> Self {
        Self { special: vec![], usual: (0..k).map(|c| format!("c{c}")).collect() }
    }

    pub fn len(&self) -> usize {
        self.special.len() + self.usual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_special(&self) -> usize {
        self.special.len()
    }

    pub fn num_usual(&self) -> usize {
        self.usual.len()
    }

    pub fn special(&self) -> &[String] {
        &self.special
    }

    pub fn usual(&self) -> &[String] {
        &self.usual
    }

    pub fn is_special(&self, slot: usize) -> bool {
        slot < self.special.len()
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.special.iter().chain(&self.usual).position(|s| s == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub num_heads: usize,
    /// Transformer layers per block application.
    pub layers: usize,
    pub h_cycles: usize,
    pub l_cycles: usize,
    pub halting_p: f64,
    pub max_supervision_steps: usize,
    pub embedding_mode: EmbeddingMode,
    pub rope: RopeSpec,
    /// Number of task-type ids with a learned `[symbols, d]` embedding (SE only).
    pub num_task_types: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SeRrm,
            d_model: 64,
            num_heads: 4,
            layers: 2,
            h_cycles: 3,
            l_cycles: 6,
            halting_p: 0.05,
            max_supervision_steps: 16,
            embedding_mode: EmbeddingMode::Equivariant,
            rope: RopeSpec::rope2d(4),
            num_task_types: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        swiglu_hidden(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!("d_model {} must be a positive multiple of num_heads {}", self.d_model, self.num_heads));
        }
        if self.layers == 0 {
            return bad("layers must be ≥ 1".into());
        }
        if self.h_cycles == 0 || self.l_cycles == 0 {
            return bad("h_cycles and l_cycles must be ≥ 1".into());
        }
        if self.max_supervision_steps == 0 {
            return bad("max_supervision_steps must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.halting_p) {
            return bad(format!("halting_p {} outside [0, 1)", self.halting_p));
        }
        if self.arch == Arch::VanillaRrm && self.num_task_types > 0 {
            return bad("task-type embeddings are only available for the SE architecture".into());
        }
        self.rope.validate(self.head_dim())
    }
}

/// Parameters plus the architecture that interprets them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    alphabet: SymbolAlphabet,
    params: Params<F>,
}

impl<F: Float> Model<F> {
    pub fn from_parts(config: ModelConfig, alphabet: SymbolAlphabet, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = init::expected_shapes(&config, &alphabet);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, alphabet, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn alphabet(&self) -> &SymbolAlphabet {
        &self.alphabet
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|(n, _)| is_trainable(n)).map(|(_, t)| t.numel()).sum()
    }

    /// Same model at another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            alphabet: self.alphabet.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Fixed initial recurrent states are stored with the parameters but never
/// receive gradients.
pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("init.")
}

/// AdamW decays everything trainable except norm gains, the special and
/// shared symbol vectors and the task-type tables.
pub fn decays(name: &str) -> bool {
    is_trainable(name)
        && !matches!(name, "embed.s" | "embed.d" | "embed.task_type")
        && !name.rsplit('.').next().is_some_and(|s| s.starts_with("norm"))
}
