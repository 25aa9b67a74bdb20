//! `key=value` run configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys mirror the fields of [`ModelConfig`] and [`TrainConfig`].

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}` cannot take the value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Applies one assignment. `halting_p` sets both the model and trainer copies.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "arch" => m.arch = value.parse()?,
            "d_model" | "D" => m.d_model = parse(key, value)?,
            "num_heads" => m.num_heads = parse(key, value)?,
            "layers" | "L_layers" => m.layers = parse(key, value)?,
            "h_cycles" | "H_cycles" => m.h_cycles = parse(key, value)?,
            "l_cycles" | "L_cycles" => m.l_cycles = parse(key, value)?,
            "max_supervision_steps" => m.max_supervision_steps = parse(key, value)?,
            "embedding_mode" => m.embedding_mode = value.parse()?,
            "rope" => m.rope.mode = value.parse()?,
            "rope_base" => m.rope.base = parse(key, value)?,
            "grid_width" | "rope_grid_width" => m.rope.grid_width = parse(key, value)?,
            "num_task_types" => m.num_task_types = parse(key, value)?,
            "halting_p" => {
                m.halting_p = parse(key, value)?;
                t.halting_p = m.halting_p;
            }
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "schedule" => t.schedule = value.parse()?,
            "decay_steps" => t.decay_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "grad_precision" => t.grad_precision = value.parse()?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "eval_steps" => t.eval_steps = parse(key, value)?,
            "augment_dihedral" => t.augment_dihedral = parse_bool(key, value)?,
            "augment_symbols" => t.augment_symbols = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, in a form `from_text` reads back.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let pairs: Vec<(&str, String)> = vec![
            ("arch", m.arch.to_string()),
            ("d_model", m.d_model.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("layers", m.layers.to_string()),
            ("h_cycles", m.h_cycles.to_string()),
            ("l_cycles", m.l_cycles.to_string()),
            ("max_supervision_steps", m.max_supervision_steps.to_string()),
            ("embedding_mode", m.embedding_mode.to_string()),
            ("rope", m.rope.mode.to_string()),
            ("rope_base", m.rope.base.to_string()),
            ("grid_width", m.rope.grid_width.to_string()),
            ("num_task_types", m.num_task_types.to_string()),
            ("halting_p", t.halting_p.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("schedule", t.schedule.to_string()),
            ("decay_steps", t.decay_steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("grad_precision", t.grad_precision.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("eval_steps", t.eval_steps.to_string()),
            ("augment_dihedral", t.augment_dihedral.to_string()),
            ("augment_symbols", t.augment_symbols.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
