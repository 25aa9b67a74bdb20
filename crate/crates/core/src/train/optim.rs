//! AdamW with decoupled weight decay and the warmup schedules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{decays, is_trainable, Params};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    WarmupConstant,
    WarmupCosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::WarmupConstant => "warmup_constant",
            Schedule::WarmupCosine => "warmup_cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup_constant" | "constant" => Ok(Schedule::WarmupConstant),
            "warmup_cosine" | "cosine" => Ok(Schedule::WarmupCosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Learning rate at optimizer step `step ≥ 1`: linear ramp over
/// `warmup_steps`, then constant or cosine decay reaching 0 at `horizon`.
pub fn lr_at(step: u64, peak: f64, warmup_steps: u64, schedule: Schedule, horizon: u64) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    match schedule {
        Schedule::WarmupConstant => peak,
        Schedule::WarmupCosine => {
            if step >= horizon {
                return 0.0;
            }
            let span = horizon.saturating_sub(warmup_steps).max(1) as f64;
            let progress = (step - warmup_steps) as f64 / span;
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed steps.
    pub t: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update at learning rate `lr`. Parameters without a gradient still
    /// receive weight decay when they decay and the step counter is shared.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            if params.get(name).is_none_or(|p| p.shape() != g.shape()) {
                return Err(Error::Shape(format!("gradient {name} does not match a parameter")));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !is_trainable(name) {
                continue;
            }
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            let cells = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
            for (j, ((pj, mj), vj)) in cells.enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                let m1 = c.beta1 * *mj as f64 + (1.0 - c.beta1) * gj;
                let v1 = c.beta2 * *vj as f64 + (1.0 - c.beta2) * gj * gj;
                *mj = m1 as f32;
                *vj = v1 as f32;
                let mhat = m1 / bc1;
                let vhat = v1 / bc2;
                let old = *pj as f64;
                *pj = (old - lr * wd * old - lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Serialized moments: `t` as u64 followed by two checkpoint-style
    /// parameter sections (`m.*`, `v.*`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"SERRMOPT".to_vec();
        out.extend_from_slice(&self.t.to_le_bytes());
        for (prefix, set) in [("m.", &self.m), ("v.", &self.v)] {
            for (name, t) in set {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u32).to_le_bytes());
                }
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], config: AdamWConfig) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != b"SERRMOPT" {
            return Err(Error::Checkpoint("not an optimizer state file".into()));
        }
        let mut opt = AdamW::new(config);
        opt.t = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mut cur = Cursor { bytes, pos: 16 };
        while cur.pos < bytes.len() {
            let n = cur.u32()?;
            let name = String::from_utf8(cur.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("optimizer entry name is not UTF-8".into()))?;
            let rank = cur.u32()?;
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = cur.take(numel * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let tensor = Tensor::new(&shape, data)?;
            match name.split_once('.') {
                Some(("m", rest)) => opt.m.insert(rest.to_string(), tensor),
                Some(("v", rest)) => opt.v.insert(rest.to_string(), tensor),
                _ => return Err(Error::Checkpoint(format!("optimizer entry `{name}`"))),
            };
        }
        Ok(opt)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Checkpoint("truncated optimizer state".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
