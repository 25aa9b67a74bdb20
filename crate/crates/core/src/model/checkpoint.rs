//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a `u32` manifest length, the UTF-8 manifest of
//! `key=value` lines, then every parameter in name order as
//! `u32 name_len | name | u32 rank | u32 extents.. | f32 values..`, all
//! little-endian. Writing a loaded checkpoint reproduces its bytes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Arch, EmbeddingMode, Model, ModelConfig, Params, SymbolAlphabet};
use crate::error::{Error, Result};
use crate::tensor::nn::{RopeMode, RopeSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SERRMCK\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Manifest keys the model itself owns; everything else is caller metadata.
const MODEL_KEYS: &[&str] = &[
    "format_version",
    "arch",
    "D",
    "num_heads",
    "L_layers",
    "H_cycles",
    "L_cycles",
    "halting_p",
    "max_supervision_steps",
    "embedding_mode",
    "num_task_types",
    "alphabet_special",
    "alphabet_usual",
    "rope",
    "rope_base",
    "rope_grid_width",
];

fn model_manifest(model: &Model<f32>) -> BTreeMap<String, String> {
    let c = model.config();
    let a = model.alphabet();
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("format_version", FORMAT_VERSION.to_string());
    put("arch", c.arch.to_string());
    put("D", c.d_model.to_string());
    put("num_heads", c.num_heads.to_string());
    put("L_layers", c.layers.to_string());
    put("H_cycles", c.h_cycles.to_string());
    put("L_cycles", c.l_cycles.to_string());
    put("halting_p", c.halting_p.to_string());
    put("max_supervision_steps", c.max_supervision_steps.to_string());
    put("embedding_mode", c.embedding_mode.to_string());
    put("num_task_types", c.num_task_types.to_string());
    put("alphabet_special", a.special().join(","));
    put("alphabet_usual", a.usual().join(","));
    put("rope", c.rope.mode.to_string());
    put("rope_base", c.rope.base.to_string());
    put("rope_grid_width", c.rope.grid_width.to_string());
    m
}

/// Serializes `model` plus caller metadata (e.g. the training step).
pub fn to_bytes(model: &Model<f32>, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut manifest = model_manifest(model);
    for (k, v) in extra {
        if MODEL_KEYS.contains(&k.as_str()) {
            return Err(Error::Checkpoint(format!("metadata key `{k}` is reserved")));
        }
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("metadata entry `{k}` is not a single key=value line")));
        }
        manifest.insert(k.clone(), v.clone());
    }
    let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    for (name, t) in model.params() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = m.get(key).ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))?;
    v.parse().map_err(|_| Error::Checkpoint(format!("manifest `{key}={v}` is malformed")))
}

fn split_list(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(str::to_string).collect()
    }
}

/// Parses a checkpoint; returns the model and every non-model manifest entry.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, BTreeMap<String, String>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let mut manifest = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("manifest line `{line}`")))?;
        manifest.insert(k.to_string(), v.to_string());
    }
    let version: u32 = field(&manifest, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {version}")));
    }
    let config = ModelConfig {
        arch: field::<Arch>(&manifest, "arch")?,
        d_model: field(&manifest, "D")?,
        num_heads: field(&manifest, "num_heads")?,
        layers: field(&manifest, "L_layers")?,
        h_cycles: field(&manifest, "H_cycles")?,
        l_cycles: field(&manifest, "L_cycles")?,
        halting_p: field(&manifest, "halting_p")?,
        max_supervision_steps: field(&manifest, "max_supervision_steps")?,
        embedding_mode: field::<EmbeddingMode>(&manifest, "embedding_mode")?,
        rope: RopeSpec {
            mode: field::<RopeMode>(&manifest, "rope")?,
            base: field(&manifest, "rope_base")?,
            grid_width: field(&manifest, "rope_grid_width")?,
        },
        num_task_types: field(&manifest, "num_task_types")?,
    };
    let alphabet = SymbolAlphabet::new(
        split_list(&field::<String>(&manifest, "alphabet_special")?),
        split_list(&field::<String>(&manifest, "alphabet_usual")?),
    )?;
    let mut params = Params::new();
    let mut last: Option<String> = None;
    while !r.done() {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::Checkpoint(format!("parameter `{name}` out of order")));
        }
        let rank = r.u32()?;
        if rank > crate::tensor::MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        params.insert(name.clone(), Tensor::new(&shape, data)?);
        last = Some(name);
    }
    let model = Model::from_parts(config, alphabet, params)?;
    manifest.retain(|k, _| !MODEL_KEYS.contains(&k.as_str()));
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &Model<f32>, extra: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(model, extra)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, BTreeMap<String, String>)> {
    from_bytes(&fs::read(path)?)
}
