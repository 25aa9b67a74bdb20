//! Layer-level building blocks composed from tape ops.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, AxisLayout, RopeTable};
use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// SwiGLU hidden width: `ceil(8d/3)` rounded up to a multiple of 8.
pub fn swiglu_hidden(d: usize) -> usize {
    let raw = (8 * d).div_ceil(3);
    raw.div_ceil(8) * 8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeMode {
    None,
    Rope1d,
    Rope2d,
}

impl fmt::Display for RopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RopeMode::None => "none",
            RopeMode::Rope1d => "rope1d",
            RopeMode::Rope2d => "rope2d",
        })
    }
}

impl FromStr for RopeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RopeMode::None),
            "rope1d" => Ok(RopeMode::Rope1d),
            "rope2d" => Ok(RopeMode::Rope2d),
            other => Err(Error::Config(format!("unknown rope mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeSpec {
    pub mode: RopeMode,
    pub base: f64,
    pub grid_width: usize,
}

impl RopeSpec {
    pub fn none() -> Self {
        Self { mode: RopeMode::None, base: DEFAULT_ROPE_BASE, grid_width: 1 }
    }

    pub fn rope2d(grid_width: usize) -> Self {
        Self { mode: RopeMode::Rope2d, base: DEFAULT_ROPE_BASE, grid_width }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        match self.mode {
            RopeMode::None => Ok(()),
            RopeMode::Rope1d if !head_dim.is_multiple_of(2) => {
                Err(Error::Config(format!("rope1d needs an even head_dim, got {head_dim}")))
            }
            RopeMode::Rope2d if !head_dim.is_multiple_of(4) => {
                Err(Error::Config(format!("rope2d needs head_dim divisible by 4, got {head_dim}")))
            }
            RopeMode::Rope2d if self.grid_width == 0 => Err(Error::Config("rope2d needs grid_width ≥ 1".into())),
            _ => Ok(()),
        }
    }

    /// Angle table for the attended axis of `layout`, or `None` without rotary.
    pub fn table<F: Float>(&self, layout: AxisLayout, heads: usize, head_dim: usize) -> Result<Option<Arc<RopeTable<F>>>> {
        self.validate(head_dim)?;
        Ok(match self.mode {
            RopeMode::None => None,
            RopeMode::Rope1d => Some(Arc::new(RopeTable::one_d(layout, heads, head_dim, self.base))),
            RopeMode::Rope2d => Some(Arc::new(RopeTable::two_d(layout, heads, head_dim, self.grid_width, self.base))),
        })
    }
}

/// Which axis of a `[batch, positions, symbols, d]` state attention runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Position,
    Symbol,
}

/// Bias-free projections of one multi-head attention sublayer.
#[derive(Clone)]
pub struct AttentionParams<F> {
    pub num_heads: usize,
    pub wq: Var<F>,
    pub wk: Var<F>,
    pub wv: Var<F>,
    pub wo: Var<F>,
}

impl<F: Float> AttentionParams<F> {
    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> Result<usize> {
        let d = self.width();
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("feature width {d} not divisible by {} heads", self.num_heads)));
        }
        Ok(d / self.num_heads)
    }
}

/// Token layout for attention along `axis` of a rank-3 (`[b, i, d]`) or
/// rank-4 (`[b, i, k, d]`) state.
pub fn axis_layout(shape: &[usize], axis: Axis) -> Result<AxisLayout> {
    match (shape.len(), axis) {
        (3, Axis::Position) => Ok(AxisLayout::new(shape[0], shape[1], 1)),
        (4, Axis::Position) => Ok(AxisLayout::new(shape[0], shape[1], shape[2])),
        (4, Axis::Symbol) => Ok(AxisLayout::new(shape[0] * shape[1], shape[2], 1)),
        _ => Err(Error::Shape(format!("no {axis:?} axis in a state of shape {shape:?}"))),
    }
}

/// Multi-head self-attention along one axis of `h`. Rotary encodings apply
/// to queries and keys only on the position axis; asking for them on the
/// symbol axis is a configuration error.
pub fn attention_along_axis<F: Float>(
    tape: &mut Tape<F>,
    h: &Var<F>,
    axis: Axis,
    params: &AttentionParams<F>,
    rope: &RopeSpec,
) -> Result<Var<F>> {
    if axis == Axis::Symbol && rope.mode != RopeMode::None {
        return Err(Error::Config("rotary encodings are not defined on the symbol axis".into()));
    }
    let head_dim = params.head_dim()?;
    let layout = axis_layout(h.shape(), axis)?;
    let table = rope.table::<F>(layout, params.num_heads, head_dim)?;
    attention_with_table(tape, h, layout, params, table.as_ref())
}

/// As [`attention_along_axis`] with a prebuilt layout and rotary table.
pub fn attention_with_table<F: Float>(
    tape: &mut Tape<F>,
    h: &Var<F>,
    layout: AxisLayout,
    params: &AttentionParams<F>,
    rope: Option<&Arc<RopeTable<F>>>,
) -> Result<Var<F>> {
    let mut q = tape.linear(h, &params.wq)?;
    let mut k = tape.linear(h, &params.wk)?;
    let v = tape.linear(h, &params.wv)?;
    if let Some(table) = rope {
        q = tape.rope(&q, table)?;
        k = tape.rope(&k, table)?;
    }
    let o = tape.attention(&q, &k, &v, layout, params.num_heads)?;
    tape.linear(&o, &params.wo)
}

/// Token-wise `w_out · (silu(a) ⊙ b)` where `[a | b] = w_in · x`.
pub fn swiglu<F: Float>(tape: &mut Tape<F>, x: &Var<F>, w_in: &Var<F>, w_out: &Var<F>) -> Result<Var<F>> {
    let h = tape.linear(x, w_in)?;
    let g = tape.swiglu_gate(&h)?;
    let y = tape.linear(&g, w_out)?;
    if y.shape() != x.shape() {
        return Err(Error::Shape(format!("swiglu maps {:?} to {:?}", x.shape(), y.shape())));
    }
    Ok(y)
}

/// Mean cross-entropy of `logits[.., k]` against per-row targets.
pub fn softmax_cross_entropy<F: Float>(
    tape: &mut Tape<F>,
    logits: &Var<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var<F>> {
    tape.cross_entropy(logits, targets, mask)
}

/// Row-wise softmax over the trailing axis (no tape).
pub fn softmax<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let k = x.last_dim();
    Tensor::new(x.shape(), kernels::softmax_rows(x.data(), k)).expect("same shape")
}

/// Rotates a `[heads, positions, head_dim]` query/key block with 2D rotary
/// angles derived from `(i / grid_width, i % grid_width)`.
pub fn apply_rope2d<F: Float>(x: &Tensor<F>, grid_width: usize, base: f64) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("apply_rope2d expects [heads, positions, head_dim], got {s:?}")));
    }
    let (heads, positions, hd) = (s[0], s[1], s[2]);
    RopeSpec { mode: RopeMode::Rope2d, base, grid_width }.validate(hd)?;
    // Each (head, position) row is one single-head token.
    let layout = AxisLayout::new(heads, positions, 1);
    let table = RopeTable::two_d(layout, 1, hd, grid_width, base);
    Tensor::new(s, table.rotate(x.data(), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_width_follows_rounding_rule() {
        assert_eq!(swiglu_hidden(64), 176);
        assert_eq!(swiglu_hidden(128), 344);
        assert_eq!(swiglu_hidden(16), 48);
        assert_eq!(swiglu_hidden(3), 8);
    }

    #[test]
    fn rope_validation() {
        assert!(RopeSpec::rope2d(4).validate(8).is_ok());
        assert!(RopeSpec::rope2d(4).validate(6).is_err());
        assert!(RopeSpec::none().validate(3).is_ok());
    }
}
