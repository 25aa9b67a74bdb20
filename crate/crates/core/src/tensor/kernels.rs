//! Slice-level forward/backward kernels. The tape wraps these; tests and
//! benches may call them through the public ops.

use super::Float;
use crate::par;

pub(crate) const RMS_EPS: f64 = 1e-6;

/// How a flat run of tokens is grouped for attention along one axis.
///
/// Token `n` of an `[outer, len, inner]` arrangement sits at
/// `(o * len + t) * inner + r`. Attention runs over `t` for every fixed
/// `(o, r)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisLayout {
    pub fn new(outer: usize, len: usize, inner: usize) -> Self {
        Self { outer, len, inner }
    }

    pub fn tokens(&self) -> usize {
        self.outer * self.len * self.inner
    }

    pub fn groups(&self) -> usize {
        self.outer * self.inner
    }

    #[inline]
    pub fn token(&self, group: usize, t: usize) -> usize {
        ((group / self.inner) * self.len + t) * self.inner + group % self.inner
    }

    /// Index along the attended axis for flat token `n`.
    #[inline]
    pub fn position_of(&self, n: usize) -> usize {
        (n / self.inner) % self.len
    }
}

// ---------------------------------------------------------------- linear

pub(crate) fn linear_fwd<F: Float>(x: &[F], w: &[F], rows: usize, din: usize, dout: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * dout];
    F::gemm(rows, din, dout, x, din as isize, 1, w, dout as isize, 1, F::zero(), &mut y, dout as isize, 1);
    y
}

/// Returns `(dx, dw)`.
pub(crate) fn linear_bwd<F: Float>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    din: usize,
    dout: usize,
) -> (Vec<F>, Vec<F>) {
    let mut dx = vec![F::zero(); rows * din];
    F::gemm(rows, dout, din, dy, dout as isize, 1, w, 1, dout as isize, F::zero(), &mut dx, din as isize, 1);
    let mut dw = vec![F::zero(); din * dout];
    F::gemm(din, rows, dout, x, 1, din as isize, dy, dout as isize, 1, F::zero(), &mut dw, dout as isize, 1);
    (dx, dw)
}

// ---------------------------------------------------------------- rms norm

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm_fwd<F: Float>(x: &[F], gain: &[F], eps: F) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut inv = vec![F::zero(); rows];
    let df = F::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / df;
        let ir = F::one() / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * ir * g;
        }
    }
    (y, inv)
}

/// Returns `(dx, dgain)`.
pub(crate) fn rms_norm_bwd<F: Float>(x: &[F], gain: &[F], inv: &[F], dy: &[F]) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let df = F::from_f64(d as f64);
    let mut dx = vec![F::zero(); x.len()];
    let mut dg = vec![F::zero(); d];
    for (r, &ir) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &dy[r * d..(r + 1) * d];
        let mut dot = F::zero();
        for j in 0..d {
            dot += gr[j] * gain[j] * xr[j];
            dg[j] += gr[j] * xr[j] * ir;
        }
        let c = dot * ir * ir * ir / df;
        for j in 0..d {
            dx[r * d + j] = gr[j] * gain[j] * ir - xr[j] * c;
        }
    }
    (dx, dg)
}

// ---------------------------------------------------------------- swiglu gate

#[inline]
fn sigmoid<F: Float>(a: F) -> F {
    F::one() / (F::one() + (-a).exp())
}

/// `h` rows are `[a | b]`; output rows are `silu(a) ⊙ b`.
pub(crate) fn swiglu_gate_fwd<F: Float>(h: &[F], f: usize) -> Vec<F> {
    let rows = h.len() / (2 * f);
    let mut out = vec![F::zero(); rows * f];
    for r in 0..rows {
        let (a, b) = h[r * 2 * f..(r + 1) * 2 * f].split_at(f);
        for j in 0..f {
            out[r * f + j] = a[j] * sigmoid(a[j]) * b[j];
        }
    }
    out
}

pub(crate) fn swiglu_gate_bwd<F: Float>(h: &[F], f: usize, dy: &[F]) -> Vec<F> {
    let rows = h.len() / (2 * f);
    let mut dh = vec![F::zero(); h.len()];
    for r in 0..rows {
        let (a, b) = h[r * 2 * f..(r + 1) * 2 * f].split_at(f);
        let (da, db) = dh[r * 2 * f..(r + 1) * 2 * f].split_at_mut(f);
        for j in 0..f {
            let s = sigmoid(a[j]);
            let silu = a[j] * s;
            let g = dy[r * f + j];
            db[j] = g * silu;
            da[j] = g * b[j] * s * (F::one() + a[j] * (F::one() - s));
        }
    }
    dh
}

// ---------------------------------------------------------------- rotary

/// Precomputed rotary angles for every token of a layout.
///
/// Rotations act on adjacent feature pairs `(2j, 2j+1)` inside each head.
/// In 2D mode the first half of a head's pairs rotate with the row index and
/// the second half with the column index, each half using the frequency ladder
/// `base^(-2j / (head_dim/2))`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    heads: usize,
    head_dim: usize,
    layout: AxisLayout,
    /// `[positions, head_dim / 2]`
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Float> RopeTable<F> {
    /// 1D rotary over position indices.
    pub fn one_d(layout: AxisLayout, heads: usize, head_dim: usize, base: f64) -> Self {
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(layout.len * pairs);
        let mut sin = Vec::with_capacity(layout.len * pairs);
        for p in 0..layout.len {
            for j in 0..pairs {
                let theta = p as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                cos.push(F::from_f64(theta.cos()));
                sin.push(F::from_f64(theta.sin()));
            }
        }
        Self { heads, head_dim, layout, cos, sin }
    }

    /// 2D rotary: position `i` is `(i / grid_width, i % grid_width)`.
    pub fn two_d(layout: AxisLayout, heads: usize, head_dim: usize, grid_width: usize, base: f64) -> Self {
        let pairs = head_dim / 2;
        let half_pairs = pairs / 2;
        let half_dim = head_dim / 2;
        let width = grid_width.max(1);
        let mut cos = Vec::with_capacity(layout.len * pairs);
        let mut sin = Vec::with_capacity(layout.len * pairs);
        for p in 0..layout.len {
            let (row, col) = ((p / width) as f64, (p % width) as f64);
            for j in 0..pairs {
                let (coord, jj) = if j < half_pairs { (row, j) } else { (col, j - half_pairs) };
                let theta = coord * base.powf(-2.0 * jj as f64 / half_dim as f64);
                cos.push(F::from_f64(theta.cos()));
                sin.push(F::from_f64(theta.sin()));
            }
        }
        Self { heads, head_dim, layout, cos, sin }
    }

    pub fn layout(&self) -> AxisLayout {
        self.layout
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates every head of every token; `inverse` rotates by the negated
    /// angle, which is the transpose used in the backward pass.
    pub(crate) fn rotate(&self, x: &[F], inverse: bool) -> Vec<F> {
        let d = self.heads * self.head_dim;
        let pairs = self.head_dim / 2;
        let mut out = vec![F::zero(); x.len()];
        let layout = self.layout;
        par::for_each_chunk_mut(&mut out, d, |n, row| {
            let p = layout.position_of(n);
            let cs = &self.cos[p * pairs..(p + 1) * pairs];
            let sn = &self.sin[p * pairs..(p + 1) * pairs];
            let xr = &x[n * d..(n + 1) * d];
            for h in 0..self.heads {
                let base = h * self.head_dim;
                for j in 0..pairs {
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    let (a, b) = (xr[base + 2 * j], xr[base + 2 * j + 1]);
                    row[base + 2 * j] = a * c - b * s;
                    row[base + 2 * j + 1] = a * s + b * c;
                }
            }
        });
        out
    }
}

// ---------------------------------------------------------------- attention

/// Per-group scratch produced by the attention forward pass.
pub(crate) struct AttentionFwd<F> {
    pub out: Vec<F>,
    /// `[groups, heads, len, len]` softmax weights.
    pub probs: Vec<F>,
}

fn gather_head<F: Float>(src: &[F], layout: &AxisLayout, g: usize, d: usize, off: usize, hd: usize, dst: &mut [F]) {
    for t in 0..layout.len {
        let n = layout.token(g, t);
        dst[t * hd..(t + 1) * hd].copy_from_slice(&src[n * d + off..n * d + off + hd]);
    }
}

#[inline]
fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a · x`.
#[inline]
fn axpy<F: Float>(a: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Non-causal multi-head softmax attention over the attended axis of `layout`.
/// `q`, `k`, `v` are `[tokens, d]` with heads laid out contiguously along `d`.
pub(crate) fn attention_fwd<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    layout: AxisLayout,
    heads: usize,
    d: usize,
) -> AttentionFwd<F> {
    let hd = d / heads;
    let len = layout.len;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let per_group: Vec<(Vec<F>, Vec<F>)> = par::map_range(layout.groups(), |g| {
        let mut out = vec![F::zero(); len * d];
        let mut probs = vec![F::zero(); heads * len * len];
        let mut qh = vec![F::zero(); len * hd];
        let mut kh = vec![F::zero(); len * hd];
        let mut vh = vec![F::zero(); len * hd];
        for h in 0..heads {
            let off = h * hd;
            gather_head(q, &layout, g, d, off, hd, &mut qh);
            gather_head(k, &layout, g, d, off, hd, &mut kh);
            gather_head(v, &layout, g, d, off, hd, &mut vh);
            let p = &mut probs[h * len * len..(h + 1) * len * len];
            // scores = q kᵀ · scale
            for i in 0..len {
                let qi = &qh[i * hd..(i + 1) * hd];
                for j in 0..len {
                    p[i * len + j] = dot(qi, &kh[j * hd..(j + 1) * hd]) * scale;
                }
            }
            for row in p.chunks_mut(len) {
                let mx = row.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
                let mut z = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let inv = F::one() / z;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            // out_h = P v, written at column offset `off` of the [len, d] block
            for i in 0..len {
                let o = &mut out[i * d + off..i * d + off + hd];
                for j in 0..len {
                    axpy(p[i * len + j], &vh[j * hd..(j + 1) * hd], o);
                }
            }
        }
        (out, probs)
    });
    let mut out = vec![F::zero(); q.len()];
    let mut probs = Vec::with_capacity(layout.groups() * heads * len * len);
    for (g, (o, p)) in per_group.into_iter().enumerate() {
        for t in 0..len {
            let n = layout.token(g, t);
            out[n * d..(n + 1) * d].copy_from_slice(&o[t * d..(t + 1) * d]);
        }
        probs.extend_from_slice(&p);
    }
    AttentionFwd { out, probs }
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_bwd<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    layout: AxisLayout,
    heads: usize,
    d: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = d / heads;
    let len = layout.len;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let per_group: Vec<[Vec<F>; 3]> = par::map_range(layout.groups(), |g| {
        let mut dq = vec![F::zero(); len * d];
        let mut dk = vec![F::zero(); len * d];
        let mut dv = vec![F::zero(); len * d];
        let mut qh = vec![F::zero(); len * hd];
        let mut kh = vec![F::zero(); len * hd];
        let mut vh = vec![F::zero(); len * hd];
        let mut doh = vec![F::zero(); len * hd];
        let mut dp = vec![F::zero(); len * len];
        for h in 0..heads {
            let off = h * hd;
            gather_head(q, &layout, g, d, off, hd, &mut qh);
            gather_head(k, &layout, g, d, off, hd, &mut kh);
            gather_head(v, &layout, g, d, off, hd, &mut vh);
            gather_head(dout, &layout, g, d, off, hd, &mut doh);
            let base = (g * heads + h) * len * len;
            let p = &probs[base..base + len * len];
            // dv = Pᵀ dO, dP = dO vᵀ
            for i in 0..len {
                let di = &doh[i * hd..(i + 1) * hd];
                for j in 0..len {
                    axpy(p[i * len + j], di, &mut dv[j * d + off..j * d + off + hd]);
                    dp[i * len + j] = dot(di, &vh[j * hd..(j + 1) * hd]);
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for (prow, dprow) in p.chunks(len).zip(dp.chunks_mut(len)) {
                let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            // dq = dS k, dk = dSᵀ q
            for i in 0..len {
                let qi = &qh[i * hd..(i + 1) * hd];
                for j in 0..len {
                    let ds = dp[i * len + j];
                    axpy(ds, &kh[j * hd..(j + 1) * hd], &mut dq[i * d + off..i * d + off + hd]);
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + hd]);
                }
            }
        }
        [dq, dk, dv]
    });
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    for (g, [gq, gk, gv]) in per_group.into_iter().enumerate() {
        for t in 0..len {
            let n = layout.token(g, t);
            dq[n * d..(n + 1) * d].copy_from_slice(&gq[t * d..(t + 1) * d]);
            dk[n * d..(n + 1) * d].copy_from_slice(&gk[t * d..(t + 1) * d]);
            dv[n * d..(n + 1) * d].copy_from_slice(&gv[t * d..(t + 1) * d]);
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------- softmax / loss

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<F: Float>(x: &[F], k: usize) -> Vec<F> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Mean negative log-likelihood over the rows whose mask is set.
/// Returns `(loss, softmax)`.
pub(crate) fn cross_entropy_fwd<F: Float>(logits: &[F], k: usize, targets: &[usize], mask: &[bool]) -> (F, Vec<F>) {
    let probs = softmax_rows(logits, k);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (r, row) in logits.chunks(k).enumerate() {
        if !mask[r] {
            continue;
        }
        let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).as_f64();
        let lse = mx + row.iter().map(|&v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]].as_f64();
        count += 1;
    }
    (F::from_f64(total / count as f64), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_positions() {
        // [outer=2, len=3, inner=4]
        let l = AxisLayout::new(2, 3, 4);
        assert_eq!(l.tokens(), 24);
        assert_eq!(l.groups(), 8);
        assert_eq!(l.token(0, 0), 0);
        assert_eq!(l.token(1, 2), 9);
        assert_eq!(l.token(5, 1), 12 + 4 + 1);
        for g in 0..l.groups() {
            for t in 0..l.len {
                assert_eq!(l.position_of(l.token(g, t)), t);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x: Vec<f32> = (0..40).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let p = softmax_rows(&x, 8);
        for row in p.chunks(8) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let layout = AxisLayout::new(1, 6, 1);
        let table = RopeTable::<f64>::two_d(layout, 2, 8, 3, 10000.0);
        let x: Vec<f64> = (0..6 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = table.rotate(&table.rotate(&x, false), true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
