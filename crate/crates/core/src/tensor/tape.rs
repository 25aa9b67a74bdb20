//! Reverse-mode tape.
//!
//! A [`Var`] pairs an immutable value with an optional tape node. Ops record a
//! node only when gradients are enabled and at least one input is tracked, so
//! work done under [`Tape::set_grad_enabled`]`(false)` leaves no trace and its
//! intermediates are freed as soon as they go out of scope.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, AxisLayout, RopeTable};
use super::{Float, Tensor};
use crate::error::{Error, Result};

type Backward<F> = Box<dyn FnOnce(&[F], &[bool]) -> Vec<Option<Vec<F>>>>;

enum NodeKind<F> {
    Leaf(String),
    Op { inputs: Vec<Option<usize>>, backward: Backward<F> },
}

struct Node<F> {
    shape: Vec<usize>,
    kind: NodeKind<F>,
}

/// A value on (or off) the tape.
#[derive(Clone)]
pub struct Var<F> {
    value: Arc<Tensor<F>>,
    node: Option<usize>,
}

impl<F: Float> Var<F> {
    /// An untracked value.
    pub fn constant(t: Tensor<F>) -> Self {
        Self { value: Arc::new(t), node: None }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        Self { value: Arc::clone(&self.value), node: None }
    }

    pub fn into_tensor(self) -> Tensor<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

impl<F: Float> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

/// Gradients of a scalar with respect to every named leaf it depends on.
pub type Gradients<F> = BTreeMap<String, Tensor<F>>;

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A tape that never records; every op returns an untracked value.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named differentiable leaf.
    pub fn leaf(&mut self, name: &str, value: Tensor<F>) -> Var<F> {
        self.leaf_shared(name, Arc::new(value))
    }

    pub fn leaf_shared(&mut self, name: &str, value: Arc<Tensor<F>>) -> Var<F> {
        if !self.grad_enabled {
            return Var { value, node: None };
        }
        self.nodes.push(Node { shape: value.shape().to_vec(), kind: NodeKind::Leaf(name.to_string()) });
        Var { value, node: Some(self.nodes.len() - 1) }
    }

    fn record(&mut self, value: Tensor<F>, inputs: &[&Var<F>], backward: Backward<F>) -> Var<F> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if !self.grad_enabled || ids.iter().all(Option::is_none) {
            return Var::constant(value);
        }
        self.nodes.push(Node { shape: value.shape().to_vec(), kind: NodeKind::Op { inputs: ids, backward } });
        Var { value: Arc::new(value), node: Some(self.nodes.len() - 1) }
    }

    /// Backpropagates from a scalar. Consumes the recorded graph; a second
    /// call fails.
    pub fn backward(&mut self, loss: &Var<F>) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::Autodiff("tape already consumed by a previous backward".into()));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Autodiff(format!("backward needs a scalar, got shape {:?}", loss.shape())));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Autodiff("loss does not depend on any tracked value".into()))?;
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![F::one()]);
        let mut out = Gradients::new();
        for (id, node) in nodes.into_iter().enumerate().take(root + 1).rev() {
            let Some(g) = grads[id].take() else { continue };
            match node.kind {
                NodeKind::Leaf(name) => {
                    let t = Tensor::new(&node.shape, g)?;
                    match out.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            out.insert(name, t);
                        }
                    }
                }
                NodeKind::Op { inputs, backward } => {
                    let needs: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                    let parts = backward(&g, &needs);
                    for (input, part) in inputs.into_iter().zip(parts) {
                        let (Some(i), Some(part)) = (input, part) else { continue };
                        match &mut grads[i] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&part) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(part),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        same_shape("add", a.shape(), b.shape())?;
        let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record(out, &[a, b], Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())])))
    }

    pub fn mul(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        same_shape("mul", a.shape(), b.shape())?;
        let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (av, bv) = (Arc::clone(&a.value), Arc::clone(&b.value));
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| g.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect());
                let db = needs[1].then(|| g.iter().zip(av.data()).map(|(&g, &x)| g * x).collect());
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&mut self, a: &Var<F>, c: F) -> Var<F> {
        let out = a.value.map(|x| x * c);
        self.record(out, &[a], Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * c).collect())]))
    }

    pub fn sum(&mut self, a: &Var<F>) -> Var<F> {
        let n = a.value.numel();
        let out = Tensor::scalar(a.value.data().iter().copied().sum());
        self.record(out, &[a], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn reshape(&mut self, a: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let out = (*a.value).clone().reshape(shape)?;
        Ok(self.record(out, &[a], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    // ------------------------------------------------------------ dense layers

    /// `x[.., din] · w[din, dout]`.
    pub fn linear(&mut self, x: &Var<F>, w: &Var<F>) -> Result<Var<F>> {
        let ws = w.shape();
        if ws.len() != 2 || x.value.last_dim() != ws[0] {
            return Err(Error::Shape(format!("linear: x {:?} · w {:?}", x.shape(), ws)));
        }
        let (din, dout, rows) = (ws[0], ws[1], x.value.rows());
        let y = kernels::linear_fwd(x.value.data(), w.value.data(), rows, din, dout);
        let out = Tensor::new(&with_last(x.shape(), dout), y)?;
        let (xv, wv) = (Arc::clone(&x.value), Arc::clone(&w.value));
        Ok(self.record(
            out,
            &[x, w],
            Box::new(move |g, needs| {
                if needs[0] {
                    let (dx, dw) = kernels::linear_bwd(xv.data(), wv.data(), g, rows, din, dout);
                    vec![Some(dx), needs[1].then_some(dw)]
                } else {
                    let mut dw = vec![F::zero(); din * dout];
                    F::gemm(din, rows, dout, xv.data(), 1, din as isize, g, dout as isize, 1, F::zero(), &mut dw, dout as isize, 1);
                    vec![None, Some(dw)]
                }
            }),
        ))
    }

    /// Adds `b[d]` to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let d = x.value.last_dim();
        if b.shape() != [d] {
            return Err(Error::Shape(format!("add_bias: x {:?} + b {:?}", x.shape(), b.shape())));
        }
        let bd = b.value.data();
        let data = x.value.data().iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(
            out,
            &[x, b],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let mut db = vec![F::zero(); d];
                    for row in g.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    db
                });
                vec![needs[0].then(|| g.to_vec()), db]
            }),
        ))
    }

    /// Root-mean-square normalization over the trailing axis, times `gain`.
    pub fn rms_norm(&mut self, x: &Var<F>, gain: &Var<F>) -> Result<Var<F>> {
        self.rms_norm_eps(x, gain, F::from_f64(kernels::RMS_EPS))
    }

    pub fn rms_norm_eps(&mut self, x: &Var<F>, gain: &Var<F>, eps: F) -> Result<Var<F>> {
        let d = x.value.last_dim();
        if gain.shape() != [d] || d == 0 {
            return Err(Error::Shape(format!("rms_norm: x {:?} with gain {:?}", x.shape(), gain.shape())));
        }
        let (y, inv) = kernels::rms_norm_fwd(x.value.data(), gain.value.data(), eps);
        let out = Tensor::new(x.shape(), y)?;
        let (xv, gv) = (Arc::clone(&x.value), Arc::clone(&gain.value));
        Ok(self.record(
            out,
            &[x, gain],
            Box::new(move |g, needs| {
                let (dx, dg) = kernels::rms_norm_bwd(xv.data(), gv.data(), &inv, g);
                vec![needs[0].then_some(dx), needs[1].then_some(dg)]
            }),
        ))
    }

    /// Splits trailing rows into `[a | b]` halves and returns `silu(a) ⊙ b`.
    pub fn swiglu_gate(&mut self, h: &Var<F>) -> Result<Var<F>> {
        let two_f = h.value.last_dim();
        if !two_f.is_multiple_of(2) {
            return Err(Error::Shape(format!("swiglu gate needs an even trailing axis, got {two_f}")));
        }
        let f = two_f / 2;
        let y = kernels::swiglu_gate_fwd(h.value.data(), f);
        let out = Tensor::new(&with_last(h.shape(), f), y)?;
        let hv = Arc::clone(&h.value);
        Ok(self.record(out, &[h], Box::new(move |g, _| vec![Some(kernels::swiglu_gate_bwd(hv.data(), f, g))])))
    }

    /// Per-row dot product with `w[d]` plus scalar `b[1]`; drops the trailing axis.
    pub fn decode(&mut self, y: &Var<F>, w: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let d = y.value.last_dim();
        if w.shape() != [d] || b.shape() != [1] {
            return Err(Error::Shape(format!("decode: y {:?}, w {:?}, b {:?}", y.shape(), w.shape(), b.shape())));
        }
        let wd = w.value.data();
        let bias = b.value.data()[0];
        let logits: Vec<F> = y
            .value
            .data()
            .chunks(d)
            .map(|row| row.iter().zip(wd).map(|(&a, &c)| a * c).sum::<F>() + bias)
            .collect();
        let shape = y.shape()[..y.shape().len() - 1].to_vec();
        let out = Tensor::new(&shape, logits)?;
        let (yv, wv) = (Arc::clone(&y.value), Arc::clone(&w.value));
        Ok(self.record(
            out,
            &[y, w, b],
            Box::new(move |g, needs| {
                let dy = needs[0].then(|| {
                    let mut dy = vec![F::zero(); yv.numel()];
                    for (r, &gr) in g.iter().enumerate() {
                        for (o, &c) in dy[r * d..(r + 1) * d].iter_mut().zip(wv.data()) {
                            *o = gr * c;
                        }
                    }
                    dy
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![F::zero(); d];
                    for (row, &gr) in yv.data().chunks(d).zip(g) {
                        for (o, &v) in dw.iter_mut().zip(row) {
                            *o += gr * v;
                        }
                    }
                    dw
                });
                let db = needs[2].then(|| vec![g.iter().copied().sum()]);
                vec![dy, dw, db]
            }),
        ))
    }

    // ------------------------------------------------------------ attention

    /// Applies precomputed rotary angles to every head of every token.
    pub fn rope(&mut self, x: &Var<F>, table: &Arc<RopeTable<F>>) -> Result<Var<F>> {
        let d = table.heads() * table.head_dim();
        if x.value.last_dim() != d || x.value.rows() != table.layout().tokens() {
            return Err(Error::Shape(format!(
                "rope: x {:?} vs {} tokens × {d} features",
                x.shape(),
                table.layout().tokens()
            )));
        }
        let out = Tensor::new(x.shape(), table.rotate(x.value.data(), false))?;
        let t = Arc::clone(table);
        Ok(self.record(out, &[x], Box::new(move |g, _| vec![Some(t.rotate(g, true))])))
    }

    /// Softmax attention of `q` against `k`/`v` along the attended axis of
    /// `layout`. Inputs are `[tokens, d]` with `heads` contiguous feature blocks.
    pub fn attention(&mut self, q: &Var<F>, k: &Var<F>, v: &Var<F>, layout: AxisLayout, heads: usize) -> Result<Var<F>> {
        same_shape("attention q/k", q.shape(), k.shape())?;
        same_shape("attention q/v", q.shape(), v.shape())?;
        let d = q.value.last_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("feature width {d} not divisible by {heads} heads")));
        }
        if q.value.rows() != layout.tokens() {
            return Err(Error::Shape(format!("attention: {} tokens vs layout {:?}", q.value.rows(), layout)));
        }
        let fwd = kernels::attention_fwd(q.value.data(), k.value.data(), v.value.data(), layout, heads, d);
        let out = Tensor::new(q.shape(), fwd.out)?;
        let probs = fwd.probs;
        let (qv, kv, vv) = (Arc::clone(&q.value), Arc::clone(&k.value), Arc::clone(&v.value));
        Ok(self.record(
            out,
            &[q, k, v],
            Box::new(move |g, needs| {
                let (dq, dk, dv) = kernels::attention_bwd(qv.data(), kv.data(), vv.data(), &probs, g, layout, heads, d);
                vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)]
            }),
        ))
    }

    // ------------------------------------------------------------ embeddings

    /// One-hot scatter: for every position `p` and symbol slot `c`, the output
    /// row `(p, c)` is `table[row_of_slot[c]]` when `ids[p] == c` and the slot
    /// maps to a row, zero otherwise. Output shape is `[lead.., k, d]` where
    /// `lead` multiplies to `ids.len()`.
    pub fn scatter_embed(
        &mut self,
        ids: &[usize],
        lead: &[usize],
        row_of_slot: &[Option<usize>],
        table: &Var<F>,
    ) -> Result<Var<F>> {
        let ts = table.shape();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("scatter_embed: table {:?}", ts)));
        }
        let (rows, d) = (ts[0], ts[1]);
        let k = row_of_slot.len();
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("scatter_embed: lead {lead:?} vs {} ids", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&c| c >= k) {
            return Err(Error::UnknownSymbol { symbol: bad, alphabet: k });
        }
        if row_of_slot.iter().flatten().any(|&r| r >= rows) {
            return Err(Error::Shape(format!("scatter_embed: slot map exceeds table rows {rows}")));
        }
        let tv = table.value.data();
        let mut data = vec![F::zero(); ids.len() * k * d];
        for (p, &c) in ids.iter().enumerate() {
            if let Some(r) = row_of_slot[c] {
                let o = (p * k + c) * d;
                data[o..o + d].copy_from_slice(&tv[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([k, d]);
        let out = Tensor::new(&shape, data)?;
        let ids = ids.to_vec();
        let map = row_of_slot.to_vec();
        Ok(self.record(
            out,
            &[table],
            Box::new(move |g, _| {
                let mut dt = vec![F::zero(); rows * d];
                for (p, &c) in ids.iter().enumerate() {
                    if let Some(r) = map[c] {
                        let o = (p * k + c) * d;
                        for (a, &v) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[o..o + d]) {
                            *a += v;
                        }
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Row lookup `table[ids[p]]`, shape `[lead.., d]`.
    pub fn gather_rows(&mut self, ids: &[usize], lead: &[usize], table: &Var<F>) -> Result<Var<F>> {
        let ts = table.shape();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("gather_rows: table {:?}", ts)));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&c| c >= rows) {
            return Err(Error::UnknownSymbol { symbol: bad, alphabet: rows });
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("gather_rows: lead {lead:?} vs {} ids", ids.len())));
        }
        let tv = table.value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &c in ids {
            data.extend_from_slice(&tv[c * d..(c + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let ids = ids.to_vec();
        Ok(self.record(
            out,
            &[table],
            Box::new(move |g, _| {
                let mut dt = vec![F::zero(); rows * d];
                for (p, &c) in ids.iter().enumerate() {
                    for (a, &v) in dt[c * d..(c + 1) * d].iter_mut().zip(&g[p * d..(p + 1) * d]) {
                        *a += v;
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// `x[b, i, k, d] + table[task[b], k, d]`, broadcast along positions.
    pub fn add_task_type(&mut self, x: &Var<F>, table: &Var<F>, task: &[usize]) -> Result<Var<F>> {
        let xs = x.shape();
        let ts = table.shape();
        if xs.len() != 4 || ts.len() != 3 || ts[1] != xs[2] || ts[2] != xs[3] || task.len() != xs[0] {
            return Err(Error::Shape(format!("add_task_type: x {xs:?}, table {ts:?}, {} ids", task.len())));
        }
        if let Some(&bad) = task.iter().find(|&&t| t >= ts[0]) {
            return Err(Error::UnknownTaskType { id: bad, known: ts[0] });
        }
        let (positions, kd) = (xs[1], xs[2] * xs[3]);
        let tv = table.value.data();
        let mut data = x.value.data().to_vec();
        for (b, &t) in task.iter().enumerate() {
            let row = &tv[t * kd..(t + 1) * kd];
            for i in 0..positions {
                let o = (b * positions + i) * kd;
                for (a, &v) in data[o..o + kd].iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let out = Tensor::new(xs, data)?;
        let task = task.to_vec();
        let table_len = ts[0] * kd;
        Ok(self.record(
            out,
            &[x, table],
            Box::new(move |g, needs| {
                let dt = needs[1].then(|| {
                    let mut dt = vec![F::zero(); table_len];
                    for (b, &t) in task.iter().enumerate() {
                        for i in 0..positions {
                            let o = (b * positions + i) * kd;
                            for (a, &v) in dt[t * kd..(t + 1) * kd].iter_mut().zip(&g[o..o + kd]) {
                                *a += v;
                            }
                        }
                    }
                    dt
                });
                vec![needs[0].then(|| g.to_vec()), dt]
            }),
        ))
    }

    // ------------------------------------------------------------ loss

    /// Mean softmax cross-entropy over trailing-axis rows whose `mask` is set.
    pub fn cross_entropy(&mut self, logits: &Var<F>, targets: &[usize], mask: &[bool]) -> Result<Var<F>> {
        let k = logits.value.last_dim();
        let rows = logits.value.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= k) {
            return Err(Error::UnknownSymbol { symbol: bad, alphabet: k });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Shape("cross_entropy: every position is masked out".into()));
        }
        let (loss, probs) = kernels::cross_entropy_fwd(logits.value.data(), k, targets, mask);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _| {
                let scale = g[0] / F::from_f64(count as f64);
                let mut d = probs;
                for (r, row) in d.chunks_mut(k).enumerate() {
                    if mask[r] {
                        row[targets[r]] -= F::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    } else {
                        row.iter_mut().for_each(|v| *v = F::zero());
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}
