//! Metrics, confidence intervals, inference sweeps and equivariance audits.

mod audit;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::par;
use crate::tasks::{Dataset, TaskKind, TaskRecord};
use crate::tensor::{Float, Tape};

pub use audit::{audit_position_equivariance, audit_symbol_equivariance, AuditMode, AuditReport};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959964;

/// Tokens per inference batch; bounds memory on large grids.
const TOKENS_PER_BATCH: usize = 8192;

/// Fraction of records whose prediction matches the target at every position.
pub fn fsr(preds: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
    let (solved, n) = fsr_counts(preds, targets)?;
    if n == 0 {
        return Err(Error::Metric("no records".into()));
    }
    Ok(solved as f64 / n as f64)
}

fn fsr_counts(preds: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<(usize, usize)> {
    if preds.len() != targets.len() {
        return Err(Error::Metric(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut solved = 0;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Metric(format!("record of {} cells predicted with {}", t.len(), p.len())));
        }
        solved += usize::from(p == t);
    }
    Ok((solved, preds.len()))
}

/// Correct unfilled cells over all unfilled cells, pooled across records.
/// `given[r][i]` marks cells that were part of the input.
pub fn gpa(preds: &[Vec<usize>], targets: &[Vec<usize>], given: &[Vec<bool>]) -> Result<f64> {
    let (correct, total) = gpa_counts(preds, targets, given)?;
    Ok(correct as f64 / total as f64)
}

fn gpa_counts(preds: &[Vec<usize>], targets: &[Vec<usize>], given: &[Vec<bool>]) -> Result<(usize, usize)> {
    fsr_counts(preds, targets)?;
    if given.len() != targets.len() || given.iter().zip(targets).any(|(g, t)| g.len() != t.len()) {
        return Err(Error::Metric("given mask does not match the targets".into()));
    }
    let (mut correct, mut total) = (0, 0);
    for ((p, t), g) in preds.iter().zip(targets).zip(given) {
        for i in 0..t.len() {
            if !g[i] {
                total += 1;
                correct += usize::from(p[i] == t[i]);
            }
        }
    }
    if total == 0 {
        return Err(Error::Metric("no unfilled cells to score".into()));
    }
    Ok((correct, total))
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_ci(successes: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Metric("Wilson interval needs n ≥ 1".into()));
    }
    if successes > n {
        return Err(Error::Metric(format!("{successes} successes out of {n}")));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    // The interval always contains `p`; the clamps absorb rounding at 0 and 1.
    Ok(((center - half).clamp(0.0, p), (center + half).clamp(p, 1.0)))
}

/// A proportion with its 95% Wilson interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub successes: usize,
    pub n: usize,
}

impl Interval {
    pub fn new(successes: usize, n: usize) -> Result<Self> {
        let (lo, hi) = wilson_ci(successes, n, Z95)?;
        Ok(Self { point: successes as f64 / n as f64, lo, hi, successes, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub steps: usize,
    pub fsr: f64,
    pub fsr_lo: f64,
    pub fsr_hi: f64,
    pub gpa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_puzzles: usize,
    pub n_unfilled_cells: usize,
    /// Inference segments used for `fsr` and `gpa`.
    pub steps: usize,
    pub fsr: Interval,
    pub gpa: Interval,
    /// GPA counts cells across all records rather than averaging per record.
    pub gpa_pooling: String,
    pub sweep: Vec<SweepRow>,
    pub equivariance: Option<AuditReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn summary(&self) -> String {
        format!(
            "puzzles={} steps={} FSR={:.2}% [{:.2}, {:.2}] GPA={:.2}% [{:.2}, {:.2}] over {} unfilled cells",
            self.n_puzzles,
            self.steps,
            100.0 * self.fsr.point,
            100.0 * self.fsr.lo,
            100.0 * self.fsr.hi,
            100.0 * self.gpa.point,
            100.0 * self.gpa.lo,
            100.0 * self.gpa.hi,
            self.n_unfilled_cells
        )
    }
}

/// Cells that count toward GPA: blanks for Sudoku, every cell otherwise.
pub fn given_mask(kind: TaskKind, rec: &TaskRecord) -> Vec<bool> {
    match kind {
        TaskKind::Sudoku => rec.input.iter().map(|&c| c != 0).collect(),
        TaskKind::Recolor => vec![false; rec.input.len()],
    }
}

fn batches(data: &Dataset) -> Vec<Vec<&TaskRecord>> {
    let per = (TOKENS_PER_BATCH / (data.positions() * data.alphabet).max(1)).max(1);
    data.records.chunks(per).map(|c| c.iter().collect()).collect()
}

/// Argmax predictions after each budget in ascending `budgets`, carrying the
/// recurrent state from one budget to the next.
pub fn predict_budgets<F: Float>(model: &Model<F>, batch: &Batch, budgets: &[usize]) -> Result<Vec<Vec<usize>>> {
    if budgets.windows(2).any(|w| w[0] > w[1]) || budgets.first() == Some(&0) {
        return Err(Error::Config("budgets must be ascending and ≥ 1".into()));
    }
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let mut state = model.initial_state(batch)?;
    let mut done = 0;
    let mut out = Vec::with_capacity(budgets.len());
    let mut last = None;
    for &b in budgets {
        while done < b {
            let (next, logits) = model.segment(&mut tape, &bound, batch, state)?;
            state = next;
            last = Some(logits.into_tensor());
            done += 1;
        }
        let logits = last.as_ref().expect("budget ≥ 1");
        if !logits.is_finite() {
            return Err(Error::NonFinite("inference produced non-finite logits".into()));
        }
        out.push(logits.argmax_rows());
    }
    Ok(out)
}

/// Predictions for every record at every budget: `[budget][record][cell]`.
pub fn predict_dataset<F: Float>(model: &Model<F>, data: &Dataset, budgets: &[usize]) -> Result<Vec<Vec<Vec<usize>>>> {
    let groups = batches(data);
    let per_batch = par::map_slice(&groups, |recs| {
        let batch = Batch::from_records(recs, data.alphabet)?;
        model.check_batch(&batch)?;
        predict_budgets(model, &batch, budgets)
    });
    let mut out = vec![Vec::with_capacity(data.records.len()); budgets.len()];
    for res in per_batch {
        for (slot, flat) in out.iter_mut().zip(res?) {
            slot.extend(flat.chunks(data.positions()).map(<[usize]>::to_vec));
        }
    }
    Ok(out)
}

fn score(data: &Dataset, preds: &[Vec<usize>]) -> Result<(Interval, Interval)> {
    let targets: Vec<Vec<usize>> = data.records.iter().map(|r| r.solution.clone()).collect();
    let given: Vec<Vec<bool>> = data.records.iter().map(|r| given_mask(data.kind, r)).collect();
    let (solved, n) = fsr_counts(preds, &targets)?;
    let (correct, total) = gpa_counts(preds, &targets, &given)?;
    Ok((Interval::new(solved, n)?, Interval::new(correct, total)?))
}

/// FSR and GPA after `steps` inference segments.
pub fn evaluate<F: Float>(model: &Model<F>, data: &Dataset, steps: usize) -> Result<EvalReport> {
    if data.records.is_empty() {
        return Err(Error::Metric("evaluation dataset is empty".into()));
    }
    let preds = predict_dataset(model, data, &[steps.max(1)])?.remove(0);
    let (fsr, gpa) = score(data, &preds)?;
    Ok(EvalReport {
        n_puzzles: data.records.len(),
        n_unfilled_cells: gpa.n,
        steps: steps.max(1),
        fsr,
        gpa,
        gpa_pooling: "pooled".into(),
        sweep: Vec::new(),
        equivariance: None,
    })
}

/// FSR/GPA at each step budget, computed in one incremental pass.
pub fn scaling_sweep<F: Float>(model: &Model<F>, data: &Dataset, steps_list: &[usize]) -> Result<Vec<SweepRow>> {
    if steps_list.is_empty() {
        return Err(Error::Config("steps list is empty".into()));
    }
    if steps_list.contains(&0) {
        return Err(Error::Config("step budgets must be ≥ 1".into()));
    }
    let mut budgets = steps_list.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let preds = predict_dataset(model, data, &budgets)?;
    let mut rows = Vec::with_capacity(steps_list.len());
    for &s in steps_list {
        let idx = budgets.binary_search(&s).expect("budget present");
        let (f, g) = score(data, &preds[idx])?;
        rows.push(SweepRow { steps: s, fsr: f.point, fsr_lo: f.lo, fsr_hi: f.hi, gpa: g.point });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("step,fsr,fsr_lo,fsr_hi,gpa\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", r.steps, r.fsr, r.fsr_lo, r.fsr_hi, r.gpa));
    }
    s
}
