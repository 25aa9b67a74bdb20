//! Empirical equivariance audits.
//!
//! Symbol audit: with `X' = ρ(X)` (specials fixed) the logits must satisfy
//! `L(X')[i, ρ(c)] = L(X)[i, c]`. Position audit: with `X'[p] = X[π(p)]`
//! they must satisfy `L(X')[p, c] = L(X)[π(p), c]`.

use std::fmt;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Arch, Batch, EmbeddingMode, Model};
use crate::par;
use crate::tasks::stream_rng;
use crate::tensor::nn::RopeMode;
use crate::tensor::{Float, Tensor};

/// Trials evaluated per forward batch.
const TRIALS_PER_BATCH: usize = 10;

/// Reference logits this close to the row maximum count as tied argmaxes.
/// Symbols absent from an input receive identical logits.
const TIE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditMode {
    Symbol,
    Position,
}

impl fmt::Display for AuditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditMode::Symbol => "symbol",
            AuditMode::Position => "position",
        })
    }
}

impl std::str::FromStr for AuditMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symbol" => Ok(AuditMode::Symbol),
            "position" => Ok(AuditMode::Position),
            other => Err(Error::Config(format!("unknown audit mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub mode: AuditMode,
    pub trials: usize,
    pub max_logit_deviation: f64,
    pub argmax_mismatch_count: usize,
    /// Max deviation of each trial.
    pub deviations: Vec<f64>,
    /// Whether the architecture is equivariant by construction under this
    /// mode; false for intentionally broken controls.
    pub expected_equivariant: bool,
}

impl AuditReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_logit_deviation <= tol && self.argmax_mismatch_count == 0
    }

    /// Trials whose deviation exceeds `threshold`.
    pub fn trials_above(&self, threshold: f64) -> usize {
        self.deviations.iter().filter(|&&d| d > threshold).count()
    }
}

/// For trial `t`, where reference logit `(p, c)` must reappear.
type Conjugate<'a> = dyn Fn(usize, usize, usize) -> (usize, usize) + Sync + 'a;
type Transform<'a> = dyn Fn(&[usize], &[usize]) -> Vec<usize> + Sync + 'a;

fn logits_of<F: Float>(model: &Model<F>, inputs: &[Vec<usize>], symbols: usize, width: usize, segments: usize) -> Result<Tensor<F>> {
    let positions = inputs[0].len();
    let flat = inputs.iter().flatten().copied().collect();
    let batch = Batch::new(inputs.len(), positions, symbols, width, flat, None, None)?;
    model.logits(&batch, segments)
}

#[allow(clippy::too_many_arguments)]
fn run_audit<F: Float>(
    model: &Model<F>,
    inputs: &[Vec<usize>],
    symbols: usize,
    width: usize,
    trials: usize,
    segments: usize,
    perms: &[Vec<usize>],
    transform: &Transform<'_>,
    conj: &Conjugate<'_>,
) -> Result<(f64, usize, Vec<f64>)> {
    if inputs.is_empty() || trials == 0 {
        return Err(Error::Config("audit needs at least one input and one trial".into()));
    }
    let positions = inputs[0].len();
    if inputs.iter().any(|x| x.len() != positions) {
        return Err(Error::Shape("audit inputs must share a geometry".into()));
    }
    let base = logits_of(model, inputs, symbols, width, segments)?;
    let kout = base.last_dim();
    let per_input = positions * kout;
    let chunks: Vec<Vec<usize>> = (0..trials).collect::<Vec<_>>().chunks(TRIALS_PER_BATCH).map(<[usize]>::to_vec).collect();
    let results = par::map_slice(&chunks, |ids| -> Result<Vec<(f64, usize)>> {
        let moved: Vec<Vec<usize>> = ids.iter().map(|&t| transform(&inputs[t % inputs.len()], &perms[t])).collect();
        let out = logits_of(model, &moved, symbols, width, segments)?;
        let mut stats = Vec::with_capacity(ids.len());
        for (j, &t) in ids.iter().enumerate() {
            let reference = &base.data()[(t % inputs.len()) * per_input..][..per_input];
            let got = &out.data()[j * per_input..][..per_input];
            let mut dev = 0.0f64;
            let mut mismatches = 0;
            for p in 0..positions {
                let row = &reference[p * kout..(p + 1) * kout];
                let top = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).as_f64();
                let mut moved_best = (0, f64::NEG_INFINITY);
                for (c, &r) in row.iter().enumerate() {
                    let (pp, cc) = conj(t, p, c);
                    let g = got[pp * kout + cc].as_f64();
                    dev = dev.max((r.as_f64() - g).abs());
                    if g > moved_best.1 {
                        moved_best = (c, g);
                    }
                }
                // The moved argmax, pulled back, must be one of the reference maxima.
                mismatches += usize::from(top - row[moved_best.0].as_f64() > TIE_TOLERANCE);
            }
            stats.push((dev, mismatches));
        }
        Ok(stats)
    });
    let mut deviations = Vec::with_capacity(trials);
    let mut mismatches = 0;
    for r in results {
        for (d, m) in r? {
            deviations.push(d);
            mismatches += m;
        }
    }
    let max = deviations.iter().copied().fold(0.0, f64::max);
    Ok((max, mismatches, deviations))
}

/// Random relabelings of the usual symbols on `inputs`, trial `t` using
/// input `t mod n` and a permutation drawn from stream `(seed, t)`.
pub fn audit_symbol_equivariance<F: Float>(
    model: &Model<F>,
    inputs: &[Vec<usize>],
    symbols: usize,
    width: usize,
    trials: usize,
    segments: usize,
    seed: u64,
) -> Result<AuditReport> {
    let specials = model.alphabet().num_special();
    if symbols <= specials {
        return Err(Error::Config("no usual symbols to permute".into()));
    }
    let perms: Vec<Vec<usize>> = (0..trials)
        .map(|t| {
            let mut rho: Vec<usize> = (0..symbols).collect();
            rho[specials..].shuffle(&mut stream_rng(seed, t));
            rho
        })
        .collect();
    let relabel = |x: &[usize], rho: &[usize]| x.iter().map(|&c| rho[c]).collect();
    let conj = |t: usize, p: usize, c: usize| (p, perms[t][c]);
    let (max, mism, devs) = run_audit(model, inputs, symbols, width, trials, segments, &perms, &relabel, &conj)?;
    let c = model.config();
    Ok(AuditReport {
        mode: AuditMode::Symbol,
        trials,
        max_logit_deviation: max,
        argmax_mismatch_count: mism,
        deviations: devs,
        expected_equivariant: c.arch == Arch::SeRrm
            && c.embedding_mode == EmbeddingMode::Equivariant
            && c.num_task_types == 0,
    })
}

/// Random position permutations of `inputs`.
pub fn audit_position_equivariance<F: Float>(
    model: &Model<F>,
    inputs: &[Vec<usize>],
    symbols: usize,
    width: usize,
    trials: usize,
    segments: usize,
    seed: u64,
) -> Result<AuditReport> {
    let positions = inputs.first().map_or(0, Vec::len);
    let perms: Vec<Vec<usize>> = (0..trials)
        .map(|t| {
            let mut pi: Vec<usize> = (0..positions).collect();
            pi.shuffle(&mut stream_rng(seed, t));
            pi
        })
        .collect();
    // X'[q] = X[π(q)], so reference position p shows up at q = π⁻¹(p).
    let inverses: Vec<Vec<usize>> = perms
        .iter()
        .map(|pi| {
            let mut inv = vec![0; pi.len()];
            for (q, &p) in pi.iter().enumerate() {
                inv[p] = q;
            }
            inv
        })
        .collect();
    let permute = |x: &[usize], pi: &[usize]| pi.iter().map(|&s| x[s]).collect();
    let conj = |t: usize, p: usize, c: usize| (inverses[t][p], c);
    let (max, mism, devs) = run_audit(model, inputs, symbols, width, trials, segments, &perms, &permute, &conj)?;
    Ok(AuditReport {
        mode: AuditMode::Position,
        trials,
        max_logit_deviation: max,
        argmax_mismatch_count: mism,
        deviations: devs,
        expected_equivariant: model.config().rope.mode == RopeMode::None,
    })
}
