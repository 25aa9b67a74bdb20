//! Deep-supervision training with stochastic halting.

mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{checkpoint, Arch, Batch, Model, RecurrentState};
use crate::tasks::{augment_dihedral, augment_symbols, stream_rng, Dataset, TaskRecord};
use crate::tensor::{Float, Gradients, Tape};

pub use optim::{lr_at, AdamW, AdamWConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    /// Cosine horizon in optimizer steps.
    pub decay_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub halting_p: f64,
    pub seed: u64,
    pub grad_precision: Precision,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: u64,
    /// Evaluate every this many epochs (0 = only at the end).
    pub eval_every: usize,
    /// Inference segments used by periodic evaluation.
    pub eval_steps: usize,
    pub augment_dihedral: bool,
    pub augment_symbols: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            warmup_steps: 100,
            schedule: Schedule::WarmupConstant,
            decay_steps: 10_000,
            batch_size: 32,
            epochs: 10,
            halting_p: 0.05,
            seed: 0,
            grad_precision: Precision::F32,
            max_steps: 0,
            eval_every: 0,
            eval_steps: 16,
            augment_dihedral: false,
            augment_symbols: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.halting_p) {
            return bad(format!("halting_p {} outside [0, 1)", self.halting_p));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1) and weight_decay must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Halting draw after supervision step `step` (1-based): always true at
/// `max_steps`, otherwise true with probability `p`.
pub fn sample_halt<R: Rng + ?Sized>(rng: &mut R, p: f64, step: usize, max_steps: usize) -> bool {
    step >= max_steps || rng.gen_bool(p.clamp(0.0, 1.0))
}

/// Losses and halting flags of one batch's supervision segments.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SupervisionTrace {
    pub losses: Vec<f64>,
    pub halted: Vec<bool>,
    pub steps_executed: usize,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub segments: usize,
    pub elapsed_s: f64,
}

/// Loss, gradients and next state of one segment on a model of precision `G`.
fn segment_at<G: Float>(
    model: &Model<G>,
    batch: &Batch,
    state: RecurrentState<G>,
) -> Result<(f64, Gradients<G>, RecurrentState<G>)> {
    let targets = batch.targets.as_ref().ok_or_else(|| Error::Config("training batch has no targets".into()))?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (next, logits) = model.segment(&mut tape, &bound, batch, state)?;
    let mask = vec![true; targets.len()];
    let loss = tape.cross_entropy(&logits, targets, &mask)?;
    let value = loss.value().data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let grads = tape.backward(&loss)?;
    Ok((value, grads, next))
}

/// Checks that `data` is written in an alphabet the model can consume.
pub fn check_dataset<F: Float>(model: &Model<F>, data: &Dataset) -> Result<()> {
    let data_alpha = data.symbol_alphabet();
    let model_alpha = model.alphabet();
    if model_alpha.num_special() != data_alpha.num_special() {
        return Err(Error::Config(format!(
            "model has {} special symbols, {} data has {}",
            model_alpha.num_special(),
            data.kind,
            data_alpha.num_special()
        )));
    }
    if model.config().arch == Arch::VanillaRrm && data.alphabet > model_alpha.len() {
        return Err(Error::UnseenSymbols { data: data.alphabet, model: model_alpha.len() });
    }
    Ok(())
}

pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(mut model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config_mut().halting_p = config.halting_p;
        let opt = AdamW::new(config.adamw());
        Ok(Self { model, opt, config, epoch: 0 })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.opt.t
    }

    /// Learning rate of the next optimizer step.
    pub fn next_lr(&self) -> f64 {
        let c = &self.config;
        lr_at(self.opt.t + 1, c.lr, c.warmup_steps, c.schedule, c.decay_steps)
    }

    /// Loss, gradients and detached next state without touching parameters.
    pub fn segment_gradients(
        &self,
        batch: &Batch,
        state: RecurrentState<f32>,
    ) -> Result<(f64, Gradients<f32>, RecurrentState<f32>)> {
        match self.config.grad_precision {
            Precision::F32 => segment_at(&self.model, batch, state),
            Precision::F64 => {
                let wide = self.model.cast::<f64>();
                let state = RecurrentState { y: state.y.cast(), z: state.z.cast() };
                let (loss, grads, next) = segment_at(&wide, batch, state)?;
                let grads = grads.into_iter().map(|(k, g)| (k, g.cast())).collect();
                Ok((loss, grads, RecurrentState { y: next.y.cast(), z: next.z.cast() }))
            }
        }
    }

    /// Forward, backward through the last outer cycle, one optimizer step.
    pub fn supervision_segment(&mut self, batch: &Batch, state: RecurrentState<f32>) -> Result<(f64, RecurrentState<f32>)> {
        let (loss, grads, next) = self.segment_gradients(batch, state)?;
        let lr = self.next_lr();
        self.opt.step(self.model.params_mut(), &grads, lr)?;
        Ok((loss, next))
    }

    /// Supervision segments on one batch until the halting draw fires.
    pub fn train_batch<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<SupervisionTrace> {
        let max = self.model.config().max_supervision_steps;
        let mut state = self.model.initial_state(batch)?;
        let mut trace = SupervisionTrace::default();
        for step in 1..=max {
            if self.capped() {
                break;
            }
            let (loss, next) = self.supervision_segment(batch, state)?;
            state = next;
            let halt = sample_halt(rng, self.config.halting_p, step, max);
            trace.losses.push(loss);
            trace.halted.push(halt);
            trace.steps_executed = step;
            if halt {
                break;
            }
        }
        Ok(trace)
    }

    fn capped(&self) -> bool {
        self.config.max_steps > 0 && self.opt.t >= self.config.max_steps
    }

    fn augment<R: Rng + ?Sized>(&self, rec: &TaskRecord, data: &Dataset, rng: &mut R) -> Result<TaskRecord> {
        let mut out = rec.clone();
        if self.config.augment_dihedral && data.size == data.width {
            out = augment_dihedral(&out, rng.gen_range(0..8))?;
        }
        if self.config.augment_symbols {
            let specials = data.symbol_alphabet().num_special();
            let mut rho: Vec<usize> = (0..data.alphabet).collect();
            rho[specials..].shuffle(rng);
            out = augment_symbols(&out, &rho, specials)?;
        }
        Ok(out)
    }

    /// One pass over `data` in a seed-and-epoch-determined order.
    pub fn train_epoch(&mut self, data: &Dataset, mut on_batch: impl FnMut(&Self, &SupervisionTrace)) -> Result<()> {
        let mut rng = stream_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..data.records.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(self.config.batch_size) {
            if self.capped() {
                break;
            }
            let recs = chunk.iter().map(|&i| self.augment(&data.records[i], data, &mut rng)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TaskRecord> = recs.iter().collect();
            let batch = Batch::from_records(&refs, data.alphabet)?;
            let trace = self.train_batch(&batch, &mut rng)?;
            on_batch(self, &trace);
        }
        self.epoch += 1;
        Ok(())
    }

    fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("train_step".to_string(), self.opt.t.to_string());
        m.insert("train_epoch".to_string(), self.epoch.to_string());
        m.insert("train_seed".to_string(), self.config.seed.to_string());
        m
    }

    /// Writes `<stem>.ckpt` and the optimizer moments to `<stem>.opt`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}.ckpt"));
        checkpoint::save(&path, &self.model, &self.manifest())?;
        fs::write(dir.join(format!("{stem}.opt")), self.opt.to_bytes())?;
        Ok(path)
    }

    /// Continues from a checkpoint; the optimizer state is read from the
    /// sibling `.opt` file when present.
    pub fn resume(ckpt: &Path, config: TrainConfig) -> Result<Self> {
        let (model, meta) = checkpoint::load(ckpt)?;
        let mut t = Trainer::new(model, config)?;
        let opt_path = ckpt.with_extension("opt");
        if opt_path.exists() {
            t.opt = AdamW::from_bytes(&fs::read(&opt_path)?, t.config.adamw())?;
        }
        let num = |k: &str| meta.get(k).and_then(|v| v.parse::<u64>().ok());
        if let Some(step) = num("train_step") {
            t.opt.t = step;
        }
        t.epoch = num("train_epoch").unwrap_or(0) as usize;
        Ok(t)
    }
}

/// Where and how `train` reports progress.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub eval_data: Option<&'a Dataset>,
    /// Receives `latest.ckpt`, `best.ckpt` and their optimizer files.
    pub out_dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub best_fsr: Option<f64>,
    pub evals: Vec<(u64, EvalReport)>,
    pub elapsed_s: f64,
}

/// Runs the remaining epochs of `trainer.config`, evaluating and
/// checkpointing as configured.
pub fn train(trainer: &mut Trainer, data: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainSummary> {
    if data.records.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    check_dataset(&trainer.model, data)?;
    if let Some(ev) = opts.eval_data {
        check_dataset(&trainer.model, ev)?;
    }
    let start = Instant::now();
    let mut summary =
        TrainSummary { steps: 0, epochs: 0, final_loss: None, best_fsr: None, evals: Vec::new(), elapsed_s: 0.0 };
    let mut log_err: Option<std::io::Error> = None;
    let do_eval = |trainer: &Trainer, summary: &mut TrainSummary| -> Result<()> {
        let Some(ev) = opts.eval_data else { return Ok(()) };
        let report = eval::evaluate(&trainer.model, ev, trainer.config.eval_steps)?;
        let better = summary.best_fsr.is_none_or(|b| report.fsr.point > b);
        if better {
            summary.best_fsr = Some(report.fsr.point);
            if let Some(dir) = opts.out_dir {
                trainer.save(dir, "best")?;
            }
        }
        summary.evals.push((trainer.step(), report));
        Ok(())
    };
    while trainer.epoch < trainer.config.epochs && !trainer.capped() {
        let epoch = trainer.epoch;
        let log = &mut opts.log;
        trainer.train_epoch(data, |t, trace| {
            let line = LogLine {
                step: t.step(),
                epoch,
                lr: lr_at(t.step().max(1), t.config.lr, t.config.warmup_steps, t.config.schedule, t.config.decay_steps),
                loss: trace.losses.last().copied().unwrap_or(f64::NAN),
                segments: trace.steps_executed,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            summary.final_loss = trace.losses.last().copied().or(summary.final_loss);
            if let Some(w) = log.as_mut() {
                let res = serde_json::to_string(&line).map(|s| writeln!(w, "{s}"));
                if let Ok(Err(e)) = res {
                    log_err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = log_err.take() {
            return Err(e.into());
        }
        summary.epochs += 1;
        if trainer.config.eval_every > 0 && trainer.epoch.is_multiple_of(trainer.config.eval_every) {
            do_eval(trainer, &mut summary)?;
        }
        if let Some(dir) = opts.out_dir {
            trainer.save(dir, "latest")?;
        }
    }
    let evaluated_last = summary.evals.last().is_some_and(|(s, _)| *s == trainer.step());
    if !evaluated_last {
        do_eval(trainer, &mut summary)?;
    }
    if let Some(dir) = opts.out_dir {
        trainer.save(dir, "latest")?;
    }
    summary.steps = trainer.step();
    summary.elapsed_s = start.elapsed().as_secs_f64();
    Ok(summary)
}
