//! `serrm`: dataset generation, training, evaluation, sweeps, equivariance
//! audits and the Sudoku oracle.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric abort, 4 audit failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serrm::config::RunConfig;
use serrm::eval::{self, AuditMode, AuditReport};
use serrm::model::{checkpoint, Arch, Model};
use serrm::par;
use serrm::tasks::{read_dataset, read_hrm81, solve_sudoku, write_dataset, Dataset, SudokuGrid, TaskKind};
use serrm::train::{self, TrainOptions, Trainer};

#[derive(Parser, Debug)]
#[command(name = "serrm", version, about = "Symbol-equivariant recurrent reasoning models")]
struct Cli {
    /// Worker threads; 1 makes every command bitwise deterministic.
    #[arg(long, global = true, env = "SERRM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Sudoku or recolor dataset.
    Gen(GenArgs),
    /// Train a model with deep supervision.
    Train(TrainArgs),
    /// Evaluate a checkpoint (FSR/GPA with Wilson intervals).
    Eval(EvalArgs),
    /// FSR/GPA as a function of inference steps.
    Sweep(SweepArgs),
    /// Empirical symbol or position equivariance audit.
    Audit(AuditArgs),
    /// Solve a Sudoku grid with the exact backtracking oracle.
    Solve(SolveArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataFormat {
    Native,
    Hrm81,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "native")]
    format: DataFormat,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    task: TaskKind,
    /// Grid side (sudoku: 4, 9, 16 or 25).
    #[arg(long, default_value_t = 4)]
    size: usize,
    /// Puzzles (sudoku) or task families (recolor).
    #[arg(long)]
    count: usize,
    #[arg(long)]
    holes_min: Option<usize>,
    #[arg(long)]
    holes_max: Option<usize>,
    /// Recolor: alphabet size K.
    #[arg(long, default_value_t = 6)]
    colors: usize,
    /// Recolor: colors allowed in scenes, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    palette: Option<Vec<usize>>,
    /// Recolor: sibling examples per task id.
    #[arg(long, default_value_t = 4)]
    examples_per_task: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Held-out set for periodic evaluation and best-checkpoint selection.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Any config key, e.g. `--set d_model=32`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
    steps: Vec<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Checkpoint to audit; without it a fresh model is built from `--config`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: AuditMode,
    /// Inputs drawn from this dataset; otherwise random grids of `--size`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    inputs: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    segments: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Comma-separated cells, row-major, 0 for blanks.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    size: usize,
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: serrm::Error| e.to_string())
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: serrm::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AuditMode, String> {
    s.parse().map_err(|e: serrm::Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(serrm::Error),
    Audit(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(serrm::Error::Config(_)) => 1,
            Failure::Core(_) => 2,
            Failure::Audit(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Audit(m) => write!(f, "audit failed: {m}"),
        }
    }
}

impl From<serrm::Error> for Failure {
    fn from(e: serrm::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn load_data(args: &DataArgs) -> Result<Dataset, Failure> {
    Ok(match args.format {
        DataFormat::Native => read_dataset(&args.data)?,
        DataFormat::Hrm81 => read_hrm81(&fs::read_to_string(&args.data)?)?,
    })
}

fn load_model(path: &Path) -> Result<Model<f32>, Failure> {
    Ok(checkpoint::load(path)?.0)
}

fn apply_sets(config: &mut RunConfig, sets: &[String]) -> Outcome {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> Outcome {
    let ds = match a.task {
        TaskKind::Sudoku => {
            SudokuGrid::box_side(a.size).map_err(|e| Failure::Usage(e.to_string()))?;
            let cells = a.size * a.size;
            let (lo, hi) = if a.size == 4 { (6, 12) } else { (cells / 2, cells * 3 / 4) };
            let (ds, summary) =
                Dataset::generate_sudoku(a.size, a.count, a.holes_min.unwrap_or(lo), a.holes_max.unwrap_or(hi), a.seed)?;
            println!(
                "generated {} puzzles, mean holes {:.2}, short {}, oracle verified: {}",
                summary.count, summary.mean_holes, summary.short, summary.oracle_verified
            );
            if !summary.oracle_verified {
                return Err(Failure::Core(serrm::Error::Generation("oracle rejected a generated puzzle".into())));
            }
            ds
        }
        TaskKind::Recolor => {
            let palette = a.palette.unwrap_or_else(|| (0..a.colors).collect());
            let ds = Dataset::generate_recolor(a.colors, &palette, a.count, a.examples_per_task, a.seed)?;
            println!("generated {} recolor records over {} task ids", ds.records.len(), a.count);
            ds
        }
    };
    write_dataset(&a.out, &ds)?;
    Ok(())
}

fn run_train(a: TrainArgs) -> Outcome {
    let mut config = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    apply_sets(&mut config, &a.sets)?;
    if let Some(arch) = a.arch {
        config.model.arch = arch;
    }
    let t = &mut config.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_steps = a.max_steps.unwrap_or(t.max_steps);
    let data = load_data(&a.data)?;
    if config.model.rope.mode != serrm::tensor::nn::RopeMode::None {
        config.model.rope.grid_width = data.width;
    }
    config.validate()?;
    let eval_data = a.eval_data.as_deref().map(read_dataset).transpose()?;
    fs::create_dir_all(&a.out)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt, config.train.clone())?;
            config.model = t.model.config().clone();
            t
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            let model = Model::new(config.model.clone(), data.symbol_alphabet(), &mut rng)?;
            Trainer::new(model, config.train.clone())?
        }
    };
    fs::write(a.out.join("config.txt"), config.to_text())?;
    eprintln!("resolved config:\n{}", config.to_text());
    let mut log = fs::OpenOptions::new().create(true).append(true).open(a.out.join("train_log.jsonl"))?;
    let opts = TrainOptions { eval_data: eval_data.as_ref(), out_dir: Some(&a.out), log: Some(&mut log) };
    let summary = train::train(&mut trainer, &data, opts)?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; final loss {:?}; best FSR {:?}",
        summary.steps, summary.epochs, summary.elapsed_s, summary.final_loss, summary.best_fsr
    );
    for (step, r) in &summary.evals {
        println!("step {step}: {}", r.summary());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let report = eval::evaluate(&model, &data, a.steps)?;
    println!("{}", report.summary());
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()?)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Outcome {
    let model = load_model(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let rows = eval::scaling_sweep(&model, &data, &a.steps)?;
    let csv = eval::sweep_csv(&rows);
    print!("{csv}");
    if let Some(p) = &a.csv {
        fs::write(p, &csv)?;
    }
    Ok(())
}

fn audit_inputs(a: &AuditArgs) -> Result<(Vec<Vec<usize>>, usize, usize), Failure> {
    if let Some(p) = &a.data {
        let ds = read_dataset(p)?;
        let inputs = ds.records.iter().take(a.inputs).map(|r| r.input.clone()).collect();
        return Ok((inputs, ds.alphabet, ds.width));
    }
    let symbols = a.size + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed);
    let inputs = (0..a.inputs).map(|_| (0..a.size * a.size).map(|_| rng.gen_range(0..symbols)).collect()).collect();
    Ok((inputs, symbols, a.size))
}

fn run_audit(a: AuditArgs) -> Outcome {
    let model = match &a.ckpt {
        Some(p) => load_model(p)?,
        None => {
            let mut config = match &a.config {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            apply_sets(&mut config, &a.sets)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            Model::new(config.model, serrm::model::SymbolAlphabet::sudoku(a.size), &mut rng)?
        }
    };
    let (inputs, symbols, width) = audit_inputs(&a)?;
    if inputs.is_empty() {
        return Err(Failure::Usage("no audit inputs".into()));
    }
    let report: AuditReport = match a.mode {
        AuditMode::Symbol => eval::audit_symbol_equivariance(&model, &inputs, symbols, width, a.trials, a.segments, a.seed)?,
        AuditMode::Position => eval::audit_position_equivariance(&model, &inputs, symbols, width, a.trials, a.segments, a.seed)?,
    };
    let json = serde_json::to_string_pretty(&report).map_err(serrm::Error::from)?;
    if let Some(p) = &a.json {
        fs::write(p, &json)?;
    }
    println!(
        "{} audit: {} trials, max logit deviation {:.3e}, argmax mismatches {}, equivariant by construction: {}",
        report.mode, report.trials, report.max_logit_deviation, report.argmax_mismatch_count, report.expected_equivariant
    );
    if report.passes(a.tol) {
        Ok(())
    } else {
        Err(Failure::Audit(format!("max deviation {:.3e} exceeds tolerance {:.1e}", report.max_logit_deviation, a.tol)))
    }
}

fn run_solve(a: SolveArgs) -> Outcome {
    let cells = a
        .grid
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(format!("malformed grid: {e}")))?;
    if cells.len() != a.size * a.size {
        return Err(Failure::Usage(format!("grid has {} cells, expected {}", cells.len(), a.size * a.size)));
    }
    let grid = SudokuGrid::from_side(a.size, cells).map_err(|e| Failure::Usage(e.to_string()))?;
    if !grid.is_valid() {
        println!("infeasible");
        return Ok(());
    }
    let out = solve_sudoku(&grid, 2)?;
    match (out.count, out.first) {
        (0, _) | (_, None) => println!("infeasible"),
        (1, Some(sol)) => {
            let text: Vec<String> = sol.cells().iter().map(usize::to_string).collect();
            println!("{}", text.join(","));
        }
        _ => println!("multiple solutions (≥2)"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        par::set_threads(n);
    }
    let result = par::install(|| match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Audit(a) => run_audit(a),
        Command::Solve(a) => run_solve(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
