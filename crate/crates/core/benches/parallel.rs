//! Sequential (`threads=1`) against rayon (`threads=0`, the global pool) on
//! the hot paths: one inference segment, one training segment and puzzle
//! generation. Building with `--no-default-features` turns both arms into
//! the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serrm::model::{Batch, Model, ModelConfig};
use serrm::par;
use serrm::tasks::Dataset;
use serrm::train::{TrainConfig, Trainer};

const ARMS: [(&str, usize); 2] = [("sequential", 1), ("rayon", 0)];

fn fixture() -> (Model<f32>, Batch) {
    let (data, _) = Dataset::generate_sudoku(4, 32, 6, 12, 1).unwrap();
    let model = Model::new(ModelConfig::default(), data.symbol_alphabet(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let refs: Vec<_> = data.records.iter().collect();
    (model, Batch::from_records(&refs, data.alphabet).unwrap())
}

fn inference(c: &mut Criterion) {
    let (model, batch) = fixture();
    let mut g = c.benchmark_group("inference_segment");
    g.sample_size(10);
    for (name, threads) in ARMS {
        par::set_threads(threads);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::install(|| model.logits(&batch, 1).unwrap()))
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (model, batch) = fixture();
    let trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let state = trainer.model.initial_state(&batch).unwrap();
    let mut g = c.benchmark_group("training_segment");
    g.sample_size(10);
    for (name, threads) in ARMS {
        par::set_threads(threads);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::install(|| trainer.segment_gradients(&batch, state.clone()).unwrap()))
        });
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_9x9");
    g.sample_size(10);
    for (name, threads) in ARMS {
        par::set_threads(threads);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::install(|| Dataset::generate_sudoku(9, 8, 40, 50, 3).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, inference, training, generation);
criterion_main!(benches);
