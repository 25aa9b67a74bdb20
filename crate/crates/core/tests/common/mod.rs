#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serrm::model::{Arch, Batch, EmbeddingMode, Model, ModelConfig, RecurrentState, SymbolAlphabet};
use serrm::tensor::nn::RopeSpec;
use serrm::tensor::Tape;

/// Loss of one segment from `state`; with `grads` also the parameter gradients.
pub fn segment_loss(
    model: &Model<f64>,
    batch: &Batch,
    state: &RecurrentState<f64>,
    grads: bool,
) -> (f64, Option<serrm::tensor::Gradients<f64>>) {
    let mut tape = if grads { Tape::new() } else { Tape::inference() };
    let bound = model.bind(&mut tape);
    let (_, logits) = model.segment(&mut tape, &bound, batch, state.clone()).unwrap();
    let targets = batch.targets.as_ref().unwrap();
    let loss = tape.cross_entropy(&logits, targets, &vec![true; targets.len()]).unwrap();
    let value = loss.value().data()[0];
    let g = grads.then(|| tape.backward(&loss).unwrap());
    (value, g)
}

/// Toy configuration for finite-difference checks. One outer cycle keeps the
/// whole segment on the tape.
pub fn toy_config(arch: Arch, mode: EmbeddingMode, task_types: usize) -> ModelConfig {
    ModelConfig {
        arch,
        d_model: 16,
        num_heads: 2,
        layers: 2,
        h_cycles: 1,
        l_cycles: 2,
        embedding_mode: mode,
        num_task_types: task_types,
        rope: RopeSpec::rope2d(4),
        ..Default::default()
    }
}

/// Random 4×4 batch with MASK cells and arbitrary targets.
pub fn toy_batch(size: usize, task_types: usize, rng: &mut ChaCha8Rng) -> Batch {
    let cells = size * 16;
    let inputs = (0..cells).map(|_| rng.gen_range(0..5)).collect();
    let targets = (0..cells).map(|_| rng.gen_range(1..5)).collect();
    let tasks = (task_types > 0).then(|| (0..size).map(|_| rng.gen_range(0..task_types)).collect());
    Batch::new(size, 16, 5, 4, inputs, Some(targets), tasks).unwrap()
}

pub struct GradCheck {
    pub group: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central differences at `points` random coordinates of every trainable
/// parameter. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(arch: Arch, mode: EmbeddingMode, task_types: usize, points: usize, seed: u64) -> Vec<GradCheck> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = toy_config(arch, mode, task_types);
    let mut model: Model<f64> = Model::new(config, SymbolAlphabet::sudoku(4), &mut rng).unwrap();
    let batch = toy_batch(2, task_types, &mut rng);
    // A non-trivial carried state exercises the recurrent inputs.
    let state = {
        let mut s = model.initial_state(&batch).unwrap();
        for t in [&mut s.y, &mut s.z] {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        s
    };
    let (_, grads) = segment_loss(&model, &batch, &state, true);
    let grads = grads.unwrap();
    let names: Vec<String> = model.params().keys().filter(|n| serrm::model::is_trainable(n)).cloned().collect();
    let mut out = Vec::new();
    for name in names {
        let numel = model.params()[&name].numel();
        let g = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for _ in 0..points {
            let j = rng.gen_range(0..numel);
            let orig = model.params()[&name].data()[j];
            model.params_mut().get_mut(&name).unwrap().data_mut()[j] = orig + STEP;
            let up = segment_loss(&model, &batch, &state, false).0;
            model.params_mut().get_mut(&name).unwrap().data_mut()[j] = orig - STEP;
            let down = segment_loss(&model, &batch, &state, false).0;
            model.params_mut().get_mut(&name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = g.data()[j];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            out.push(GradCheck { group: name.clone(), analytic, numeric, rel_err });
        }
    }
    out
}
