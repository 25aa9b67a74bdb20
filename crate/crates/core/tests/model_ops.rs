use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serrm::eval::audit_symbol_equivariance;
use serrm::model::{Arch, Batch, EmbeddingMode, Model, ModelConfig, SymbolAlphabet};
use serrm::tensor::nn::{self, attention_along_axis, AttentionParams, Axis, RopeSpec};
use serrm::tensor::{Tape, Tensor, Var};
use serrm::Error;

fn model<F: serrm::tensor::Float>(arch: Arch, mode: EmbeddingMode, task_types: usize, alphabet: SymbolAlphabet, seed: u64) -> Model<F> {
    let config = ModelConfig {
        arch,
        d_model: 8,
        num_heads: 2,
        layers: 2,
        h_cycles: 2,
        l_cycles: 2,
        embedding_mode: mode,
        num_task_types: task_types,
        rope: RopeSpec::rope2d(2),
        ..Default::default()
    };
    Model::new(config, alphabet, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn se(seed: u64) -> Model<f64> {
    model(Arch::SeRrm, EmbeddingMode::Equivariant, 0, SymbolAlphabet::sudoku(4), seed)
}

fn embed(m: &Model<f64>, batch: &Batch) -> Result<Tensor<f64>, Error> {
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape);
    m.embed(&mut tape, &bound, batch).map(Var::into_tensor)
}

/// Row `d`-vector at `[b, i, k]` of a `[b, i, k, d]` tensor.
fn slot(t: &Tensor<f64>, i: usize, k: usize) -> &[f64] {
    let (ks, d) = (t.shape()[2], t.shape()[3]);
    let at = (i * ks + k) * d;
    &t.data()[at..at + d]
}

fn relabel_k(t: &Tensor<f64>, rho: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let (k, d) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![0.0; t.numel()];
    for (row, chunk) in t.data().chunks(k * d).enumerate() {
        for c in 0..k {
            let dst = row * k * d + rho[c] * d;
            out[dst..dst + d].copy_from_slice(&chunk[c * d..(c + 1) * d]);
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn se_embedding_follows_the_case_table() {
    // Usual symbols {1, 2}, special MASK in slot 0.
    let m = model::<f64>(Arch::SeRrm, EmbeddingMode::Equivariant, 0, SymbolAlphabet::sudoku(2), 1);
    let e = embed(&m, &Batch::new(1, 2, 3, 2, vec![1, 0], None, None).unwrap()).unwrap();
    let d = m.params()["embed.d"].data();
    let s = m.params()["embed.s"].data();
    let zero = vec![0.0; 8];
    assert_eq!(slot(&e, 0, 1), d);
    assert_eq!(slot(&e, 0, 2), zero.as_slice());
    assert_eq!(slot(&e, 0, 0), zero.as_slice());
    assert_eq!(slot(&e, 1, 0), s);
    assert_eq!(slot(&e, 1, 1), zero.as_slice());
}

#[test]
fn all_mask_input_embeds_identically_everywhere() {
    let m = se(2);
    let e = embed(&m, &Batch::new(1, 16, 5, 4, vec![0; 16], None, None).unwrap()).unwrap();
    let first = &e.data()[..5 * 8];
    assert!(e.data().chunks(5 * 8).all(|row| row == first));
}

#[test]
fn se_embedding_commutes_with_relabeling() {
    let m = se(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<usize> = (0..32).map(|_| rng.gen_range(0..5)).collect();
    let rho = [0, 3, 1, 4, 2];
    let moved: Vec<usize> = inputs.iter().map(|&c| rho[c]).collect();
    let a = embed(&m, &Batch::new(2, 16, 5, 4, inputs, None, None).unwrap()).unwrap();
    let b = embed(&m, &Batch::new(2, 16, 5, 4, moved, None, None).unwrap()).unwrap();
    assert_eq!(relabel_k(&a, &rho).data(), b.data());
}

#[test]
fn embedding_errors() {
    let m = se(4);
    assert!(matches!(Batch::new(1, 2, 5, 2, vec![1, 5], None, None), Err(Error::UnknownSymbol { symbol: 5, .. })));
    let typed = model::<f64>(Arch::SeRrm, EmbeddingMode::Equivariant, 2, SymbolAlphabet::sudoku(4), 4);
    let b = |t: usize| Batch::new(1, 4, 5, 2, vec![0, 1, 2, 3], None, Some(vec![t])).unwrap();
    assert!(embed(&typed, &b(1)).is_ok());
    assert!(embed(&typed, &b(2)).is_err());
    assert!(embed(&typed, &Batch::new(1, 4, 5, 2, vec![0, 1, 2, 3], None, None).unwrap()).is_err());
    assert!(embed(&m, &b(0)).is_ok());
}

#[test]
fn task_type_columns_start_identical() {
    let m = model::<f64>(Arch::SeRrm, EmbeddingMode::Equivariant, 3, SymbolAlphabet::sudoku(4), 5);
    let table = &m.params()["embed.task_type"];
    assert_eq!(table.shape(), &[3, 5, 8]);
    for task in table.data().chunks(5 * 8) {
        assert!(task.chunks(8).all(|col| col == &task[..8]));
    }
}

#[test]
fn vanilla_embedding_examples() {
    let m = model::<f64>(Arch::VanillaRrm, EmbeddingMode::Equivariant, 0, SymbolAlphabet::sudoku(4), 6);
    let e = embed(&m, &Batch::new(1, 4, 5, 2, vec![1, 1, 2, 3], None, None).unwrap()).unwrap();
    let rows: Vec<&[f64]> = e.data().chunks(8).collect();
    assert_eq!(rows[0], rows[1]);
    assert_ne!(rows[1], rows[2]);
    assert_ne!(rows[2], rows[3]);
    let table = &m.params()["embed.table"];
    let scale = 8f64.sqrt();
    for (r, &sym) in rows.iter().zip(&[1usize, 1, 2, 3]) {
        let want: Vec<f64> = table.data()[sym * 8..(sym + 1) * 8].iter().map(|v| v * scale).collect();
        assert_eq!(*r, want.as_slice());
    }
    // Relabeling digits changes the embedding of every cell it touches.
    let moved = embed(&m, &Batch::new(1, 4, 5, 2, vec![2, 2, 1, 3], None, None).unwrap()).unwrap();
    assert_ne!(e.data(), moved.data());
    assert_eq!(&e.data()[24..], &moved.data()[24..]);
}

#[test]
fn decode_examples() {
    let mut tape = Tape::<f64>::inference();
    let w = Var::constant(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    let b = Var::constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let y = Var::constant(Tensor::from_f64(&[1, 1, 1, 2], &[2.0, 1.0]).unwrap());
    assert_eq!(tape.decode(&y, &w, &b).unwrap().value().data(), &[1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = Var::constant(Tensor::from_fn(&[2, 3, 4, 2], |_| rng.gen_range(-1.0..1.0)));
    let zero = Var::constant(Tensor::zeros(&[2]));
    let bias = Var::constant(Tensor::from_f64(&[1], &[0.25]).unwrap());
    let l = tape.decode(&y, &zero, &bias).unwrap();
    assert!(l.value().data().iter().all(|&v| v == 0.25));

    let flat = Var::constant(Tensor::from_fn(&[1, 3, 4, 2], |n| ((n / 8) * 2 + n % 2) as f64));
    let l = tape.decode(&flat, &w, &bias).unwrap();
    for row in l.value().data().chunks(4) {
        assert!(row.iter().all(|&v| v == row[0]));
    }
    assert_eq!(l.value().argmax_rows(), vec![0, 0, 0]);
}

fn run_block(m: &Model<f64>, h: &Tensor<f64>, grid: usize) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let bound = m.bind(&mut tape);
    m.block(&mut tape, &bound, &Var::constant(h.clone()), grid).unwrap().into_tensor()
}

#[test]
fn block_identity_permutation_is_a_no_op() {
    let m = se(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = Tensor::from_fn(&[2, 4, 5, 8], |_| rng.gen_range(-1.0..1.0));
    assert_eq!(run_block(&m, &relabel_k(&h, &[0, 1, 2, 3, 4]), 2).data(), run_block(&m, &h, 2).data());
}

#[test]
fn block_commutes_with_symbol_permutations() {
    let m = se(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let h = Tensor::from_fn(&[2, 4, 5, 8], |_| rng.gen_range(-1.0..1.0));
        let mut rho: Vec<usize> = (0..5).collect();
        rho.shuffle(&mut rng);
        let a = relabel_k(&run_block(&m, &h, 2), &rho);
        let b = run_block(&m, &relabel_k(&h, &rho), 2);
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }
}

#[test]
fn se_block_with_one_symbol_is_a_vanilla_block_plus_an_affine_sublayer() {
    let m = se(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = Tensor::from_fn(&[2, 4, 1, 8], |_| rng.gen_range(-1.0..1.0));
    let got = run_block(&m, &h, 2);

    let p = m.params();
    let c = |name: String| Var::constant(p[&name].clone());
    let mut tape = Tape::<f64>::inference();
    let mut x = Var::constant(h.clone().reshape(&[2, 4, 8]).unwrap());
    for l in 0..2 {
        let attn = |axis: &str| AttentionParams {
            num_heads: 2,
            wq: c(format!("layers.{l}.{axis}.wq")),
            wk: c(format!("layers.{l}.{axis}.wk")),
            wv: c(format!("layers.{l}.{axis}.wv")),
            wo: c(format!("layers.{l}.{axis}.wo")),
        };
        let a = attention_along_axis(&mut tape, &x, Axis::Position, &attn("attn_pos"), &RopeSpec::rope2d(2)).unwrap();
        let s = tape.add(&x, &a).unwrap();
        x = tape.rms_norm(&s, &c(format!("layers.{l}.norm_pos"))).unwrap();
        let v = tape.linear(&x, &c(format!("layers.{l}.attn_sym.wv"))).unwrap();
        let o = tape.linear(&v, &c(format!("layers.{l}.attn_sym.wo"))).unwrap();
        let s = tape.add(&x, &o).unwrap();
        x = tape.rms_norm(&s, &c(format!("layers.{l}.norm_sym"))).unwrap();
        let f = nn::swiglu(&mut tape, &x, &c(format!("layers.{l}.mlp.w_in")), &c(format!("layers.{l}.mlp.w_out"))).unwrap();
        let s = tape.add(&x, &f).unwrap();
        x = tape.rms_norm(&s, &c(format!("layers.{l}.norm_mlp"))).unwrap();
    }
    let want = x.into_tensor().reshape(&[2, 4, 1, 8]).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn block_rejects_the_wrong_rank() {
    let m = se(11);
    let mut tape = Tape::<f64>::inference();
    let bound = m.bind(&mut tape);
    let flat = Var::constant(Tensor::zeros(&[1, 4, 8]));
    assert!(m.block(&mut tape, &bound, &flat, 2).is_err());
}

#[test]
fn initial_state_is_constant_along_positions_and_symbols() {
    for arch in [Arch::SeRrm, Arch::VanillaRrm] {
        let m = model::<f64>(arch, EmbeddingMode::Equivariant, 0, SymbolAlphabet::sudoku(4), 12);
        let s = m.initial_state(&Batch::new(2, 16, 5, 4, vec![0; 32], None, None).unwrap()).unwrap();
        for t in [&s.y, &s.z] {
            assert!(t.data().chunks(8).all(|v| v == &t.data()[..8]));
        }
        assert_ne!(s.y.data()[..8], s.z.data()[..8]);
    }
}

#[test]
fn per_symbol_embeddings_break_symbol_equivariance() {
    let m = model::<f64>(Arch::SeRrm, EmbeddingMode::PerSymbol, 0, SymbolAlphabet::sudoku(4), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs: Vec<Vec<usize>> = (0..4).map(|_| (0..16).map(|_| rng.gen_range(0..5)).collect()).collect();
    let r = audit_symbol_equivariance(&m, &inputs, 5, 4, 10, 1, 13).unwrap();
    assert!(!r.expected_equivariant);
    assert!(r.max_logit_deviation > 1e-2);
}

#[test]
fn a_supervision_step_reaches_every_trainable_parameter() {
    for (arch, mode, tt) in [
        (Arch::SeRrm, EmbeddingMode::Equivariant, 0),
        (Arch::SeRrm, EmbeddingMode::PerSymbol, 2),
        (Arch::VanillaRrm, EmbeddingMode::Equivariant, 0),
    ] {
        let m = model::<f64>(arch, mode, tt, SymbolAlphabet::sudoku(4), 14);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs: Vec<usize> = (0..32).map(|_| rng.gen_range(0..5)).collect();
        let targets: Vec<usize> = (0..32).map(|_| rng.gen_range(1..5)).collect();
        let types = (tt > 0).then(|| vec![0, 1]);
        let batch = Batch::new(2, 16, 5, 4, inputs, Some(targets), types).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let state = m.initial_state(&batch).unwrap();
        let (_, logits) = m.segment(&mut tape, &bound, &batch, state).unwrap();
        let loss = nn::softmax_cross_entropy(&mut tape, &logits, batch.targets.as_ref().unwrap(), &[true; 32]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for name in m.params().keys().filter(|n| serrm::model::is_trainable(n)) {
            let g = grads.get(name).unwrap_or_else(|| panic!("{arch}: no gradient for {name}"));
            assert!(g.data().iter().any(|&v| v != 0.0), "{arch}: zero gradient for {name}");
        }
    }
}
