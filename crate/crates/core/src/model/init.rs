use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Arch, EmbeddingMode, ModelConfig, Params, SymbolAlphabet};
use crate::tensor::{Float, Tensor};

/// Every parameter array the configuration owns, in name order.
pub(crate) fn expected_shapes(config: &ModelConfig, alphabet: &SymbolAlphabet) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.mlp_hidden();
    let k = alphabet.len();
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    push("init.y".into(), vec![d]);
    push("init.z".into(), vec![d]);
    let attn_names = |prefix: &str| ["wq", "wk", "wv", "wo"].map(|w| format!("{prefix}.{w}"));
    match config.arch {
        Arch::SeRrm => {
            push("embed.s".into(), vec![alphabet.num_special(), d]);
            match config.embedding_mode {
                EmbeddingMode::Equivariant => push("embed.d".into(), vec![1, d]),
                EmbeddingMode::PerSymbol => push("embed.usual".into(), vec![alphabet.num_usual(), d]),
            }
            if config.num_task_types > 0 {
                push("embed.task_type".into(), vec![config.num_task_types, k, d]);
            }
            push("head.w".into(), vec![d]);
            push("head.b".into(), vec![1]);
            for l in 0..config.layers {
                for axis in ["attn_pos", "attn_sym"] {
                    for n in attn_names(&format!("layers.{l}.{axis}")) {
                        push(n, vec![d, d]);
                    }
                }
                for norm in ["norm_pos", "norm_sym", "norm_mlp"] {
                    push(format!("layers.{l}.{norm}"), vec![d]);
                }
                push(format!("layers.{l}.mlp.w_in"), vec![d, 2 * f]);
                push(format!("layers.{l}.mlp.w_out"), vec![f, d]);
            }
        }
        Arch::VanillaRrm => {
            push("embed.table".into(), vec![k, d]);
            push("head.w".into(), vec![d, k]);
            push("head.b".into(), vec![k]);
            for l in 0..config.layers {
                for n in attn_names(&format!("layers.{l}.attn")) {
                    push(n, vec![d, d]);
                }
                for norm in ["norm_attn", "norm_mlp"] {
                    push(format!("layers.{l}.{norm}"), vec![d]);
                }
                push(format!("layers.{l}.mlp.w_in"), vec![d, 2 * f]);
                push(format!("layers.{l}.mlp.w_out"), vec![f, d]);
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Normal(0, σ) truncated to ±2σ by rejection.
pub(crate) fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 {
            return x * sigma;
        }
    }
}

fn sigma_for(name: &str, shape: &[usize], d: usize) -> Option<f64> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf.starts_with("norm") {
        return None;
    }
    Some(match name {
        "init.y" | "init.z" => 1.0 / (d as f64).sqrt(),
        "embed.s" | "embed.d" | "embed.usual" | "embed.task_type" => 1.0,
        "head.b" => 0.0,
        "head.w" => 1.0 / (shape[0] as f64).sqrt(),
        "embed.table" => 1.0 / (d as f64).sqrt(),
        _ => 1.0 / (shape[0] as f64).sqrt(),
    })
}

pub(crate) fn init_params<F: Float, R: Rng + ?Sized>(
    config: &ModelConfig,
    alphabet: &SymbolAlphabet,
    rng: &mut R,
) -> Params<F> {
    let d = config.d_model;
    let mut params = Params::new();
    for (name, shape) in expected_shapes(config, alphabet) {
        let t = match sigma_for(&name, &shape, d) {
            None => Tensor::full(&shape, F::one()),
            Some(0.0) => Tensor::zeros(&shape),
            Some(s) if name == "embed.task_type" => {
                // One vector per task id, copied to every symbol column.
                let (p, k) = (shape[0], shape[1]);
                let mut data = Vec::with_capacity(p * k * d);
                for _ in 0..p {
                    let v: Vec<F> = (0..d).map(|_| F::from_f64(truncated_normal(rng, s))).collect();
                    for _ in 0..k {
                        data.extend_from_slice(&v);
                    }
                }
                Tensor::new(&shape, data).expect("task-type shape")
            }
            Some(s) => Tensor::from_fn(&shape, |_| F::from_f64(truncated_normal(rng, s))),
        };
        params.insert(name, t);
    }
    params
}
