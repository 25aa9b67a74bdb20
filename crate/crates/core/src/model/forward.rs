use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::{init, is_trainable, Arch, Batch, EmbeddingMode, Model, ModelConfig, SymbolAlphabet};
use crate::error::{Error, Result};
use crate::tensor::nn::{self, AttentionParams, Axis, RopeMode, RopeSpec};
use crate::tensor::{AxisLayout, Float, RopeTable, Tape, Tensor, Var};

/// Parameters registered on one tape.
pub struct Bound<F> {
    vars: BTreeMap<String, Var<F>>,
}

impl<F: Float> Bound<F> {
    pub fn get(&self, name: &str) -> Result<&Var<F>> {
        self.vars.get(name).ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }
}

/// Recurrent `(y, z)` carried between supervision segments, always detached.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub y: Tensor<F>,
    pub z: Tensor<F>,
}

/// Per-geometry layouts and rotary angles shared by every block call.
struct Ctx<F> {
    pos: AxisLayout,
    sym: Option<AxisLayout>,
    rope: Option<Arc<RopeTable<F>>>,
}

impl<F: Float> Model<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, alphabet: SymbolAlphabet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if alphabet.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        let params = init::init_params(&config, &alphabet, rng);
        Ok(Self { config, alphabet, params })
    }

    /// Registers trainable parameters as named leaves; fixed ones as constants.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound<F> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if is_trainable(name) { tape.leaf(name, t.clone()) } else { Var::constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Shape of one recurrent state for `batch`.
    pub fn state_shape(&self, batch: &Batch) -> Vec<usize> {
        let d = self.config.d_model;
        match self.config.arch {
            Arch::SeRrm => vec![batch.size, batch.positions, batch.symbols, d],
            Arch::VanillaRrm => vec![batch.size, batch.positions, d],
        }
    }

    /// The fixed initial vectors broadcast to every token.
    pub fn initial_state(&self, batch: &Batch) -> Result<RecurrentState<F>> {
        let shape = self.state_shape(batch);
        let tile = |name: &str| -> Result<Tensor<F>> {
            let v = self.params.get(name).ok_or_else(|| Error::Config(format!("missing {name}")))?;
            let d = v.numel();
            let numel: usize = shape.iter().product();
            Tensor::new(&shape, (0..numel).map(|n| v.data()[n % d]).collect())
        };
        Ok(RecurrentState { y: tile("init.y")?, z: tile("init.z")? })
    }

    /// Checks that `batch` can be embedded and decoded by this model.
    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let k_model = self.alphabet.len();
        let k = batch.symbols;
        let unseen = Error::UnseenSymbols { data: k, model: k_model };
        match self.config.arch {
            Arch::VanillaRrm if k > k_model => return Err(unseen),
            Arch::SeRrm => {
                if k < self.alphabet.num_special() {
                    return Err(Error::Config(format!(
                        "data alphabet of {k} symbols lacks the model's {} special symbols",
                        self.alphabet.num_special()
                    )));
                }
                if self.config.embedding_mode == EmbeddingMode::PerSymbol && k > k_model {
                    return Err(unseen);
                }
                if self.config.num_task_types > 0 {
                    if batch.task_types.is_none() {
                        return Err(Error::Config("model uses task-type embeddings; batch has no task ids".into()));
                    }
                    if k != k_model {
                        return Err(Error::Config(format!(
                            "task-type embeddings are sized for {k_model} symbols, data has {k}"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn ctx(&self, shape: &[usize], grid_width: usize) -> Result<Ctx<F>> {
        let c = &self.config;
        let pos = nn::axis_layout(shape, Axis::Position)?;
        let sym = match c.arch {
            Arch::SeRrm => Some(nn::axis_layout(shape, Axis::Symbol)?),
            Arch::VanillaRrm => None,
        };
        let spec = match c.rope.mode {
            RopeMode::Rope2d => RopeSpec { grid_width: grid_width.max(1), ..c.rope },
            _ => c.rope,
        };
        let rope = spec.table(pos, c.num_heads, c.head_dim())?;
        Ok(Ctx { pos, sym, rope })
    }

    /// Input embedding `E`: `[b, i, k, d]` for SE, `[b, i, d]` for vanilla.
    pub fn embed(&self, tape: &mut Tape<F>, bound: &Bound<F>, batch: &Batch) -> Result<Var<F>> {
        self.check_batch(batch)?;
        let lead = [batch.size, batch.positions];
        match self.config.arch {
            Arch::SeRrm => {
                let ns = self.alphabet.num_special();
                let specials: Vec<Option<usize>> = (0..batch.symbols).map(|c| (c < ns).then_some(c)).collect();
                let e_s = tape.scatter_embed(&batch.inputs, &lead, &specials, bound.get("embed.s")?)?;
                let (usual, table) = match self.config.embedding_mode {
                    EmbeddingMode::Equivariant => {
                        ((0..batch.symbols).map(|c| (c >= ns).then_some(0)).collect::<Vec<_>>(), "embed.d")
                    }
                    EmbeddingMode::PerSymbol => {
                        ((0..batch.symbols).map(|c| (c >= ns).then(|| c - ns)).collect(), "embed.usual")
                    }
                };
                let e_u = tape.scatter_embed(&batch.inputs, &lead, &usual, bound.get(table)?)?;
                let e = tape.add(&e_s, &e_u)?;
                match (&batch.task_types, self.config.num_task_types) {
                    (Some(ids), p) if p > 0 => tape.add_task_type(&e, bound.get("embed.task_type")?, ids),
                    _ => Ok(e),
                }
            }
            Arch::VanillaRrm => {
                let e = tape.gather_rows(&batch.inputs, &lead, bound.get("embed.table")?)?;
                Ok(tape.scale(&e, F::from_f64((self.config.d_model as f64).sqrt())))
            }
        }
    }

    fn attention_params(&self, bound: &Bound<F>, prefix: &str) -> Result<AttentionParams<F>> {
        let w = |n: &str| bound.get(&format!("{prefix}.{n}")).cloned();
        Ok(AttentionParams { num_heads: self.config.num_heads, wq: w("wq")?, wk: w("wk")?, wv: w("wv")?, wo: w("wo")? })
    }

    fn residual_norm(&self, tape: &mut Tape<F>, h: &Var<F>, delta: &Var<F>, gain: &Var<F>) -> Result<Var<F>> {
        let s = tape.add(h, delta)?;
        tape.rms_norm(&s, gain)
    }

    fn block_with(&self, tape: &mut Tape<F>, bound: &Bound<F>, h0: &Var<F>, ctx: &Ctx<F>) -> Result<Var<F>> {
        let mut h = h0.clone();
        for l in 0..self.config.layers {
            let p = |n: &str| bound.get(&format!("layers.{l}.{n}"));
            match self.config.arch {
                Arch::SeRrm => {
                    let ap = self.attention_params(bound, &format!("layers.{l}.attn_pos"))?;
                    let a = nn::attention_with_table(tape, &h, ctx.pos, &ap, ctx.rope.as_ref())?;
                    h = self.residual_norm(tape, &h, &a, p("norm_pos")?)?;
                    let sym = ctx.sym.expect("SE context has a symbol layout");
                    let asym = self.attention_params(bound, &format!("layers.{l}.attn_sym"))?;
                    let a = nn::attention_with_table(tape, &h, sym, &asym, None)?;
                    h = self.residual_norm(tape, &h, &a, p("norm_sym")?)?;
                }
                Arch::VanillaRrm => {
                    let ap = self.attention_params(bound, &format!("layers.{l}.attn"))?;
                    let a = nn::attention_with_table(tape, &h, ctx.pos, &ap, ctx.rope.as_ref())?;
                    h = self.residual_norm(tape, &h, &a, p("norm_attn")?)?;
                }
            }
            let m = nn::swiglu(tape, &h, p("mlp.w_in")?, p("mlp.w_out")?)?;
            h = self.residual_norm(tape, &h, &m, p("norm_mlp")?)?;
        }
        Ok(h)
    }

    /// One application of the shared block to an already-summed input.
    pub fn block(&self, tape: &mut Tape<F>, bound: &Bound<F>, h0: &Var<F>, grid_width: usize) -> Result<Var<F>> {
        let ctx = self.ctx(h0.shape(), grid_width)?;
        self.block_with(tape, bound, h0, &ctx)
    }

    /// Per-cell logits `[b, i, k_out]`.
    pub fn decode(&self, tape: &mut Tape<F>, bound: &Bound<F>, y: &Var<F>) -> Result<Var<F>> {
        match self.config.arch {
            Arch::SeRrm => tape.decode(y, bound.get("head.w")?, bound.get("head.b")?),
            Arch::VanillaRrm => {
                let l = tape.linear(y, bound.get("head.w")?)?;
                tape.add_bias(&l, bound.get("head.b")?)
            }
        }
    }

    /// One supervision segment: `h_cycles` outer cycles of `l_cycles` latent
    /// updates and one answer update. Only the final outer cycle is recorded.
    pub fn segment(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<F>,
        batch: &Batch,
        state: RecurrentState<F>,
    ) -> Result<(RecurrentState<F>, Var<F>)> {
        let shape = self.state_shape(batch);
        if state.y.shape() != shape.as_slice() || state.z.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("state {:?} does not fit batch shape {shape:?}", state.y.shape())));
        }
        let ctx = self.ctx(&shape, batch.grid_width)?;
        let emb = self.embed(tape, bound, batch)?;
        let enabled = tape.grad_enabled();
        let mut y = Var::constant(state.y);
        let mut z = Var::constant(state.z);
        let outer = self.config.h_cycles;
        let result = (|| {
            for cycle in 0..outer {
                tape.set_grad_enabled(enabled && cycle + 1 == outer);
                for _ in 0..self.config.l_cycles {
                    let s = tape.add(&emb, &y)?;
                    let s = tape.add(&s, &z)?;
                    z = self.block_with(tape, bound, &s, &ctx)?;
                }
                let s = tape.add(&y, &z)?;
                y = self.block_with(tape, bound, &s, &ctx)?;
            }
            Ok::<_, Error>(())
        })();
        tape.set_grad_enabled(enabled);
        result?;
        let logits = self.decode(tape, bound, &y)?;
        let next = RecurrentState { y: y.value().clone(), z: z.value().clone() };
        Ok((next, logits))
    }

    /// Logits after `segments` supervision segments, without recording.
    pub fn logits(&self, batch: &Batch, segments: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let mut state = self.initial_state(batch)?;
        let mut logits = None;
        for _ in 0..segments.max(1) {
            let (next, l) = self.segment(&mut tape, &bound, batch, state)?;
            state = next;
            logits = Some(l);
        }
        let logits = logits.expect("at least one segment").into_tensor();
        if !logits.is_finite() {
            return Err(Error::NonFinite("inference produced non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Argmax symbol slot for every cell, `[b · i]`.
    pub fn predict(&self, batch: &Batch, segments: usize) -> Result<Vec<usize>> {
        Ok(self.logits(batch, segments)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(arch: Arch) -> Model<f64> {
        let config = ModelConfig {
            arch,
            d_model: 8,
            num_heads: 2,
            layers: 1,
            h_cycles: 2,
            l_cycles: 2,
            rope: RopeSpec::rope2d(2),
            ..Default::default()
        };
        Model::new(config, SymbolAlphabet::sudoku(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn batch() -> Batch {
        let inputs = vec![0, 1, 2, 0, 3, 0, 4, 1, 2, 2, 0, 0, 1, 4, 3, 0];
        Batch::new(1, 16, 5, 4, inputs, None, None).unwrap()
    }

    #[test]
    fn logits_have_cell_by_symbol_shape() {
        for arch in [Arch::SeRrm, Arch::VanillaRrm] {
            let m = tiny(arch);
            let l = m.logits(&batch(), 2).unwrap();
            assert_eq!(l.shape(), &[1, 16, 5]);
        }
    }

    #[test]
    fn only_the_last_outer_cycle_is_recorded() {
        let m = tiny(Arch::SeRrm);
        let b = batch();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let params = tape.len();
        let s = m.initial_state(&b).unwrap();
        m.segment(&mut tape, &bound, &b, s.clone()).unwrap();
        let two = tape.len() - params;

        let mut one_cfg = m.config().clone();
        one_cfg.h_cycles = 1;
        let m1 = Model::from_parts(one_cfg, m.alphabet().clone(), m.params().clone()).unwrap();
        let mut tape = Tape::new();
        let bound = m1.bind(&mut tape);
        m1.segment(&mut tape, &bound, &b, s).unwrap();
        assert_eq!(tape.len() - params, two);
    }

    #[test]
    fn vanilla_rejects_larger_alphabets() {
        let m = tiny(Arch::VanillaRrm);
        let b = Batch::new(1, 4, 7, 2, vec![0, 5, 6, 1], None, None).unwrap();
        assert!(matches!(m.logits(&b, 1), Err(Error::UnseenSymbols { data: 7, model: 5 })));
        let se = tiny(Arch::SeRrm);
        assert_eq!(se.logits(&b, 1).unwrap().shape(), &[1, 4, 7]);
    }
}
