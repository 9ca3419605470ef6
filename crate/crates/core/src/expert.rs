//! Transformer sequential expert: causal multi-head self-attention followed
//! by a position-wise GELU feed-forward network, stacked `blocks` times.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionShape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Pre-norm residual blocks; `false` gives the bare `FFN(MSA(·))` form.
    pub residual: bool,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("an expert needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias))
    }
}

/// One attention + feed-forward block. `W^Q`, `W^K`, `W^V` are `r×r` with
/// head `i` owning column block `i`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm_attn: Option<Norm>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wf: ParamId,
    pub norm_ffn: Option<Norm>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub config: ExpertConfig,
    pub blocks: Vec<BlockParams>,
}

impl ExpertParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &ExpertConfig) -> Self {
        let r = config.dim;
        let blocks = (0..config.blocks)
            .map(|b| {
                let p = format!("{prefix}.block{b}");
                let mut mat = |store: &mut ParamStore, name: &str| {
                    store.add(format!("{p}.{name}"), scaled_normal(rng, r, r, r))
                };
                let norm_attn = config.residual.then(|| Norm::new(store, &format!("{p}.norm_attn"), r));
                let wq = mat(store, "wq");
                let wk = mat(store, "wk");
                let wv = mat(store, "wv");
                let wf = mat(store, "wf");
                let norm_ffn = config.residual.then(|| Norm::new(store, &format!("{p}.norm_ffn"), r));
                let w1 = mat(store, "w1");
                let b1 = store.add(format!("{p}.b1"), Tensor::zeros(1, r));
                let w2 = mat(store, "w2");
                let b2 = store.add(format!("{p}.b2"), Tensor::zeros(1, r));
                BlockParams { norm_attn, wq, wk, wv, wf, norm_ffn, w1, b1, w2, b2 }
            })
            .collect();
        Self { config: config.clone(), blocks }
    }
}

/// Input rows of a `B×T` sequence batch, shared by every block.
#[derive(Clone, Copy, Debug)]
pub struct SeqLayout<'a> {
    pub batch: usize,
    pub steps: usize,
    /// Non-PAD keys; `None` means every key is attendable.
    pub key_valid: Option<&'a [bool]>,
}

/// `[Attn(Q_1,K_1,V_1) ‖ … ‖ Attn(Q_p,K_p,V_p)] W^F` with causal masking.
pub fn attention(tape: &mut Tape, bound: &Bound, block: &BlockParams, heads: usize, z: Var, layout: SeqLayout) -> Var {
    let q = tape.matmul(z, bound.var(block.wq));
    let k = tape.matmul(z, bound.var(block.wk));
    let v = tape.matmul(z, bound.var(block.wv));
    let shape = AttentionShape { batch: layout.batch, steps: layout.steps, heads };
    let heads_out = tape.causal_attention(q, k, v, shape, layout.key_valid);
    tape.matmul(heads_out, bound.var(block.wf))
}

/// `GELU(H W_1 + b_1) W_2 + b_2` per position.
pub fn ffn(tape: &mut Tape, bound: &Bound, block: &BlockParams, h: Var) -> Var {
    let a = tape.matmul(h, bound.var(block.w1));
    let a = tape.add_row(a, bound.var(block.b1));
    let a = tape.gelu(a);
    let o = tape.matmul(a, bound.var(block.w2));
    tape.add_row(o, bound.var(block.b2))
}

pub fn block_forward(
    tape: &mut Tape,
    bound: &Bound,
    block: &BlockParams,
    config: &ExpertConfig,
    x: Var,
    layout: SeqLayout,
) -> Var {
    match (&block.norm_attn, &block.norm_ffn) {
        (Some(n1), Some(n2)) if config.residual => {
            let a = n1.apply(tape, bound, x);
            let a = attention(tape, bound, block, config.heads, a, layout);
            let h = tape.add(x, a);
            let f = n2.apply(tape, bound, h);
            let f = ffn(tape, bound, block, f);
            tape.add(h, f)
        }
        _ => {
            let h = attention(tape, bound, block, config.heads, x, layout);
            ffn(tape, bound, block, h)
        }
    }
}

/// `f_TRM(E)`: every block applied in order.
pub fn expert_forward(tape: &mut Tape, bound: &Bound, params: &ExpertParams, e: Var, layout: SeqLayout) -> Var {
    params
        .blocks
        .iter()
        .fold(e, |x, block| block_forward(tape, bound, block, &params.config, x, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::{max_relative_error, seeded};
    use crate::autograd::{gelu, matmul};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(config: &ExpertConfig, seed: u64) -> (ParamStore, ExpertParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ExpertParams::new(&mut store, &mut rng, "expert.0", config);
        (store, params)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let ids: Vec<_> = store.ids().collect();
        for (n, id) in ids.into_iter().enumerate() {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = seeded(r, c, seed + n as u64).map(|v| 0.5 * v);
        }
    }

    fn run(store: &ParamStore, params: &ExpertParams, input: &Tensor, layout: SeqLayout) -> Tensor {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = expert_forward(&mut tape, &bound, params, x, layout);
        tape.value(y).clone()
    }

    fn layout(batch: usize, steps: usize) -> SeqLayout<'static> {
        SeqLayout { batch, steps, key_valid: None }
    }

    #[test]
    fn head_count_must_divide_width() {
        let cfg = ExpertConfig { dim: 6, heads: 4, blocks: 1, residual: true };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ExpertConfig { heads: 3, ..cfg }.validate().is_ok());
    }

    #[test]
    fn single_step_attention_is_projected_value() {
        let cfg = ExpertConfig { dim: 4, heads: 2, blocks: 1, residual: false };
        let (mut store, params) = setup(&cfg, 0);
        randomize(&mut store, 10);
        let z = seeded(1, 4, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = attention(&mut tape, &bound, &params.blocks[0], 2, zv, layout(1, 1));
        let b = &params.blocks[0];
        let expected = matmul(&matmul(&z, store.get(b.wv)), store.get(b.wf));
        for (a, e) in tape.value(out).data.iter().zip(&expected.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_gives_prefix_mean() {
        let cfg = ExpertConfig { dim: 2, heads: 1, blocks: 1, residual: false };
        let (mut store, params) = setup(&cfg, 0);
        let b = params.blocks[0].clone();
        *store.get_mut(b.wq) = Tensor::zeros(2, 2);
        *store.get_mut(b.wk) = Tensor::zeros(2, 2);
        *store.get_mut(b.wv) = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        *store.get_mut(b.wf) = Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]);
        let z = Tensor::from_vec(3, 2, vec![1.0, 3.0, 4.0, 0.0, 1.0, -6.0]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let zv = tape.leaf(z);
        let out = attention(&mut tape, &bound, &b, 1, zv, layout(1, 3));
        // prefix means of V: (1,3), (2.5,1.5), (2,-1); W^F doubles column 0
        let expected = [2.0, 3.0, 5.0, 1.5, 4.0, -1.0];
        for (a, e) in tape.value(out).data.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn outputs_ignore_future_inputs() {
        for residual in [false, true] {
            let cfg = ExpertConfig { dim: 4, heads: 2, blocks: 2, residual };
            let (mut store, params) = setup(&cfg, 1);
            randomize(&mut store, 20);
            let steps = 4;
            let x = seeded(2 * steps, 4, 5);
            let base = run(&store, &params, &x, layout(2, steps));
            for t in 0..steps {
                let mut perturbed = x.clone();
                for b in 0..2 {
                    for s in t + 1..steps {
                        for v in perturbed.row_mut(b * steps + s) {
                            *v += 0.73;
                        }
                    }
                }
                let out = run(&store, &params, &perturbed, layout(2, steps));
                for b in 0..2 {
                    for s in 0..=t {
                        assert_eq!(out.row(b * steps + s), base.row(b * steps + s));
                    }
                }
            }
            assert_eq!(base.shape(), x.shape());
        }
    }

    #[test]
    fn ffn_zero_weights_and_scalar_gelu() {
        let cfg = ExpertConfig { dim: 1, heads: 1, blocks: 1, residual: false };
        let (mut store, params) = setup(&cfg, 0);
        let b = params.blocks[0].clone();
        for id in [b.w1, b.b1, b.w2, b.b2] {
            *store.get_mut(id) = Tensor::zeros(store.get(id).rows, 1);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.leaf(Tensor::scalar(1.0));
        let out = ffn(&mut tape, &bound, &b, h);
        assert_eq!(tape.value(out).item(), 0.0);

        *store.get_mut(b.w1) = Tensor::scalar(1.0);
        *store.get_mut(b.w2) = Tensor::scalar(1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.leaf(Tensor::scalar(1.0));
        let out = ffn(&mut tape, &bound, &b, h);
        let v = tape.value(out).item();
        assert!((v - 0.8413447460685429).abs() < 1e-12, "{v}");
        assert_eq!(v, gelu(1.0));
    }

    #[test]
    fn bias_only_block_is_constant() {
        let cfg = ExpertConfig { dim: 3, heads: 1, blocks: 1, residual: false };
        let (mut store, params) = setup(&cfg, 0);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = Tensor::zeros(r, c);
        }
        *store.get_mut(params.blocks[0].b2) = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let out = run(&store, &params, &seeded(4, 3, 9), layout(2, 2));
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn two_blocks_compose() {
        let cfg = ExpertConfig { dim: 4, heads: 2, blocks: 2, residual: true };
        let (mut store, params) = setup(&cfg, 3);
        randomize(&mut store, 40);
        let x = seeded(6, 4, 8);
        let whole = run(&store, &params, &x, layout(2, 3));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let once = block_forward(&mut tape, &bound, &params.blocks[0], &cfg, xv, layout(2, 3));
        let mid = tape.value(once).clone();
        let mid = tape.leaf(mid);
        let twice = block_forward(&mut tape, &bound, &params.blocks[1], &cfg, mid, layout(2, 3));
        assert_eq!(tape.value(twice), &whole);
    }

    /// Gradient of a weighted output sum with respect to the input and every
    /// weight matrix of a two-block expert.
    fn expert_gradient_error(residual: bool) -> f64 {
        let cfg = ExpertConfig { dim: 4, heads: 2, blocks: 2, residual };
        let (mut store, params) = setup(&cfg, 4);
        randomize(&mut store, 60);
        let x = seeded(6, 4, 12);
        let mut inputs = vec![x];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        let valid = [false, true, true, true, true, true];
        max_relative_error(&inputs, |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let layout = SeqLayout { batch: 2, steps: 3, key_valid: Some(&valid) };
            let y = expert_forward(t, &bound, &params, v[0], layout);
            let w = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
            t.weighted_sum(y, w)
        })
    }

    #[test]
    fn expert_input_gradient_matches_finite_differences() {
        assert!(expert_gradient_error(false) < 1e-3);
        assert!(expert_gradient_error(true) < 1e-3);
    }

    #[test]
    fn ffn_parameter_gradients_match_finite_differences() {
        let x = seeded(2, 3, 1);
        let w1 = seeded(3, 3, 2);
        let b1 = seeded(1, 3, 3);
        let w2 = seeded(3, 3, 4);
        let b2 = seeded(1, 3, 5);
        let err = max_relative_error(&[x, w1, b1, w2, b2], |t, v| {
            let a = t.matmul(v[0], v[1]);
            let a = t.add_row(a, v[2]);
            let a = t.gelu(a);
            let o = t.matmul(a, v[3]);
            let o = t.add_row(o, v[4]);
            t.weighted_sum(o, vec![0.3, -1.0, 0.5, 2.0, 0.1, -0.4])
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_parameter_gradients_match_finite_differences() {
        let z = seeded(3, 4, 1);
        let wq = seeded(4, 4, 2);
        let wk = seeded(4, 4, 3);
        let wv = seeded(4, 4, 4);
        let wf = seeded(4, 4, 5);
        let err = max_relative_error(&[z, wq, wk, wv, wf], |t, v| {
            let q = t.matmul(v[0], v[1]);
            let k = t.matmul(v[0], v[2]);
            let val = t.matmul(v[0], v[3]);
            let h = t.causal_attention(q, k, val, AttentionShape { batch: 1, steps: 3, heads: 2 }, None);
            let o = t.matmul(h, v[4]);
            t.weighted_sum(o, (0..12).map(|i| (i as f64 * 0.9).sin()).collect())
        });
        assert!(err < 1e-4, "{err}");
    }
}
