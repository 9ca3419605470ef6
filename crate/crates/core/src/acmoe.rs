//! Asymmetric cooperative mixture of sequential experts.
//!
//! `K` transformer experts are shared by `|D|` single-domain tasks and one
//! cross-domain task. Each task has its own softmax gate over the experts and
//! its own tower head. Experts `0..j` are trained only by the cross-domain
//! task and experts `j..K` only by the single-domain tasks: each task sees
//! the other group's outputs through a stop-gradient.

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::expert::{expert_forward, ExpertConfig, ExpertParams, Norm, SeqLayout};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::seqdata::DomainId;

/// Tower head: `GELU(LayerNorm(x W + b))`.
#[derive(Clone, Debug)]
pub struct Tower {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
}

impl Tower {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), scaled_normal(rng, dim, dim, dim)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, dim)),
            norm: Norm::new(store, &format!("{prefix}.norm"), dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.weight));
        let h = tape.add_row(h, bound.var(self.bias));
        let h = self.norm.apply(tape, bound, h);
        tape.gelu(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Single(DomainId),
    Cross,
}

#[derive(Clone, Debug)]
pub struct AcmoeParams {
    pub experts: Vec<ExpertParams>,
    /// `W_g^d`, each `K×(T·r)`.
    pub gates_single: Vec<ParamId>,
    pub gate_cross: ParamId,
    pub towers_single: Vec<Tower>,
    pub tower_cross: Tower,
    /// `j`: experts `0..j` belong to the cross-domain task.
    pub cdsr_experts: usize,
}

impl AcmoeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        expert: &ExpertConfig,
        num_experts: usize,
        cdsr_experts: usize,
        num_domains: usize,
        steps: usize,
    ) -> Self {
        let r = expert.dim;
        let experts = (0..num_experts)
            .map(|k| ExpertParams::new(store, rng, &format!("expert.{k}"), expert))
            .collect();
        let mut gate = |store: &mut ParamStore, name: String| {
            store.add(name, scaled_normal(rng, num_experts, steps * r, steps * r))
        };
        let gates_single = (0..num_domains).map(|d| gate(store, format!("acmoe.gate.{d}"))).collect();
        let gate_cross = gate(store, "acmoe.gate.cross".into());
        let towers_single = (0..num_domains).map(|d| Tower::new(store, rng, &format!("acmoe.tower.{d}"), r)).collect();
        let tower_cross = Tower::new(store, rng, "acmoe.tower.cross", r);
        Self { experts, gates_single, gate_cross, towers_single, tower_cross, cdsr_experts }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn gate_param(&self, task: Task) -> ParamId {
        match task {
            Task::Single(d) => self.gates_single[d],
            Task::Cross => self.gate_cross,
        }
    }

    pub fn tower(&self, task: Task) -> &Tower {
        match task {
            Task::Single(d) => &self.towers_single[d],
            Task::Cross => &self.tower_cross,
        }
    }

    /// Whether `task` sees expert `k` through a stop-gradient.
    pub fn is_stopped(&self, task: Task, k: usize) -> bool {
        match task {
            Task::Single(_) => k < self.cdsr_experts,
            Task::Cross => k >= self.cdsr_experts,
        }
    }
}

/// `softmax(W_g · flatten(E))`: one distribution over experts per sequence.
pub fn gate(tape: &mut Tape, bound: &Bound, w: ParamId, e: Var, batch: usize, steps: usize) -> Var {
    let width = tape.value(e).cols;
    let flat = tape.reshape(e, batch, steps * width);
    let logits = tape.matmul_nt(flat, bound.var(w));
    tape.softmax_rows(logits)
}

/// Gated expert mixture and tower head for one task.
///
/// With `stop_gradient == false` every expert receives gradient from every
/// task (the vanilla multi-gate mixture).
pub fn mix_task(
    tape: &mut Tape,
    bound: &Bound,
    params: &AcmoeParams,
    task: Task,
    e: Var,
    layout: SeqLayout,
    stop_gradient: bool,
) -> Var {
    let outputs: Vec<Var> = params
        .experts
        .iter()
        .enumerate()
        .map(|(k, expert)| {
            let y = expert_forward(tape, bound, expert, e, layout);
            if stop_gradient && params.is_stopped(task, k) {
                tape.detach(y)
            } else {
                y
            }
        })
        .collect();
    let g = gate(tape, bound, params.gate_param(task), e, layout.batch, layout.steps);
    let mixed = tape.mix(g, &outputs, layout.steps);
    params.tower(task).apply(tape, bound, mixed)
}

/// `h^d( Σ_{k≤j} g_k SG(f^k(E^d)) + Σ_{k>j} g_k f^k(E^d) )`.
pub fn mix_single(
    tape: &mut Tape,
    bound: &Bound,
    params: &AcmoeParams,
    domain: DomainId,
    e: Var,
    layout: SeqLayout,
    stop_gradient: bool,
) -> Var {
    mix_task(tape, bound, params, Task::Single(domain), e, layout, stop_gradient)
}

/// `h^cross( Σ_{k≤j} g_k f^k(E) + Σ_{k>j} g_k SG(f^k(E)) )`.
pub fn mix_cross(tape: &mut Tape, bound: &Bound, params: &AcmoeParams, e: Var, layout: SeqLayout, stop_gradient: bool) -> Var {
    mix_task(tape, bound, params, Task::Cross, e, layout, stop_gradient)
}

/// Outputs of every task for one batch.
#[derive(Clone, Debug)]
pub struct MixtureOutput {
    /// `(Y^d)^single`, `None` for domains without any loss position.
    pub single: Vec<Option<Var>>,
    pub cross: Var,
}

/// Groups cross-view rows by the domain of their target, per user:
/// `out[d][b]` lists the flat rows of user `b` whose target is in `d`, in
/// time order.
pub fn split_cross_output(
    cross_domains: &[Option<DomainId>],
    batch: usize,
    steps: usize,
    num_domains: usize,
) -> Vec<Vec<Vec<usize>>> {
    let mut out = vec![vec![Vec::new(); batch]; num_domains];
    for (row, dom) in cross_domains.iter().enumerate() {
        if let Some(d) = *dom {
            out[d][row / steps].push(row);
        }
    }
    out
}
