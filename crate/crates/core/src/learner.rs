//! Distributed Q-learning and the two-timescale QD-style baseline.
//!
//! Both algorithms evolve an [`Ensemble`]: `N` stacked Q-tables, one per
//! agent, stored agent-major in a single flat buffer.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mdp::{row_max, Mdp};
use crate::network::{Graph, WeightMatrix};
use crate::sampling::{Observation, ObservationModel};

/// Default consensus step size of the QD-style baseline.
pub const QD_BETA_SLOW: f64 = 0.01;
/// Default innovation step size of the QD-style baseline.
pub const QD_ALPHA_FAST: f64 = 0.1;

/// Stacked per-agent Q-tables `Q̄_k` with their step counter and step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    num_agents: usize,
    num_pairs: usize,
    num_actions: usize,
    q: Vec<f64>,
    step: u64,
    alphas: Vec<f64>,
}

impl Ensemble {
    /// All-zero tables with a common step size.
    pub fn zeros(mdp: &Mdp, num_agents: usize, alpha: f64) -> Result<Self> {
        Self::from_values(mdp, vec![0.0; num_agents * mdp.num_pairs()], vec![alpha; num_agents])
    }

    /// `values` holds agent `i`'s table at `[i * |S||A|, (i + 1) * |S||A|)`.
    pub fn from_values(mdp: &Mdp, values: Vec<f64>, alphas: Vec<f64>) -> Result<Self> {
        let n = alphas.len();
        if n != mdp.num_agents() {
            return Err(invalid(format!(
                "ensemble has {n} step sizes but the MDP has {} agents",
                mdp.num_agents()
            )));
        }
        if values.len() != n * mdp.num_pairs() {
            return Err(invalid(format!(
                "ensemble of {n} agents needs {} values, got {}",
                n * mdp.num_pairs(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Q-values must be finite"));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(invalid(format!("step size {a} outside [0, 1)")));
        }
        Ok(Self {
            num_agents: n,
            num_pairs: mdp.num_pairs(),
            num_actions: mdp.num_actions(),
            q: values,
            step: 0,
            alphas,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.q[i * self.num_pairs..(i + 1) * self.num_pairs]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i]
    }

    /// The common step size, if all agents share one.
    pub fn common_alpha(&self) -> Option<f64> {
        let a = self.alphas[0];
        self.alphas.iter().all(|&b| b == a).then_some(a)
    }

    pub fn max_alpha(&self) -> f64 {
        self.alphas.iter().copied().fold(0.0, f64::max)
    }

    /// Agent mean `Q^avg`.
    pub fn average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.num_pairs];
        for i in 0..self.num_agents {
            for (a, v) in avg.iter_mut().zip(self.agent(i)) {
                *a += v;
            }
        }
        let n = self.num_agents as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        avg
    }

    pub fn sup_norm(&self) -> f64 {
        self.q.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.num_agents == other.num_agents && self.num_pairs == other.num_pairs
    }
}

/// Temporal-difference error `r + γ max_u Q(s', u) - Q(s, a)` of one table.
pub fn td_error(mdp: &Mdp, q: &[f64], obs: &Observation, agent: usize) -> f64 {
    obs.rewards[agent] + mdp.gamma() * row_max(q, mdp.num_actions(), obs.next_state) - q[obs.pair]
}

/// Checks `α_i ≤ W_ii` for every agent.
pub fn check_step_sizes(ens: &Ensemble, w: &WeightMatrix) -> Result<()> {
    if w.size() != ens.num_agents() {
        return Err(invalid(format!(
            "weight matrix is {0}x{0} but the ensemble has {1} agents",
            w.size(),
            ens.num_agents()
        )));
    }
    for (i, &alpha) in ens.alphas().iter().enumerate() {
        let self_weight = w.self_weight(i);
        if alpha > self_weight {
            return Err(Error::StepSize { agent: i, alpha, self_weight });
        }
    }
    Ok(())
}

/// One distributed Q-learning step written into `next`, which must have the
/// same shape as `cur`. Every table is replaced by the W-weighted average of
/// its neighbourhood; each agent then adds its own TD correction at the
/// observed pair, computed from its pre-gossip table.
pub fn dist_q_step_into(
    cur: &Ensemble,
    w: &WeightMatrix,
    mdp: &Mdp,
    obs: &Observation,
    next: &mut Ensemble,
) -> Result<()> {
    check_step_sizes(cur, w)?;
    if !cur.same_shape(next) {
        return Err(invalid("output ensemble has the wrong shape"));
    }
    let sa = cur.num_pairs;
    for i in 0..cur.num_agents {
        let out = &mut next.q[i * sa..(i + 1) * sa];
        let wii = w.self_weight(i);
        for (o, v) in out.iter_mut().zip(cur.agent(i)) {
            *o = wii * v;
        }
        for &(j, wij) in w.neighbor_weights(i) {
            for (o, v) in out.iter_mut().zip(cur.agent(j)) {
                *o += wij * v;
            }
        }
        out[obs.pair] += cur.alphas[i] * td_error(mdp, cur.agent(i), obs, i);
    }
    next.step = cur.step + 1;
    next.alphas.clone_from(&cur.alphas);
    Ok(())
}

pub fn dist_q_step(ens: &Ensemble, w: &WeightMatrix, mdp: &Mdp, obs: &Observation) -> Result<Ensemble> {
    let mut next = ens.clone();
    dist_q_step_into(ens, w, mdp, obs, &mut next)?;
    Ok(next)
}

/// State of the QD-style baseline: the ensemble (whose step sizes are the
/// innovation step `α_fast`) and the consensus step `β_slow`.
#[derive(Debug, Clone, PartialEq)]
pub struct QdState {
    pub ens: Ensemble,
    pub beta_slow: f64,
}

impl QdState {
    pub fn new(ens: Ensemble, beta_slow: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta_slow) {
            return Err(invalid(format!("consensus step {beta_slow} outside [0, 1)")));
        }
        Ok(Self { ens, beta_slow })
    }

    pub fn alpha_fast(&self) -> f64 {
        self.ens.max_alpha()
    }
}

/// `Q^i ← Q^i - β Σ_{j∈N_i} (Q^i - Q^j)` everywhere, plus `α_fast` times the
/// TD error at the observed pair.
pub fn qd_step_into(
    cur: &Ensemble,
    beta_slow: f64,
    graph: &Graph,
    mdp: &Mdp,
    obs: &Observation,
    next: &mut Ensemble,
) -> Result<()> {
    if graph.num_nodes() != cur.num_agents() {
        return Err(invalid("graph size does not match the ensemble"));
    }
    if !cur.same_shape(next) {
        return Err(invalid("output ensemble has the wrong shape"));
    }
    let sa = cur.num_pairs;
    for i in 0..cur.num_agents {
        let own = cur.agent(i);
        let out = &mut next.q[i * sa..(i + 1) * sa];
        out.copy_from_slice(own);
        for &j in graph.neighbors(i) {
            for ((o, a), b) in out.iter_mut().zip(own).zip(cur.agent(j)) {
                *o -= beta_slow * (a - b);
            }
        }
        out[obs.pair] += cur.alphas[i] * td_error(mdp, own, obs, i);
    }
    next.step = cur.step + 1;
    next.alphas.clone_from(&cur.alphas);
    Ok(())
}

pub fn qd_step(state: &QdState, graph: &Graph, mdp: &Mdp, obs: &Observation) -> Result<QdState> {
    let mut next = state.ens.clone();
    qd_step_into(&state.ens, state.beta_slow, graph, mdp, obs, &mut next)?;
    Ok(QdState { ens: next, beta_slow: state.beta_slow })
}

/// An update rule that can drive [`run`].
pub trait Update {
    fn apply(&self, mdp: &Mdp, cur: &Ensemble, obs: &Observation, next: &mut Ensemble) -> Result<()>;
}

/// Distributed Q-learning with gossip matrix `w`.
pub struct DistQ<'a> {
    pub w: &'a WeightMatrix,
}

impl Update for DistQ<'_> {
    fn apply(&self, mdp: &Mdp, cur: &Ensemble, obs: &Observation, next: &mut Ensemble) -> Result<()> {
        dist_q_step_into(cur, self.w, mdp, obs, next)
    }
}

/// QD-style baseline on `graph` with consensus step `beta_slow`.
pub struct Qd<'a> {
    pub graph: &'a Graph,
    pub beta_slow: f64,
}

impl Update for Qd<'_> {
    fn apply(&self, mdp: &Mdp, cur: &Ensemble, obs: &Observation, next: &mut Ensemble) -> Result<()> {
        qd_step_into(cur, self.beta_slow, self.graph, mdp, obs, next)
    }
}

/// Read-only observer of a run.
pub trait Hook {
    /// Called once with the initial ensemble.
    fn on_start(&mut self, _ens: &Ensemble) -> Result<()> {
        Ok(())
    }

    /// Called after every update. `record` is set every `record_interval`
    /// steps and on the final step.
    fn on_step(&mut self, before: &Ensemble, obs: &Observation, after: &Ensemble, record: bool) -> Result<()>;
}

/// Runs `num_steps` updates from `ens` on observations drawn from `model`.
pub fn run<U: Update + ?Sized, R: Rng + ?Sized>(
    mdp: &Mdp,
    update: &U,
    model: &mut ObservationModel,
    ens: Ensemble,
    num_steps: u64,
    record_interval: u64,
    rng: &mut R,
    hooks: &mut [&mut dyn Hook],
) -> Result<Ensemble> {
    if record_interval == 0 {
        return Err(invalid("record interval must be at least 1"));
    }
    for h in hooks.iter_mut() {
        h.on_start(&ens)?;
    }
    let mut cur = ens;
    let mut next = cur.clone();
    for k in 1..=num_steps {
        let obs = model.next(mdp, rng);
        update.apply(mdp, &cur, &obs, &mut next)?;
        let record = k % record_interval == 0 || k == num_steps;
        for h in hooks.iter_mut() {
            h.on_step(&cur, &obs, &next, record)?;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}
