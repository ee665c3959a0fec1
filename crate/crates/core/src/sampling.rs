//! Observation models: i.i.d. state-action sampling and Markovian
//! trajectories under a behaviour policy, plus the stationary distribution
//! and mixing profile of the induced chain.
//!
//! The state-action chain of a behaviour policy β factors through the state
//! chain `K(s, s'') = Σ_a β(a|s) P(s, a, s'')`: after the first transition
//! the pair distribution is always `ν ⊗ β` for some state distribution ν, so
//! its total-variation distance to `μ∞ = ν∞ ⊗ β` equals that of ν to ν∞.
//! [`MarkovModel`] exploits this so that stationary and mixing quantities
//! cost `O(|S|²)` per step instead of `O(|S|²|A|²)`.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{Mdp, PROB_TOL};

/// Default iteration cap for mixing profiles.
pub const DEFAULT_MIXING_CAP: usize = 1_000_000;

/// Default tolerance for stationary-distribution power iteration.
pub const DEFAULT_STATIONARY_TOL: f64 = 1e-13;

const STATIONARY_CAP: usize = 50_000_000;

/// One transition `(s, a, s')` with every agent's realised reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: usize,
    pub action: usize,
    /// Flattened index of `(state, action)`.
    pub pair: usize,
    pub next_state: usize,
    pub rewards: Vec<f64>,
}

impl Observation {
    pub fn new(mdp: &Mdp, pair: usize, next_state: usize) -> Self {
        Self {
            state: mdp.state_of(pair),
            action: pair % mdp.num_actions(),
            pair,
            next_state,
            rewards: (0..mdp.num_agents()).map(|i| mdp.reward(i, pair, next_state)).collect(),
        }
    }
}

/// Draws an index from a probability vector by inverse-CDF scan.
fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn check_distribution(d: &[f64], what: &str, strictly_positive: bool) -> Result<()> {
    if d.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if let Some(p) = d.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(invalid(format!("{what} has invalid entry {p}")));
    }
    if strictly_positive && d.iter().any(|&p| p <= 0.0) {
        return Err(invalid(format!("{what} must be strictly positive")));
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(invalid(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Total-variation distance `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// i.i.d. sampling of state-action pairs from a fixed distribution `d`.
#[derive(Debug, Clone)]
pub struct IidModel {
    d: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl IidModel {
    /// Every entry of `d` must be positive and the entries must sum to one.
    pub fn new(d: Vec<f64>) -> Result<Self> {
        check_distribution(&d, "sampling distribution", true)?;
        let index = WeightedIndex::new(&d).map_err(|e| invalid(e.to_string()))?;
        Ok(Self { d, index })
    }

    pub fn uniform(num_pairs: usize) -> Self {
        Self::new(vec![1.0 / num_pairs as f64; num_pairs]).expect("uniform distribution is valid")
    }

    pub fn distribution(&self) -> &[f64] {
        &self.d
    }

    /// `(s, a) ~ d`, `s' ~ P(s, a, ·)`.
    pub fn sample<R: Rng + ?Sized>(&self, mdp: &Mdp, rng: &mut R) -> Observation {
        let pair = self.index.sample(rng);
        let next_state = draw_categorical(mdp.transition_row(pair), rng);
        Observation::new(mdp, pair, next_state)
    }
}

/// Behaviour-policy settings of a Markovian observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSpec {
    /// β(a|s), row-major `|S| x |A|`; every entry must be positive.
    pub behavior: Vec<f64>,
    /// Distribution of the initial state; the initial action follows β.
    pub initial_states: Vec<f64>,
    /// Probability of restarting the chain from `initial_states` after each
    /// transition. The observed next state is still drawn from P, so the
    /// learning target is unchanged; only the visiting order is affected.
    pub reset_prob: f64,
}

impl MarkovSpec {
    pub fn uniform(mdp: &Mdp) -> Self {
        Self {
            behavior: vec![1.0 / mdp.num_actions() as f64; mdp.num_pairs()],
            initial_states: vec![1.0 / mdp.num_states() as f64; mdp.num_states()],
            reset_prob: 0.0,
        }
    }
}

/// A state-action trajectory driven by a behaviour policy.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    spec: MarkovSpec,
    num_actions: usize,
    current: usize,
    state_kernel: ChainMatrix,
    state_stationary: Vec<f64>,
    stationary: Vec<f64>,
}

impl MarkovModel {
    /// Validates the behaviour policy, checks ergodicity of the induced
    /// chain, computes μ∞ and draws the initial state-action pair.
    pub fn new<R: Rng + ?Sized>(mdp: &Mdp, spec: MarkovSpec, rng: &mut R) -> Result<Self> {
        let s = mdp.num_states();
        let na = mdp.num_actions();
        if spec.behavior.len() != mdp.num_pairs() {
            return Err(invalid("behaviour policy must have |S| x |A| entries"));
        }
        for (state, row) in spec.behavior.chunks_exact(na).enumerate() {
            check_distribution(row, &format!("behaviour policy at state {state}"), true)?;
        }
        if spec.initial_states.len() != s {
            return Err(invalid("initial state distribution must have |S| entries"));
        }
        check_distribution(&spec.initial_states, "initial state distribution", false)?;
        if !(0.0..1.0).contains(&spec.reset_prob) {
            return Err(invalid(format!("reset probability {} outside [0, 1)", spec.reset_prob)));
        }

        let state_kernel = ChainMatrix::new(s, state_kernel(mdp, &spec))?;
        let state_stationary = stationary_distribution(&state_kernel, DEFAULT_STATIONARY_TOL)?;
        let stationary = lift(&state_stationary, &spec.behavior, na);

        let state = draw_categorical(&spec.initial_states, rng);
        let action = draw_categorical(&spec.behavior[state * na..(state + 1) * na], rng);
        Ok(Self {
            spec,
            num_actions: na,
            current: state * na + action,
            state_kernel,
            state_stationary,
            stationary,
        })
    }

    pub fn uniform<R: Rng + ?Sized>(mdp: &Mdp, rng: &mut R) -> Result<Self> {
        Self::new(mdp, MarkovSpec::uniform(mdp), rng)
    }

    pub fn spec(&self) -> &MarkovSpec {
        &self.spec
    }

    /// Current chain state as a flattened pair index.
    pub fn current(&self) -> usize {
        self.current
    }

    /// μ∞ over state-action pairs.
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn state_kernel(&self) -> &ChainMatrix {
        &self.state_kernel
    }

    /// Emits `(s_k, a_k, s', r)` and advances the chain: `s' ~ P(s_k, a_k, ·)`
    /// becomes `s_{k+1}` unless a restart fires, then `a_{k+1} ~ β(·|s_{k+1})`.
    pub fn step<R: Rng + ?Sized>(&mut self, mdp: &Mdp, rng: &mut R) -> Observation {
        let pair = self.current;
        let next_state = draw_categorical(mdp.transition_row(pair), rng);
        let obs = Observation::new(mdp, pair, next_state);
        let chain_state = if self.spec.reset_prob > 0.0 && rng.random::<f64>() < self.spec.reset_prob {
            draw_categorical(&self.spec.initial_states, rng)
        } else {
            next_state
        };
        let na = self.num_actions;
        let action = draw_categorical(&self.spec.behavior[chain_state * na..(chain_state + 1) * na], rng);
        self.current = chain_state * na + action;
        obs
    }

    /// Full state-action transition matrix `P_β`. Quadratic in |S||A|; meant
    /// for small models and cross-checks.
    pub fn pair_chain(&self, mdp: &Mdp) -> Result<ChainMatrix> {
        let s = mdp.num_states();
        let na = self.num_actions;
        let n = mdp.num_pairs();
        let mut p = vec![0.0; n * n];
        for x in 0..n {
            let row = self.first_step_states(mdp, x);
            for (s2, &ps) in row.iter().enumerate().take(s) {
                for a2 in 0..na {
                    p[x * n + s2 * na + a2] = ps * self.spec.behavior[s2 * na + a2];
                }
            }
        }
        ChainMatrix::new(n, p)
    }

    /// State distribution one transition after pair `x`.
    fn first_step_states(&self, mdp: &Mdp, x: usize) -> Vec<f64> {
        let rho = self.spec.reset_prob;
        mdp.transition_row(x)
            .iter()
            .zip(&self.spec.initial_states)
            .map(|(p, v)| (1.0 - rho) * p + rho * v)
            .collect()
    }

    /// Worst-case total-variation profile of the state-action chain.
    pub fn mixing_profile(&self, mdp: &Mdp, eps_floor: f64, cap: usize) -> Result<MixingEstimate> {
        check_floor(eps_floor)?;
        let n = mdp.num_pairs();
        let first = self.stationary.iter().fold(0.0f64, |m, &p| m.max(1.0 - p));
        let mut tv_curve = vec![first];
        if first > eps_floor {
            let mut starts: Vec<Vec<f64>> = (0..n).map(|x| self.first_step_states(mdp, x)).collect();
            starts.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
            starts.dedup();
            let rest = worst_case_tv(&self.state_kernel, starts, &self.state_stationary, eps_floor, cap.saturating_sub(1))?;
            tv_curve.extend(rest);
        }
        Ok(MixingEstimate::new(self.stationary.clone(), tv_curve))
    }
}

fn state_kernel(mdp: &Mdp, spec: &MarkovSpec) -> Vec<f64> {
    let s = mdp.num_states();
    let na = mdp.num_actions();
    let rho = spec.reset_prob;
    let mut k = vec![0.0; s * s];
    for state in 0..s {
        for a in 0..na {
            let b = spec.behavior[state * na + a];
            let row = mdp.transition_row(state * na + a);
            for s2 in 0..s {
                k[state * s + s2] += b * ((1.0 - rho) * row[s2] + rho * spec.initial_states[s2]);
            }
        }
    }
    // absorb rounding so rows are stochastic to machine precision
    for row in k.chunks_exact_mut(s) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    k
}

fn lift(state_dist: &[f64], behavior: &[f64], na: usize) -> Vec<f64> {
    state_dist
        .iter()
        .enumerate()
        .flat_map(|(s, &p)| behavior[s * na..(s + 1) * na].iter().map(move |b| p * b))
        .collect()
}

/// A validated row-stochastic square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMatrix {
    n: usize,
    p: Vec<f64>,
}

impl ChainMatrix {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        if n == 0 || p.len() != n * n {
            return Err(invalid("chain matrix must be non-empty and square"));
        }
        for (i, row) in p.chunks_exact(n).enumerate() {
            check_distribution(row, &format!("chain row {i}"), false)?;
        }
        Ok(Self { n, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("chain matrix must be square"));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.p)
    }

    /// `out = distᵀ P`.
    pub fn push_forward(&self, dist: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &m) in dist.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += m * p;
            }
        }
    }

    /// True if some power of the matrix is entrywise positive, i.e. the
    /// chain is irreducible and aperiodic. Uses Wielandt's exponent bound
    /// `(n-1)² + 1` and repeated boolean squaring.
    pub fn is_primitive(&self) -> bool {
        let n = self.n;
        let bound = (n - 1) * (n - 1) + 1;
        let mut pattern: Vec<bool> = self.p.iter().map(|&p| p > 0.0).collect();
        let mut exponent = 1usize;
        while exponent < bound {
            let mut next = vec![false; n * n];
            for i in 0..n {
                for k in 0..n {
                    if pattern[i * n + k] {
                        for j in 0..n {
                            next[i * n + j] |= pattern[k * n + j];
                        }
                    }
                }
            }
            pattern = next;
            exponent *= 2;
        }
        pattern.iter().all(|&b| b)
    }
}

/// Stationary distribution by power iteration from the uniform vector,
/// stopping once successive iterates differ by less than `tol` in ℓ₁.
pub fn stationary_distribution(chain: &ChainMatrix, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if !chain.is_primitive() {
        return Err(Error::NotErgodic(
            "no power of the transition matrix is entrywise positive".into(),
        ));
    }
    let n = chain.size();
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..STATIONARY_CAP {
        chain.push_forward(&mu, &mut next);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|p| *p /= total);
        let delta: f64 = mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut mu, &mut next);
        if delta < tol {
            if let Some(p) = mu.iter().find(|&&p| !(p > 0.0)) {
                return Err(Error::NotErgodic(format!("stationary mass {p} is not positive")));
            }
            return Ok(mu);
        }
    }
    Err(Error::NoConvergence {
        what: "stationary distribution",
        iterations: STATIONARY_CAP,
    })
}

fn check_floor(eps_floor: f64) -> Result<()> {
    if !(eps_floor > 0.0 && eps_floor <= 0.25) {
        return Err(invalid(format!("mixing floor {eps_floor} must lie in (0, 1/4]")));
    }
    Ok(())
}

/// Propagates each start distribution through the chain and records the
/// worst TV distance to `target` at every step, including step 0, until it
/// drops to `eps_floor`.
fn worst_case_tv(
    chain: &ChainMatrix,
    mut dists: Vec<Vec<f64>>,
    target: &[f64],
    eps_floor: f64,
    cap: usize,
) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    let mut scratch = vec![0.0; chain.size()];
    for _ in 0..=cap {
        let worst = dists.iter().fold(0.0f64, |m, d| m.max(total_variation(d, target)));
        curve.push(worst);
        if worst <= eps_floor {
            return Ok(curve);
        }
        for d in &mut dists {
            chain.push_forward(d, &mut scratch);
            d.copy_from_slice(&scratch);
        }
    }
    Err(Error::NoConvergence {
        what: "mixing profile",
        iterations: cap,
    })
}

/// Worst-case TV curve `max_x d_TV(e_xᵀ Pᵏ, μ∞)` of a dense chain.
pub fn mixing_profile(chain: &ChainMatrix, mu_inf: &[f64], eps_floor: f64, cap: usize) -> Result<MixingEstimate> {
    check_floor(eps_floor)?;
    check_distribution(mu_inf, "stationary distribution", true)?;
    let n = chain.size();
    let starts = (0..n)
        .map(|x| {
            let mut e = vec![0.0; n];
            e[x] = 1.0;
            e
        })
        .collect();
    let curve = worst_case_tv(chain, starts, mu_inf, eps_floor, cap)?;
    Ok(MixingEstimate::new(mu_inf.to_vec(), curve))
}

/// Stationary distribution and worst-case TV curve of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingEstimate {
    pub mu_inf: Vec<f64>,
    pub tv_curve: Vec<f64>,
    /// τ(1/4).
    pub t_mix: usize,
}

impl MixingEstimate {
    fn new(mu_inf: Vec<f64>, tv_curve: Vec<f64>) -> Self {
        let t_mix = first_below(&tv_curve, 0.25).expect("curve is computed down to at most 1/4");
        Self { mu_inf, tv_curve, t_mix }
    }

    /// τ(ε): first step whose worst-case TV distance is at most ε, or `None`
    /// if ε lies below the floor the curve was computed to.
    pub fn tau(&self, eps: f64) -> Option<usize> {
        first_below(&self.tv_curve, eps)
    }

    pub fn d_min(&self) -> f64 {
        self.mu_inf.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn d_max(&self) -> f64 {
        self.mu_inf.iter().copied().fold(0.0, f64::max)
    }

    /// `t_mix (1 + 2 ln(1/ε) + ln(1/d_min))`, the usual upper estimate of τ(ε)
    /// for uniformly ergodic chains.
    pub fn tau_upper_estimate(&self, eps: f64) -> f64 {
        self.t_mix as f64 * (1.0 + 2.0 * (1.0 / eps).ln() + (1.0 / self.d_min()).ln())
    }
}

fn first_below(curve: &[f64], eps: f64) -> Option<usize> {
    curve.iter().position(|&v| v <= eps)
}

/// Either observation model, as selected by configuration.
#[derive(Debug, Clone)]
pub enum ObservationModel {
    Iid(IidModel),
    Markov(MarkovModel),
}

impl ObservationModel {
    pub fn next<R: Rng + ?Sized>(&mut self, mdp: &Mdp, rng: &mut R) -> Observation {
        match self {
            Self::Iid(m) => m.sample(mdp, rng),
            Self::Markov(m) => m.step(mdp, rng),
        }
    }

    /// Sampling weights entering D: `d` for i.i.d. sampling, μ∞ otherwise.
    pub fn sampling_weights(&self) -> &[f64] {
        match self {
            Self::Iid(m) => m.distribution(),
            Self::Markov(m) => m.stationary(),
        }
    }
}
