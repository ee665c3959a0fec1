//! Error decomposition, bound evaluation and the comparison systems.
//!
//! Vectors over state-action pairs use the flat layout of [`crate::mdp`].
//! `d` always denotes the sampling weights that make up the diagonal of D:
//! the i.i.d. distribution, or μ∞ for Markovian sampling.
//!
//! The averaged iterate obeys
//! `Q^avg_{k+1} = Q^avg_k + α D(R̄ + γ P Π Q^avg_k - Q^avg_k) + α E_k + α ε^avg_k`,
//! and [`ComparisonState`] runs the lower (linear) and upper (switched)
//! systems that bracket it when driven by the same realised `E_k`, `ε^avg_k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::learner::{td_error, Ensemble, Hook};
use crate::mdp::{row_argmax, state_values, sup_dist, sup_norm, Mdp};
use crate::sampling::Observation;

/// Tolerance for exact identities.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Slack for order relations.
pub const ORDER_TOL: f64 = 1e-9;

/// One row of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub step: u64,
    /// ‖ΘQ̄‖∞
    pub consensus_inf: f64,
    /// ‖ΘQ̄‖₂
    pub consensus_2: f64,
    /// ‖Q^avg - Q*‖∞
    pub optimality_inf: f64,
    /// ‖Q̄ - 1⊗Q*‖∞
    pub total_inf: f64,
    /// Consensus bound at this step; NaN when it does not apply.
    pub consensus_bound: f64,
    /// ‖E_k‖∞ at the recorded ensemble.
    pub ek_inf: f64,
    /// ‖ε^avg‖∞ of the update that produced this step; 0 at step 0.
    pub eps_avg_inf: f64,
}

/// `(‖ΘQ̄‖∞, ‖ΘQ̄‖₂)` where `ΘQ̄ = Q̄ - 1⊗Q^avg`.
pub fn consensus_error(ens: &Ensemble) -> (f64, f64) {
    let avg = ens.average();
    let mut inf = 0.0f64;
    let mut sq = 0.0;
    for i in 0..ens.num_agents() {
        for (v, a) in ens.agent(i).iter().zip(&avg) {
            let dev = v - a;
            inf = inf.max(dev.abs());
            sq += dev * dev;
        }
    }
    (inf, sq.sqrt())
}

/// `‖Q̄ - 1⊗Q*‖∞`.
pub fn total_error(ens: &Ensemble, q_star: &[f64]) -> f64 {
    (0..ens.num_agents()).fold(0.0, |m, i| m.max(sup_dist(ens.agent(i), q_star)))
}

/// Right-hand side of the deterministic consensus bound,
/// `σ₂^{k+1} ‖ΘQ̄₀‖₂ + α (8 R_max / (1-γ)) √(N|S||A|) / (1 - σ₂)`,
/// which dominates `‖ΘQ̄_{k+1}‖∞`.
#[allow(clippy::too_many_arguments)]
pub fn consensus_bound(
    k: u64,
    sigma2: f64,
    alpha: f64,
    r_max: f64,
    gamma: f64,
    num_agents: usize,
    num_pairs: usize,
    theta0_2: f64,
) -> f64 {
    geometric_term(sigma2, k + 1) * theta0_2 + consensus_bias(sigma2, alpha, r_max, gamma, num_agents, num_pairs)
}

fn consensus_bias(sigma2: f64, alpha: f64, r_max: f64, gamma: f64, num_agents: usize, num_pairs: usize) -> f64 {
    alpha * 8.0 * r_max / (1.0 - gamma) * ((num_agents * num_pairs) as f64).sqrt() / (1.0 - sigma2)
}

fn geometric_term(sigma2: f64, exponent: u64) -> f64 {
    if sigma2 == 0.0 {
        if exponent == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        sigma2.powf(exponent as f64)
    }
}

/// The consensus bound with its constants fixed for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusBound {
    pub sigma2: f64,
    pub alpha: f64,
    pub r_max: f64,
    pub gamma: f64,
    pub num_agents: usize,
    pub num_pairs: usize,
    pub theta0_2: f64,
}

impl ConsensusBound {
    /// Constants for a run starting from `ens0`; per-agent step sizes enter
    /// through their maximum.
    pub fn new(mdp: &Mdp, ens0: &Ensemble, sigma2: f64) -> Self {
        Self {
            sigma2,
            alpha: ens0.max_alpha(),
            r_max: mdp.r_max(),
            gamma: mdp.gamma(),
            num_agents: ens0.num_agents(),
            num_pairs: ens0.num_pairs(),
            theta0_2: consensus_error(ens0).1,
        }
    }

    /// Bound on `‖ΘQ̄_{k+1}‖∞`.
    pub fn rhs(&self, k: u64) -> f64 {
        consensus_bound(
            k,
            self.sigma2,
            self.alpha,
            self.r_max,
            self.gamma,
            self.num_agents,
            self.num_pairs,
            self.theta0_2,
        )
    }

    /// Bound on `‖ΘQ̄_m‖∞`; at `m = 0` this is `‖ΘQ̄₀‖₂` plus the bias.
    pub fn at_step(&self, m: u64) -> f64 {
        match m {
            0 => self.theta0_2 + self.bias(),
            m => self.rhs(m - 1),
        }
    }

    /// Limit of the bound as k grows.
    pub fn bias(&self) -> f64 {
        consensus_bias(self.sigma2, self.alpha, self.r_max, self.gamma, self.num_agents, self.num_pairs)
    }
}

/// Agent mean of the per-state maxima, `(1/N) Σ_i Π^{Q^i} Q^i`.
fn mean_state_values(ens: &Ensemble) -> Vec<f64> {
    let na = ens.num_actions();
    let n = ens.num_agents() as f64;
    let mut out = state_values(ens.agent(0), na);
    for i in 1..ens.num_agents() {
        for (o, v) in out.iter_mut().zip(state_values(ens.agent(i), na)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Expected TD vector `Δ^i(Q) = D (R^i + γ P Π^Q Q - Q)` of one agent.
pub fn expected_td(mdp: &Mdp, agent: usize, q: &[f64], d: &[f64]) -> Vec<f64> {
    let next = mdp.expected_next(&state_values(q, mdp.num_actions()));
    let gamma = mdp.gamma();
    mdp.reward_mean(agent)
        .iter()
        .zip(&next)
        .zip(q)
        .zip(d)
        .map(|(((r, p), v), w)| w * (r + gamma * p - v))
        .collect()
}

/// `ε^avg = (1/N) Σ_i (δ^i(o, Q^i) - Δ^i(Q^i))`, where `δ^i` is the TD
/// error of agent `i` placed at the observed pair.
pub fn epsilon_avg(mdp: &Mdp, ens: &Ensemble, obs: &Observation, d: &[f64]) -> Vec<f64> {
    let n = ens.num_agents() as f64;
    let gamma = mdp.gamma();
    let next = mdp.expected_next(&mean_state_values(ens));
    let avg = ens.average();
    let mut eps: Vec<f64> = mdp
        .reward_avg()
        .iter()
        .zip(&next)
        .zip(&avg)
        .zip(d)
        .map(|(((r, p), v), w)| -w * (r + gamma * p - v))
        .collect();
    let mean_td: f64 = (0..ens.num_agents()).map(|i| td_error(mdp, ens.agent(i), obs, i)).sum::<f64>() / n;
    eps[obs.pair] += mean_td;
    eps
}

/// `4 R_max / (1-γ)`.
pub fn epsilon_bound(mdp: &Mdp) -> f64 {
    4.0 * mdp.r_max() / (1.0 - mdp.gamma())
}

/// `E_k = (γ/N) Σ_i D P (Π^{Q^i} Q^i - Π^{Q^avg} Q^avg)`.
pub fn e_k(mdp: &Mdp, ens: &Ensemble, d: &[f64]) -> Vec<f64> {
    let avg_max = state_values(&ens.average(), mdp.num_actions());
    let diff: Vec<f64> = mean_state_values(ens).iter().zip(&avg_max).map(|(a, b)| a - b).collect();
    let gamma = mdp.gamma();
    mdp.expected_next(&diff).iter().zip(d).map(|(p, w)| gamma * w * p).collect()
}

/// `γ d_max ‖ΘQ̄‖∞`.
pub fn e_k_bound(mdp: &Mdp, d: &[f64], consensus_inf: f64) -> f64 {
    mdp.gamma() * d.iter().copied().fold(0.0, f64::max) * consensus_inf
}

/// Greedy action of `q` in every state, ties to the lowest index.
fn greedy(q: &[f64], na: usize) -> Vec<usize> {
    (0..q.len() / na).map(|s| row_argmax(q, na, s)).collect()
}

/// `A_Q = I + α D (γ P Π^Q - I)` as a dense `|S||A| x |S||A|` matrix.
pub fn a_q_matrix(mdp: &Mdp, d: &[f64], alpha: f64, q: &[f64]) -> DMatrix<f64> {
    let sa = mdp.num_pairs();
    let na = mdp.num_actions();
    let pi = greedy(q, na);
    let gamma = mdp.gamma();
    let mut a = DMatrix::identity(sa, sa);
    for x in 0..sa {
        a[(x, x)] -= alpha * d[x];
        for (s2, &p) in mdp.transition_row(x).iter().enumerate() {
            a[(x, s2 * na + pi[s2])] += alpha * d[x] * gamma * p;
        }
    }
    a
}

/// `A_Q v` without forming the matrix; `policy_q` selects Π^Q.
pub fn a_q_apply(mdp: &Mdp, d: &[f64], alpha: f64, policy_q: &[f64], v: &[f64]) -> Vec<f64> {
    let na = mdp.num_actions();
    let pi = greedy(policy_q, na);
    let selected: Vec<f64> = pi.iter().enumerate().map(|(s, &a)| v[s * na + a]).collect();
    let next = mdp.expected_next(&selected);
    let gamma = mdp.gamma();
    v.iter()
        .zip(&next)
        .zip(d)
        .map(|((x, p), w)| x + alpha * w * (gamma * p - x))
        .collect()
}

/// `‖A_Q‖∞`. All entries of A_Q are nonnegative when `α d ≤ 1`, so row `x`
/// sums to `1 - α d_x (1-γ)` whatever the policy.
pub fn a_q_inf_norm(mdp: &Mdp, d: &[f64], alpha: f64) -> f64 {
    let gamma = mdp.gamma();
    d.iter()
        .map(|&w| (1.0 - alpha * w).abs() + alpha * w * gamma)
        .fold(0.0, f64::max)
}

/// `1 - (1-γ) d_min α`.
pub fn a_q_norm_bound(mdp: &Mdp, d: &[f64], alpha: f64) -> f64 {
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    1.0 - (1.0 - mdp.gamma()) * d_min * alpha
}

/// `b_Q = γ D P (Π^Q - Π^{Q*}) Q*`.
pub fn b_q(mdp: &Mdp, d: &[f64], q: &[f64], q_star: &[f64]) -> Vec<f64> {
    let na = mdp.num_actions();
    let pi = greedy(q, na);
    let pi_star = greedy(q_star, na);
    let diff: Vec<f64> = pi
        .iter()
        .zip(&pi_star)
        .enumerate()
        .map(|(s, (&a, &b))| q_star[s * na + a] - q_star[s * na + b])
        .collect();
    let gamma = mdp.gamma();
    mdp.expected_next(&diff).iter().zip(d).map(|(p, w)| gamma * w * p).collect()
}

/// Lower and upper comparison systems, stored relative to Q*.
///
/// Q* should be accurate well below [`ORDER_TOL`]: its Bellman residual
/// enters the true iterate but not the comparison systems.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonState {
    q_star: Vec<f64>,
    lower_tilde: Vec<f64>,
    upper_tilde: Vec<f64>,
}

impl ComparisonState {
    /// Both systems start at `q_avg0`.
    pub fn new(q_avg0: &[f64], q_star: &[f64]) -> Self {
        let tilde: Vec<f64> = q_avg0.iter().zip(q_star).map(|(a, b)| a - b).collect();
        Self {
            q_star: q_star.to_vec(),
            lower_tilde: tilde.clone(),
            upper_tilde: tilde,
        }
    }

    pub fn lower(&self) -> Vec<f64> {
        self.lower_tilde.iter().zip(&self.q_star).map(|(a, b)| a + b).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.upper_tilde.iter().zip(&self.q_star).map(|(a, b)| a + b).collect()
    }

    /// Advances both systems with the realised noise of the main run:
    /// `Q̃^l ← A_{Q*} Q̃^l + α(ε + E)` and `Q̃^u ← A_{Q^u} Q̃^u + α(ε + E)`.
    pub fn step(&mut self, mdp: &Mdp, d: &[f64], alpha: f64, eps: &[f64], ek: &[f64]) {
        let upper = self.upper();
        let lower = a_q_apply(mdp, d, alpha, &self.q_star, &self.lower_tilde);
        let upper = a_q_apply(mdp, d, alpha, &upper, &self.upper_tilde);
        for (x, (l, u)) in lower.into_iter().zip(upper).enumerate() {
            let noise = alpha * (eps[x] + ek[x]);
            self.lower_tilde[x] = l + noise;
            self.upper_tilde[x] = u + noise;
        }
    }

    /// Largest amount by which `q_avg` escapes `[lower, upper]`; non-positive
    /// when the sandwich holds.
    pub fn sandwich_gap(&self, q_avg: &[f64]) -> f64 {
        let mut gap = f64::NEG_INFINITY;
        for x in 0..q_avg.len() {
            let tilde = q_avg[x] - self.q_star[x];
            gap = gap.max(self.lower_tilde[x] - tilde).max(tilde - self.upper_tilde[x]);
        }
        gap
    }
}

/// `(Σ_{i=0}^k a^{k-i} b^i, a^{k/2}/(1-b) + b^{k/2}/(1-a))`.
pub fn geometric_sum_check(a: f64, b: f64, k: u32) -> Result<(f64, f64)> {
    if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
        return Err(invalid("geometric ratios must lie in (0, 1)"));
    }
    let exact: f64 = (0..=k).map(|i| a.powi((k - i) as i32) * b.powi(i as i32)).sum();
    let half = k as f64 / 2.0;
    let bound = a.powf(half) / (1.0 - b) + b.powf(half) / (1.0 - a);
    Ok((exact, bound))
}

/// The checked inequalities and identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Boundedness,
    ConsensusBound,
    Sandwich,
    AqNorm,
    EkBound,
    EpsAvgBound,
    MeanIdentity,
    Triangle,
}

impl Lemma {
    pub fn name(self) -> &'static str {
        match self {
            Self::Boundedness => "boundedness of the iterates",
            Self::ConsensusBound => "deterministic consensus bound",
            Self::Sandwich => "comparison-system sandwich",
            Self::AqNorm => "infinity norm of A_Q",
            Self::EkBound => "E_k bound",
            Self::EpsAvgBound => "eps_avg bound",
            Self::MeanIdentity => "averaged dynamics identity",
            Self::Triangle => "error decomposition triangle inequality",
        }
    }
}

/// A failed check: `value` exceeded `bound` at `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub lemma: Lemma,
    pub step: u64,
    pub value: f64,
    pub bound: f64,
}

/// Hook that records [`ErrorRecord`]s and, optionally, checks every lemma
/// at every step.
pub struct LemmaMonitor<'a> {
    mdp: &'a Mdp,
    d: Vec<f64>,
    q_star: Vec<f64>,
    bound: Option<ConsensusBound>,
    sigma2: Option<f64>,
    checks: bool,
    comparison_enabled: bool,
    comparison: Option<ComparisonState>,
    records: Vec<ErrorRecord>,
    violations: Vec<Violation>,
    violation_count: usize,
    last_eps_inf: f64,
    max_sandwich_gap: f64,
}

const MAX_STORED_VIOLATIONS: usize = 64;

impl<'a> LemmaMonitor<'a> {
    /// `sigma2` enables the consensus bound (it only applies to
    /// distributed Q-learning); `checks` turns on per-step verification.
    pub fn new(mdp: &'a Mdp, d: Vec<f64>, q_star: Vec<f64>, sigma2: Option<f64>, checks: bool) -> Result<Self> {
        if d.len() != mdp.num_pairs() || q_star.len() != mdp.num_pairs() {
            return Err(invalid("sampling weights and Q* must have one entry per pair"));
        }
        Ok(Self {
            mdp,
            d,
            q_star,
            bound: None,
            sigma2,
            checks,
            comparison_enabled: checks,
            comparison: None,
            records: Vec::new(),
            violations: Vec::new(),
            violation_count: 0,
            last_eps_inf: 0.0,
            max_sandwich_gap: f64::NEG_INFINITY,
        })
    }

    /// Turns the comparison systems on or off (on by default when checking).
    pub fn with_comparison(mut self, enabled: bool) -> Self {
        self.comparison_enabled = enabled;
        self
    }

    pub fn records(&self) -> &[ErrorRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ErrorRecord> {
        self.records
    }

    /// The first violations found (at most a fixed number are kept).
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn violation_count(&self) -> usize {
        self.violation_count
    }

    /// Largest sandwich gap seen; non-positive when the sandwich held.
    pub fn max_sandwich_gap(&self) -> f64 {
        self.max_sandwich_gap
    }

    pub fn consensus_bound(&self) -> Option<&ConsensusBound> {
        self.bound.as_ref()
    }

    fn check(&mut self, lemma: Lemma, step: u64, value: f64, bound: f64) {
        if !(value <= bound) {
            self.violation_count += 1;
            if self.violations.len() < MAX_STORED_VIOLATIONS {
                self.violations.push(Violation { lemma, step, value, bound });
            }
        }
    }

    fn record(&mut self, ens: &Ensemble) {
        let (consensus_inf, consensus_2) = consensus_error(ens);
        let avg = ens.average();
        let optimality_inf = sup_dist(&avg, &self.q_star);
        let total_inf = total_error(ens, &self.q_star);
        let ek_inf = sup_norm(&e_k(self.mdp, ens, &self.d));
        let consensus_bound = self.bound.map_or(f64::NAN, |b| b.at_step(ens.step()));
        if self.checks {
            let step = ens.step();
            self.check(Lemma::Triangle, step, total_inf, consensus_inf + optimality_inf + IDENTITY_TOL);
        }
        self.records.push(ErrorRecord {
            step: ens.step(),
            consensus_inf,
            consensus_2,
            optimality_inf,
            total_inf,
            consensus_bound,
            ek_inf,
            eps_avg_inf: if ens.step() == 0 { 0.0 } else { self.last_eps_inf },
        });
    }

    fn check_step(&mut self, before: &Ensemble, obs: &Observation, after: &Ensemble, eps: &[f64]) {
        let mdp = self.mdp;
        let step = after.step();

        self.check(Lemma::Boundedness, step, after.sup_norm(), mdp.q_bound() + ORDER_TOL);
        self.check(Lemma::EpsAvgBound, step - 1, sup_norm(eps), epsilon_bound(mdp));

        let ek = e_k(mdp, before, &self.d);
        let cons_before = consensus_error(before).0;
        self.check(Lemma::EkBound, step - 1, sup_norm(&ek), e_k_bound(mdp, &self.d, cons_before) + ORDER_TOL);

        let n = before.num_agents() as f64;
        let mut expected = before.average();
        let innovation: f64 = (0..before.num_agents())
            .map(|i| before.alpha(i) * td_error(mdp, before.agent(i), obs, i))
            .sum();
        expected[obs.pair] += innovation / n;
        self.check(Lemma::MeanIdentity, step, sup_dist(&after.average(), &expected), IDENTITY_TOL);

        if let Some(bound) = self.bound {
            self.check(Lemma::ConsensusBound, step, consensus_error(after).0, bound.at_step(step) + ORDER_TOL);
        }

        if let (Some(cmp), Some(alpha)) = (self.comparison.as_mut(), before.common_alpha()) {
            cmp.step(mdp, &self.d, alpha, eps, &ek);
            let gap = cmp.sandwich_gap(&after.average());
            self.max_sandwich_gap = self.max_sandwich_gap.max(gap);
            self.check(Lemma::Sandwich, step, gap, ORDER_TOL);
        }
    }
}

impl Hook for LemmaMonitor<'_> {
    fn on_start(&mut self, ens: &Ensemble) -> Result<()> {
        if let Some(sigma2) = self.sigma2 {
            self.bound = Some(ConsensusBound::new(self.mdp, ens, sigma2));
        }
        if self.checks {
            self.check(Lemma::Boundedness, 0, ens.sup_norm(), self.mdp.q_bound() + ORDER_TOL);
            for &alpha in ens.alphas() {
                let norm = a_q_inf_norm(self.mdp, &self.d, alpha);
                self.check(Lemma::AqNorm, 0, norm, a_q_norm_bound(self.mdp, &self.d, alpha) + IDENTITY_TOL);
            }
            if let Some(bound) = self.bound {
                self.check(Lemma::ConsensusBound, 0, consensus_error(ens).0, bound.at_step(0) + ORDER_TOL);
            }
        }
        if self.comparison_enabled && ens.common_alpha().is_some() {
            self.comparison = Some(ComparisonState::new(&ens.average(), &self.q_star));
        }
        self.record(ens);
        Ok(())
    }

    fn on_step(&mut self, before: &Ensemble, obs: &Observation, after: &Ensemble, record: bool) -> Result<()> {
        if self.checks || self.comparison.is_some() || record {
            let eps = epsilon_avg(self.mdp, before, obs, &self.d);
            self.last_eps_inf = sup_norm(&eps);
            if self.checks {
                self.check_step(before, obs, after, &eps);
            } else if let (Some(cmp), Some(alpha)) = (self.comparison.as_mut(), before.common_alpha()) {
                let ek = e_k(self.mdp, before, &self.d);
                cmp.step(self.mdp, &self.d, alpha, &eps, &ek);
                let gap = cmp.sandwich_gap(&after.average());
                self.max_sandwich_gap = self.max_sandwich_gap.max(gap);
            }
        }
        if record {
            self.record(after);
        }
        Ok(())
    }
}
