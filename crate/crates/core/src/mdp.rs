//! Tabular multi-agent MDPs and the Bellman machinery around them.
//!
//! State-action pairs are flattened s-major: pair `(s, a)` lives at index
//! `s * |A| + a`. Joint actions are encoded mixed-radix with agent 0 as the
//! most significant digit, so for two agents with two actions each the
//! joint action `(1, 0)` has index 2.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance for probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;

/// Default value-iteration tolerance.
pub const DEFAULT_VI_TOL: f64 = 1e-10;

/// Raw MDP tables, used for (de)serialisation of explicit MDP files.
///
/// `transition[(s * A + a) * S + s']`, `reward_mean[i][s * A + a]` and
/// `reward_sample[i][(s * A + a) * S + s']`. At least one reward table must
/// be present; a missing mean is derived from the samples, a missing sample
/// table defaults to the constant mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpData {
    pub num_states: usize,
    pub actions_per_agent: Vec<usize>,
    pub transition: Vec<f64>,
    #[serde(default)]
    pub reward_mean: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub reward_sample: Option<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub r_max: f64,
}

/// A multi-agent MDP with a shared state, joint actions and per-agent rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    actions_per_agent: Vec<usize>,
    num_actions: usize,
    transition: Vec<f64>,
    reward_mean: Vec<Vec<f64>>,
    reward_sample: Option<Vec<Vec<f64>>>,
    reward_avg: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl Mdp {
    pub fn new(data: MdpData) -> Result<Self> {
        let MdpData {
            num_states,
            actions_per_agent,
            transition,
            reward_mean,
            reward_sample,
            gamma,
            r_max,
        } = data;
        if num_states == 0 {
            return Err(invalid("MDP needs at least one state"));
        }
        if actions_per_agent.is_empty() || actions_per_agent.contains(&0) {
            return Err(invalid("every agent needs at least one action"));
        }
        let num_actions = joint_action_count(&actions_per_agent)?;
        let num_agents = actions_per_agent.len();
        let num_pairs = num_states
            .checked_mul(num_actions)
            .ok_or_else(|| invalid("state-action space overflows"))?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid(format!("discount {gamma} outside (0, 1)")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(invalid(format!("reward bound {r_max} must be positive")));
        }
        if transition.len() != num_pairs * num_states {
            return Err(invalid(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_pairs * num_states
            )));
        }
        for (x, row) in transition.chunks_exact(num_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(invalid(format!("transition row {x} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(invalid(format!("transition row {x} sums to {sum}")));
            }
        }

        let check_bound = |table: &[f64], what: &str| -> Result<()> {
            match table.iter().find(|r| !(r.abs() <= r_max)) {
                Some(r) => Err(invalid(format!("{what} {r} exceeds R_max = {r_max}"))),
                None => Ok(()),
            }
        };

        if let Some(samples) = &reward_sample {
            if samples.len() != num_agents {
                return Err(invalid("reward_sample must have one table per agent"));
            }
            for table in samples {
                if table.len() != num_pairs * num_states {
                    return Err(invalid("reward_sample table has the wrong length"));
                }
                check_bound(table, "sampled reward")?;
            }
        }

        let reward_mean = match (reward_mean, &reward_sample) {
            (Some(mean), samples) => {
                if mean.len() != num_agents || mean.iter().any(|t| t.len() != num_pairs) {
                    return Err(invalid("reward_mean must be num_agents tables of |S||A|"));
                }
                if let Some(samples) = samples {
                    for (i, (m, smp)) in mean.iter().zip(samples).enumerate() {
                        for x in 0..num_pairs {
                            let row = &transition[x * num_states..(x + 1) * num_states];
                            let expect = expectation(row, &smp[x * num_states..(x + 1) * num_states]);
                            if (expect - m[x]).abs() > PROB_TOL * r_max.max(1.0) {
                                return Err(invalid(format!(
                                    "agent {i} pair {x}: mean reward {} != expected sample reward {expect}",
                                    m[x]
                                )));
                            }
                        }
                    }
                }
                mean
            }
            (None, Some(samples)) => samples
                .iter()
                .map(|smp| {
                    (0..num_pairs)
                        .map(|x| {
                            expectation(
                                &transition[x * num_states..(x + 1) * num_states],
                                &smp[x * num_states..(x + 1) * num_states],
                            )
                        })
                        .collect()
                })
                .collect(),
            (None, None) => return Err(invalid("MDP needs reward_mean or reward_sample")),
        };
        for table in &reward_mean {
            check_bound(table, "mean reward")?;
        }

        let mut reward_avg = vec![0.0; num_pairs];
        for table in &reward_mean {
            for (acc, r) in reward_avg.iter_mut().zip(table) {
                *acc += r;
            }
        }
        for r in &mut reward_avg {
            *r /= num_agents as f64;
        }

        Ok(Self {
            num_states,
            actions_per_agent,
            num_actions,
            transition,
            reward_mean,
            reward_sample,
            reward_avg,
            gamma,
            r_max,
        })
    }

    pub fn to_data(&self) -> MdpData {
        MdpData {
            num_states: self.num_states,
            actions_per_agent: self.actions_per_agent.clone(),
            transition: self.transition.clone(),
            reward_mean: Some(self.reward_mean.clone()),
            reward_sample: self.reward_sample.clone(),
            gamma: self.gamma,
            r_max: self.r_max,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_agents(&self) -> usize {
        self.actions_per_agent.len()
    }

    pub fn actions_per_agent(&self) -> &[usize] {
        &self.actions_per_agent
    }

    /// Joint action count |A| = Π|A_i|.
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// |S||A|.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Bound on any return, R_max / (1 - γ).
    pub fn q_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn pair(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    pub fn state_of(&self, pair: usize) -> usize {
        pair / self.num_actions
    }

    /// Next-state distribution of a state-action pair.
    pub fn transition_row(&self, pair: usize) -> &[f64] {
        &self.transition[pair * self.num_states..(pair + 1) * self.num_states]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    /// Expected reward table R^i of one agent.
    pub fn reward_mean(&self, agent: usize) -> &[f64] {
        &self.reward_mean[agent]
    }

    /// R^avg, the agent mean of the expected rewards.
    pub fn reward_avg(&self) -> &[f64] {
        &self.reward_avg
    }

    pub fn has_reward_samples(&self) -> bool {
        self.reward_sample.is_some()
    }

    /// Realised reward r^i(s, a, s') of one agent.
    pub fn reward(&self, agent: usize, pair: usize, next_state: usize) -> f64 {
        match &self.reward_sample {
            Some(samples) => samples[agent][pair * self.num_states + next_state],
            None => self.reward_mean[agent][pair],
        }
    }

    /// Computes `P v` for a vector over states, i.e. the expected value of
    /// `v(s')` for every state-action pair.
    pub fn expected_next(&self, state_values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(state_values.len(), self.num_states);
        self.transition
            .chunks_exact(self.num_states)
            .map(|row| expectation(row, state_values))
            .collect()
    }

    pub fn encode_joint_action(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.num_agents() {
            return Err(invalid("joint action has the wrong number of components"));
        }
        let mut index = 0;
        for (&a, &n) in actions.iter().zip(&self.actions_per_agent) {
            if a >= n {
                return Err(invalid(format!("action {a} out of range {n}")));
            }
            index = index * n + a;
        }
        Ok(index)
    }

    pub fn decode_joint_action(&self, mut index: usize) -> Vec<usize> {
        let mut actions = vec![0; self.num_agents()];
        for (slot, &n) in actions.iter_mut().zip(&self.actions_per_agent).rev() {
            *slot = index % n;
            index /= n;
        }
        actions
    }
}

fn joint_action_count(actions_per_agent: &[usize]) -> Result<usize> {
    actions_per_agent
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| invalid("joint action count overflows"))
}

fn expectation(probs: &[f64], values: &[f64]) -> f64 {
    probs.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// Maximum entry of row `state` of a flat Q vector.
pub fn row_max(q: &[f64], num_actions: usize, state: usize) -> f64 {
    q[state * num_actions..(state + 1) * num_actions]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Lowest index attaining the row maximum.
pub fn row_argmax(q: &[f64], num_actions: usize, state: usize) -> usize {
    let row = &q[state * num_actions..(state + 1) * num_actions];
    let mut best = 0;
    for (a, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = a;
        }
    }
    best
}

/// Per-state maxima `Π^Q Q` of a flat Q vector.
pub fn state_values(q: &[f64], num_actions: usize) -> Vec<f64> {
    q.chunks_exact(num_actions)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// A Q-function over flattened state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<f64>,
    num_actions: usize,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            values: vec![0.0; num_states * num_actions],
            num_actions,
        }
    }

    pub fn from_values(values: Vec<f64>, num_actions: usize) -> Result<Self> {
        if num_actions == 0 || values.len() % num_actions != 0 {
            return Err(invalid("Q-table length is not a multiple of |A|"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("Q-table has a non-finite entry"));
        }
        Ok(Self { values, num_actions })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_states(&self) -> usize {
        self.values.len() / self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn state_values(&self) -> Vec<f64> {
        state_values(&self.values, self.num_actions)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        sup_dist(&self.values, &other.values)
    }
}

/// A deterministic policy mapping states to joint-action indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub action_of: Vec<usize>,
}

impl Policy {
    /// The |S| x |S||A| selector Π with rows e_s ⊗ e_{π(s)}.
    pub fn selector(&self, num_actions: usize) -> DMatrix<f64> {
        let num_states = self.action_of.len();
        let mut m = DMatrix::zeros(num_states, num_states * num_actions);
        for (s, &a) in self.action_of.iter().enumerate() {
            m[(s, s * num_actions + a)] = 1.0;
        }
        m
    }
}

/// Greedy policy with lowest-index tie-breaking.
pub fn greedy_policy(q: &QTable) -> Policy {
    greedy_policy_within(q.values(), q.num_actions(), 0.0)
}

/// Greedy policy treating every action within `tie_tol` of the row maximum
/// as tied; the lowest such index wins. `tie_tol = 0` is the plain argmax.
pub fn greedy_policy_within(q: &[f64], num_actions: usize, tie_tol: f64) -> Policy {
    let action_of = q
        .chunks_exact(num_actions)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v >= max - tie_tol).unwrap_or(0)
        })
        .collect();
    Policy { action_of }
}

/// Optimal Bellman operator `R^avg + γ P Π^q q`.
pub fn bellman_optimal(mdp: &Mdp, q: &QTable) -> QTable {
    let values = q.state_values();
    let next = mdp.expected_next(&values);
    let gamma = mdp.gamma();
    let out = mdp
        .reward_avg()
        .iter()
        .zip(next)
        .map(|(r, v)| r + gamma * v)
        .collect();
    QTable {
        values: out,
        num_actions: q.num_actions(),
    }
}

#[derive(Debug, Clone)]
pub struct ValueIterationReport {
    pub q: QTable,
    pub iterations: usize,
    /// `‖T q - q‖∞` of the returned table.
    pub residual: f64,
}

/// Upper bound on value-iteration sweeps started from zero.
pub fn value_iteration_sweep_bound(mdp: &Mdp, tol: f64) -> usize {
    let g = mdp.gamma();
    let ratio = mdp.r_max() / ((1.0 - g) * (1.0 - g) * tol);
    (ratio.ln() / (1.0 / g).ln()).ceil().max(1.0) as usize
}

/// Fixed point of [`bellman_optimal`] to within `tol` in sup norm.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> Result<QTable> {
    value_iteration_report(mdp, tol).map(|r| r.q)
}

pub fn value_iteration_report(mdp: &Mdp, tol: f64) -> Result<ValueIterationReport> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance {tol} must be positive")));
    }
    let cap = value_iteration_sweep_bound(mdp, tol) + 1;
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    for iterations in 1..=cap {
        let next = bellman_optimal(mdp, &q);
        let gap = next.sup_dist(&q);
        if gap <= tol {
            // T q is a γ-contraction step closer to Q*, so its residual is
            // at most γ · gap.
            let residual = bellman_optimal(mdp, &next).sup_dist(&next);
            return Ok(ValueIterationReport {
                q: next,
                iterations,
                residual,
            });
        }
        q = next;
    }
    Err(Error::NoConvergence {
        what: "value iteration",
        iterations: cap,
    })
}

/// Parameters of a random MDP with uniform[0,1] transitions and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub num_states: usize,
    pub actions_per_agent: Vec<usize>,
    pub r_max: f64,
    pub gamma: f64,
}

/// Random MDP: transition rows drawn uniform[0,1] and row-normalised,
/// rewards r^i(s,a,s') drawn uniform[0, r_max].
pub fn random_mdp(spec: &RandomMdpSpec, seed: u64) -> Result<Mdp> {
    let num_actions = joint_action_count(&spec.actions_per_agent)?;
    let s = spec.num_states;
    let pairs = s * num_actions;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut transition = Vec::with_capacity(pairs * s);
    for _ in 0..pairs {
        let row: Vec<f64> = (0..s).map(|_| rng.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|p| p / total));
    }
    let reward_sample: Vec<Vec<f64>> = (0..spec.actions_per_agent.len())
        .map(|_| (0..pairs * s).map(|_| rng.random::<f64>() * spec.r_max).collect())
        .collect();

    Mdp::new(MdpData {
        num_states: s,
        actions_per_agent: spec.actions_per_agent.clone(),
        transition,
        reward_mean: None,
        reward_sample: Some(reward_sample),
        gamma: spec.gamma,
        r_max: spec.r_max,
    })
}

/// State index of the congestion game's safe state.
pub const SAFE: usize = 0;
/// State index of the congestion game's distancing state.
pub const DISTANCING: usize = 1;

/// Room occupancy counts of a joint room choice.
pub fn room_counts(rooms: &[usize], num_rooms: usize) -> Vec<usize> {
    let mut counts = vec![0; num_rooms];
    for &r in rooms {
        counts[r] += 1;
    }
    counts
}

/// Two-state Markov congestion game.
///
/// Each agent picks one of `num_rooms` rooms. From the safe state the game
/// moves to distancing when any room holds more than four agents; from the
/// distancing state it returns to safe only when every room holds fewer than
/// two agents. An agent in room `i` (1-based) earns `i * count_i` in the safe
/// state and `(i - 4) * count_i` in the distancing state.
pub fn congestion_game(num_agents: usize, num_rooms: usize, gamma: f64) -> Result<Mdp> {
    if num_agents == 0 || num_rooms == 0 {
        return Err(invalid("congestion game needs at least one agent and one room"));
    }
    let actions_per_agent = vec![num_rooms; num_agents];
    let num_actions = u32::try_from(num_agents)
        .ok()
        .and_then(|n| num_rooms.checked_pow(n))
        .ok_or_else(|| invalid(format!("{num_rooms}^{num_agents} joint actions overflow")))?;
    let num_states = 2;
    let pairs = num_states * num_actions;

    let mut transition = vec![0.0; pairs * num_states];
    let mut reward_mean = vec![vec![0.0; pairs]; num_agents];
    let mut rooms = vec![0usize; num_agents];
    for a in 0..num_actions {
        // mixed-radix decode, agent 0 most significant
        let mut rest = a;
        for slot in rooms.iter_mut().rev() {
            *slot = rest % num_rooms;
            rest /= num_rooms;
        }
        let counts = room_counts(&rooms, num_rooms);
        let crowded = counts.iter().any(|&c| c > 4);
        let clear = counts.iter().all(|&c| c < 2);
        for state in [SAFE, DISTANCING] {
            let pair = state * num_actions + a;
            let next = match state {
                SAFE if crowded => DISTANCING,
                SAFE => SAFE,
                _ if clear => SAFE,
                _ => DISTANCING,
            };
            transition[pair * num_states + next] = 1.0;
            for (agent, &room) in rooms.iter().enumerate() {
                let index = room as f64 + 1.0;
                let weight = if state == SAFE { index } else { index - 4.0 };
                reward_mean[agent][pair] = weight * counts[room] as f64;
            }
        }
    }
    let r_max = reward_mean
        .iter()
        .flatten()
        .fold(0.0f64, |m, r| m.max(r.abs()))
        .max(1.0);

    Mdp::new(MdpData {
        num_states,
        actions_per_agent,
        transition,
        reward_mean: Some(reward_mean),
        reward_sample: None,
        gamma,
        r_max,
    })
}
