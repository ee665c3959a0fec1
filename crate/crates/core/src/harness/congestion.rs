//! Greedy-policy report for the congestion game.

use std::fs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{greedy_policy_within, room_counts, Mdp, Policy, DISTANCING, SAFE};

use super::config::{Algorithm, ExperimentConfig, MdpConfig};
use super::experiment::{build_mdp, check_output_dir, run_experiment, ExperimentReport};

/// Greedy joint action in one state and the room occupancy it produces.
/// Rooms are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChoice {
    pub state: String,
    pub rooms: Vec<usize>,
    pub occupancy: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub agent: usize,
    pub states: Vec<StateChoice>,
    pub matches_value_iteration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPolicy {
    pub seed: u64,
    pub agents: Vec<AgentPolicy>,
    /// Greedy policy of the agent-mean table.
    pub average: Vec<StateChoice>,
    pub final_consensus_inf: f64,
    pub initial_consensus_inf: f64,
}

impl RunPolicy {
    pub fn all_agents_match(&self) -> bool {
        self.agents.iter().all(|a| a.matches_value_iteration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionReport {
    pub config_hash: String,
    pub num_agents: usize,
    pub num_rooms: usize,
    pub tie_tol: f64,
    pub value_iteration: Vec<StateChoice>,
    pub runs: Vec<RunPolicy>,
}

fn state_name(state: usize) -> &'static str {
    match state {
        SAFE => "safe",
        DISTANCING => "distancing",
        _ => "unknown",
    }
}

/// Reads off the joint room choice of `policy` in every state.
pub fn describe_policy(mdp: &Mdp, policy: &Policy, num_rooms: usize) -> Vec<StateChoice> {
    policy
        .action_of
        .iter()
        .enumerate()
        .map(|(state, &a)| {
            let rooms = mdp.decode_joint_action(a);
            StateChoice {
                state: state_name(state).to_string(),
                occupancy: room_counts(&rooms, num_rooms),
                rooms: rooms.iter().map(|r| r + 1).collect(),
            }
        })
        .collect()
}

/// Builds the report from the final ensembles of a dist-Q experiment.
pub fn policy_report(
    mdp: &Mdp,
    num_rooms: usize,
    report: &ExperimentReport,
    q_star: &[f64],
    tie_tol: f64,
) -> CongestionReport {
    let na = mdp.num_actions();
    let optimal = greedy_policy_within(q_star, na, tie_tol);
    let runs = report
        .runs
        .iter()
        .filter_map(|run| {
            let out = run.algorithms.iter().find(|a| a.algorithm == Algorithm::DistQ)?;
            let ens = &out.final_ensemble;
            let agents = (0..ens.num_agents())
                .map(|i| {
                    let policy = greedy_policy_within(ens.agent(i), na, tie_tol);
                    AgentPolicy {
                        agent: i,
                        matches_value_iteration: policy == optimal,
                        states: describe_policy(mdp, &policy, num_rooms),
                    }
                })
                .collect();
            let average = describe_policy(mdp, &greedy_policy_within(&ens.average(), na, tie_tol), num_rooms);
            Some(RunPolicy {
                seed: run.seed,
                agents,
                average,
                initial_consensus_inf: out.trace.rows.first().map_or(f64::NAN, |r| r.consensus_inf),
                final_consensus_inf: out.trace.last().map_or(f64::NAN, |r| r.consensus_inf),
            })
        })
        .collect();
    CongestionReport {
        config_hash: report.config_hash.clone(),
        num_agents: mdp.num_agents(),
        num_rooms,
        tie_tol,
        value_iteration: describe_policy(mdp, &optimal, num_rooms),
        runs,
    }
}

/// Runs the congestion experiment, writes the traces and
/// `policy_report.json`, and returns both.
pub fn run_congestion(config: &ExperimentConfig) -> Result<(ExperimentReport, CongestionReport)> {
    let MdpConfig::Congestion { num_rooms, .. } = config.mdp else {
        return Err(Error::Config("the congestion command needs mdp.kind = \"congestion\"".into()));
    };
    if !config.algorithms.list().contains(&Algorithm::DistQ) {
        return Err(Error::Config("the congestion command needs the dist_q algorithm".into()));
    }
    check_output_dir(&config.output_dir, &config.hash())?;
    let report = run_experiment(config)?;
    let mdp = build_mdp(config, config.base_seed)?;
    let q_star = crate::mdp::value_iteration(&mdp, config.q_star_tol)?;
    let policy = policy_report(&mdp, num_rooms, &report, q_star.values(), config.policy_tie_tol);
    fs::write(
        config.output_dir.join("policy_report.json"),
        serde_json::to_string_pretty(&policy)?,
    )?;
    Ok((report, policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::congestion_game;

    #[test]
    fn describe_uses_one_based_rooms() {
        let mdp = congestion_game(3, 2, 0.9).unwrap();
        // agent 0 most significant: index 0b011 = rooms (0, 1, 1)
        let policy = Policy { action_of: vec![3, 0] };
        let d = describe_policy(&mdp, &policy, 2);
        assert_eq!(d[0], StateChoice { state: "safe".into(), rooms: vec![1, 2, 2], occupancy: vec![1, 2] });
        assert_eq!(d[1].occupancy, vec![3, 0]);
        assert_eq!(d[1].state, "distancing");
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = CongestionReport {
            config_hash: "h".into(),
            num_agents: 2,
            num_rooms: 2,
            tie_tol: 1e-9,
            value_iteration: vec![StateChoice { state: "safe".into(), rooms: vec![2, 2], occupancy: vec![0, 2] }],
            runs: vec![],
        };
        let text = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<CongestionReport>(&text).unwrap(), report);
    }

    #[test]
    fn rejects_non_congestion_config() {
        let c = ExperimentConfig::from_toml(
            "num_steps = 1\n[mdp]\nkind = \"random\"\nnum_states = 2\n[network]\ntopology = \"ring\"\nnum_agents = 3\n",
        )
        .unwrap();
        assert!(matches!(run_congestion(&c), Err(Error::Config(_))));
    }
}
