//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::{QD_ALPHA_FAST, QD_BETA_SLOW};
use crate::network::TopologyKind;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DISTQ_OUTPUT_DIR";

fn default_alpha() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    0.9
}

fn default_r_max() -> f64 {
    1.0
}

fn default_actions() -> usize {
    2
}

fn default_record_interval() -> u64 {
    100
}

fn default_runs() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn default_q_star_tol() -> f64 {
    1e-12
}

fn default_tie_tol() -> f64 {
    1e-9
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Which environment to learn on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpConfig {
    /// Uniform random transitions and rewards, regenerated every run unless
    /// `seed` pins it.
    Random {
        num_states: usize,
        #[serde(default = "default_actions")]
        actions_per_agent: usize,
        #[serde(default = "default_r_max")]
        r_max: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Markov congestion game; one player per network node.
    Congestion {
        num_rooms: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// An MDP stored as JSON; relative paths resolve against the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub topology: TopologyKind,
    pub num_agents: usize,
    /// Edge list for the custom topology.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

/// How state-action pairs are sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationConfig {
    /// i.i.d. pairs; uniform unless `distribution` is given.
    Iid {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        distribution: Option<Vec<f64>>,
    },
    /// A trajectory under a behaviour policy (uniform by default).
    Markov {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        behavior: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_states: Option<Vec<f64>>,
        #[serde(default)]
        reset_prob: f64,
    },
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self::Iid { distribution: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    DistQ,
    Qd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::DistQ => "dist_q",
            Self::Qd => "qd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist_q" => Ok(Self::DistQ),
            "qd" => Ok(Self::Qd),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithms {
    #[default]
    DistQ,
    Qd,
    Both,
}

impl Algorithms {
    pub fn list(self) -> Vec<Algorithm> {
        match self {
            Self::DistQ => vec![Algorithm::DistQ],
            Self::Qd => vec![Algorithm::Qd],
            Self::Both => vec![Algorithm::DistQ, Algorithm::Qd],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QdConfig {
    pub alpha_fast: f64,
    pub beta_slow: f64,
}

impl Default for QdConfig {
    fn default() -> Self {
        Self {
            alpha_fast: QD_ALPHA_FAST,
            beta_slow: QD_BETA_SLOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-agent step sizes; overrides `alpha` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_alphas: Option<Vec<f64>>,
    pub num_steps: u64,
    #[serde(default = "default_record_interval")]
    pub record_interval: u64,
    #[serde(default = "default_runs")]
    pub num_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub algorithms: Algorithms,
    #[serde(default)]
    pub qd: QdConfig,
    /// Every entry of Q̄₀.
    #[serde(default)]
    pub initial_value: f64,
    /// Verify the lemma suite at every step.
    #[serde(default = "default_true")]
    pub checks: bool,
    /// Value-iteration tolerance for Q*.
    #[serde(default = "default_q_star_tol")]
    pub q_star_tol: f64,
    /// Actions within this distance of the row maximum count as tied when
    /// reading off greedy policies; ties go to the lowest index.
    #[serde(default = "default_tie_tol")]
    pub policy_tie_tol: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolving a relative MDP path against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let MdpConfig::File { path: mdp_path } = &mut config.mdp {
            if mdp_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *mdp_path = dir.join(&*mdp_path);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Structural checks that do not need the network or the MDP. The
    /// step-size condition is checked once the gossip matrix is built.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_runs == 0 {
            return fail("num_runs must be at least 1".into());
        }
        if self.record_interval == 0 {
            return fail("record_interval must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if let Some(alphas) = &self.agent_alphas {
            if alphas.len() != self.network.num_agents {
                return fail(format!(
                    "agent_alphas has {} entries for {} agents",
                    alphas.len(),
                    self.network.num_agents
                ));
            }
            if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                return fail(format!("agent step size {a} outside (0, 1)"));
            }
        }
        for (name, v) in [("qd.alpha_fast", self.qd.alpha_fast), ("qd.beta_slow", self.qd.beta_slow)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} = {v} outside (0, 1)"));
            }
        }
        if !(self.q_star_tol > 0.0) {
            return fail("q_star_tol must be positive".into());
        }
        if !(self.policy_tie_tol >= 0.0) {
            return fail("policy_tie_tol must be non-negative".into());
        }
        if !self.initial_value.is_finite() {
            return fail("initial_value must be finite".into());
        }
        if let ObservationConfig::Markov { reset_prob, .. } = self.observation {
            if !(0.0..1.0).contains(&reset_prob) {
                return fail(format!("reset_prob {reset_prob} outside [0, 1)"));
            }
        }
        if self.network.topology == TopologyKind::Custom && self.network.edges.is_none() {
            return fail("custom topology needs an edge list".into());
        }
        Ok(())
    }

    /// Step size of every agent.
    pub fn alphas(&self) -> Vec<f64> {
        self.agent_alphas
            .clone()
            .unwrap_or_else(|| vec![self.alpha; self.network.num_agents])
    }

    /// SHA-256 of the canonical TOML form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        num_steps = 1000
        [mdp]
        kind = "random"
        num_states = 4
        [network]
        topology = "ring"
        num_agents = 5
    "#;

    #[test]
    fn defaults_follow_the_reference_experiments() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.num_runs, 5);
        assert_eq!(c.record_interval, 100);
        assert_eq!(c.qd, QdConfig { alpha_fast: 0.1, beta_slow: 0.01 });
        assert_eq!(c.observation, ObservationConfig::Iid { distribution: None });
        assert_eq!(c.algorithms.list(), vec![Algorithm::DistQ]);
        assert!(c.checks);
        match c.mdp {
            MdpConfig::Random { actions_per_agent, gamma, r_max, seed, .. } => {
                assert_eq!((actions_per_agent, gamma, r_max, seed), (2, 0.9, 1.0, None));
            }
            _ => panic!("wrong mdp kind"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.observation = ObservationConfig::Markov {
            behavior: None,
            initial_states: Some(vec![0.5, 0.5, 0.0, 0.0]),
            reset_prob: 0.1,
        };
        c.algorithms = Algorithms::Both;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.num_steps += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ("num_runs = 0", "num_runs"),
            ("record_interval = 0", "record_interval"),
            ("alpha = 1.5", "alpha"),
            ("agent_alphas = [0.1, 0.1]", "agent_alphas"),
            ("unknown_key = 3", "unknown"),
        ];
        for (line, what) in bad {
            let text = format!("{line}\n{MINIMAL}");
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{what} accepted");
        }
        let custom = MINIMAL.replace("\"ring\"", "\"custom\"");
        assert!(ExperimentConfig::from_toml(&custom).is_err());
    }

    #[test]
    fn relative_mdp_path_resolves_against_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "num_steps = 1\n[mdp]\nkind = \"file\"\npath = \"m.json\"\n[network]\ntopology = \"star\"\nnum_agents = 3\n",
        )
        .unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.mdp, MdpConfig::File { path: dir.path().join("m.json") });
    }
}
