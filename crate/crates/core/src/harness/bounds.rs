//! Informational quantities that enter the error bounds.

use std::fmt;

use serde::Serialize;

use crate::error::Result;

use super::config::ExperimentConfig;
use super::experiment::RunSetup;

/// Spectral, sampling and mixing constants of one configuration, plus the
/// step-size prescriptions of the sample-complexity results evaluated with
/// every hidden constant set to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub sigma2: f64,
    pub min_self_weight: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub t_mix: Option<usize>,
    pub epsilon: f64,
    pub alpha_ceiling_iid: f64,
    pub alpha_ceiling_markov: Option<f64>,
}

impl BoundsReport {
    pub fn new(config: &ExperimentConfig, epsilon: f64) -> Result<Self> {
        let setup = RunSetup::new(config, config.base_seed)?;
        let gamma = setup.mdp.gamma();
        let r_max = setup.mdp.r_max();
        let sa = setup.mdp.num_pairs() as f64;
        let sigma2 = setup.w.sigma2();
        let (d_min, d_max) = (setup.d_min(), setup.d_max());
        let h = 1.0 - gamma;

        let consensus_term = h.powi(3) * d_min.powi(2) * (1.0 - sigma2) / (r_max * d_max.powi(2) * sa.sqrt()) * epsilon;
        let iid = (h.powi(5) * d_min.powi(3) / (r_max.powi(2) * d_max.powi(2)) * epsilon.powi(2)).min(consensus_term);
        let markov = setup.t_mix.map(|t| {
            let eps2 = epsilon * epsilon;
            let mixing_term = eps2 / (1.0 / eps2).ln() * h.powi(5) * d_min.powi(3) / (t.max(1) as f64 * d_max.powi(2));
            mixing_term.min(consensus_term)
        });
        Ok(Self {
            sigma2,
            min_self_weight: setup.w.min_self_weight(),
            d_min,
            d_max,
            t_mix: setup.t_mix,
            epsilon,
            alpha_ceiling_iid: iid.min(setup.w.min_self_weight()),
            alpha_ceiling_markov: markov.map(|m| m.min(setup.w.min_self_weight())),
        })
    }
}

impl fmt::Display for BoundsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sigma2: {}", self.sigma2)?;
        writeln!(f, "min_self_weight: {}", self.min_self_weight)?;
        writeln!(f, "d_min: {}", self.d_min)?;
        writeln!(f, "d_max: {}", self.d_max)?;
        match self.t_mix {
            Some(t) => writeln!(f, "t_mix: {t}")?,
            None => writeln!(f, "t_mix: n/a (iid sampling)")?,
        }
        writeln!(f, "epsilon: {}", self.epsilon)?;
        writeln!(f, "alpha_ceiling_iid: {:e}", self.alpha_ceiling_iid)?;
        if let Some(m) = self.alpha_ceiling_markov {
            writeln!(f, "alpha_ceiling_markov: {m:e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_uniform_sampling() {
        let c = ExperimentConfig::from_toml(
            "num_steps = 1\n[mdp]\nkind = \"random\"\nnum_states = 2\nactions_per_agent = 2\n[network]\ntopology = \"complete\"\nnum_agents = 2\n",
        )
        .unwrap();
        let r = BoundsReport::new(&c, 0.1).unwrap();
        // two nodes, one edge: exact averaging
        assert!(r.sigma2.abs() < 1e-12);
        assert_eq!(r.min_self_weight, 0.5);
        assert_eq!((r.d_min, r.d_max), (0.125, 0.125));
        assert_eq!(r.t_mix, None);
        assert!(r.alpha_ceiling_iid > 0.0 && r.alpha_ceiling_iid <= 0.5);
        assert!(r.to_string().contains("sigma2: "));
    }
}
