//! Building an experiment from its config, running it and writing traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{LemmaMonitor, Violation};
use crate::error::{Error, Result};
use crate::learner::{check_step_sizes, run, DistQ, Ensemble, Qd, Update};
use crate::mdp::{congestion_game, random_mdp, value_iteration, Mdp, MdpData, RandomMdpSpec};
use crate::network::{build_graph, lazy_metropolis, Graph, TopologyKind, WeightMatrix};
use crate::sampling::{IidModel, MarkovModel, MarkovSpec, ObservationModel, DEFAULT_MIXING_CAP};

use super::config::{Algorithm, ExperimentConfig, MdpConfig, ObservationConfig};
use super::trace::{aggregate, plateau, read_config_hash, steps_to_half, Trace, TraceMeta};

/// The MDP a run with `seed` learns on.
pub fn build_mdp(config: &ExperimentConfig, seed: u64) -> Result<Mdp> {
    let n = config.network.num_agents;
    match &config.mdp {
        MdpConfig::Random {
            num_states,
            actions_per_agent,
            r_max,
            gamma,
            seed: fixed,
        } => random_mdp(
            &RandomMdpSpec {
                num_states: *num_states,
                actions_per_agent: vec![*actions_per_agent; n],
                r_max: *r_max,
                gamma: *gamma,
            },
            fixed.unwrap_or(seed),
        ),
        MdpConfig::Congestion { num_rooms, gamma } => congestion_game(n, *num_rooms, *gamma),
        MdpConfig::File { path } => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let data: MdpData = serde_json::from_str(&text)?;
            let mdp = Mdp::new(data)?;
            if mdp.num_agents() != n {
                return Err(Error::Config(format!(
                    "MDP file has {} agents but the network has {n}",
                    mdp.num_agents()
                )));
            }
            Ok(mdp)
        }
    }
}

/// Graph and lazy Metropolis gossip matrix.
pub fn build_network(config: &ExperimentConfig) -> Result<(Graph, WeightMatrix)> {
    let net = &config.network;
    let graph = build_graph(net.topology, net.num_agents, net.edges.as_deref())?;
    let w = lazy_metropolis(&graph);
    Ok((graph, w))
}

/// Observation model; a Markov chain draws its initial pair from `rng`.
pub fn build_model(config: &ExperimentConfig, mdp: &Mdp, rng: &mut ChaCha8Rng) -> Result<ObservationModel> {
    match &config.observation {
        ObservationConfig::Iid { distribution } => Ok(ObservationModel::Iid(match distribution {
            Some(d) => IidModel::new(d.clone())?,
            None => IidModel::uniform(mdp.num_pairs()),
        })),
        ObservationConfig::Markov {
            behavior,
            initial_states,
            reset_prob,
        } => {
            let mut spec = MarkovSpec::uniform(mdp);
            if let Some(b) = behavior {
                spec.behavior = b.clone();
            }
            if let Some(v) = initial_states {
                spec.initial_states = v.clone();
            }
            spec.reset_prob = *reset_prob;
            Ok(ObservationModel::Markov(MarkovModel::new(mdp, spec, rng)?))
        }
    }
}

/// Everything that stays fixed during one run.
pub struct RunSetup {
    pub seed: u64,
    pub mdp: Mdp,
    pub graph: Graph,
    pub w: WeightMatrix,
    pub q_star: Vec<f64>,
    pub d: Vec<f64>,
    pub t_mix: Option<usize>,
}

impl RunSetup {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mdp = build_mdp(config, seed)?;
        let (graph, w) = build_network(config)?;
        let model = build_model(config, &mdp, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let t_mix = match &model {
            ObservationModel::Markov(m) => Some(m.mixing_profile(&mdp, 0.25, DEFAULT_MIXING_CAP)?.t_mix),
            ObservationModel::Iid(_) => None,
        };
        let q_star = value_iteration(&mdp, config.q_star_tol)?.into_values();
        Ok(Self {
            seed,
            d: model.sampling_weights().to_vec(),
            mdp,
            graph,
            w,
            q_star,
            t_mix,
        })
    }

    pub fn d_min(&self) -> f64 {
        self.d.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn d_max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

/// Output of one algorithm on one seed.
#[derive(Debug, Clone)]
pub struct AlgorithmRun {
    pub algorithm: Algorithm,
    pub trace: Trace,
    pub final_ensemble: Ensemble,
    pub violations: Vec<Violation>,
    pub violation_count: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub algorithms: Vec<AlgorithmRun>,
}

/// Runs every configured algorithm on `seed`. Each algorithm gets a fresh
/// generator with the same seed, so all of them see the same observations.
pub fn run_seed(config: &ExperimentConfig, config_hash: &str, seed: u64) -> Result<RunOutput> {
    let setup = RunSetup::new(config, seed)?;
    let mdp = &setup.mdp;
    let mut algorithms = Vec::new();
    for algorithm in config.algorithms.list() {
        let n = config.network.num_agents;
        let (alphas, sigma2) = match algorithm {
            Algorithm::DistQ => (config.alphas(), Some(setup.w.sigma2())),
            Algorithm::Qd => (vec![config.qd.alpha_fast; n], None),
        };
        let ens = Ensemble::from_values(mdp, vec![config.initial_value; n * mdp.num_pairs()], alphas)?;
        if algorithm == Algorithm::DistQ {
            check_step_sizes(&ens, &setup.w).map_err(|e| Error::Config(e.to_string()))?;
        }
        let checks = config.checks && algorithm == Algorithm::DistQ;
        let mut monitor = LemmaMonitor::new(mdp, setup.d.clone(), setup.q_star.clone(), sigma2, checks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = build_model(config, mdp, &mut rng)?;
        let dist_q = DistQ { w: &setup.w };
        let qd = Qd {
            graph: &setup.graph,
            beta_slow: config.qd.beta_slow,
        };
        let update: &dyn Update = match algorithm {
            Algorithm::DistQ => &dist_q,
            Algorithm::Qd => &qd,
        };
        let final_ensemble = run(
            mdp,
            update,
            &mut model,
            ens,
            config.num_steps,
            config.record_interval,
            &mut rng,
            &mut [&mut monitor],
        )?;
        let violations = monitor.violations().to_vec();
        let violation_count = monitor.violation_count();
        let meta = TraceMeta {
            config_hash: config_hash.to_string(),
            algorithm: algorithm.name().to_string(),
            seeds: vec![seed],
            sigma2: setup.w.sigma2(),
            d_min: setup.d_min(),
            d_max: setup.d_max(),
            t_mix: setup.t_mix,
        };
        algorithms.push(AlgorithmRun {
            algorithm,
            trace: Trace::new(meta, monitor.into_records())?,
            final_ensemble,
            violations,
            violation_count,
        });
    }
    Ok(RunOutput { seed, algorithms })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub runs: Vec<RunOutput>,
    pub aggregates: Vec<(Algorithm, Trace)>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn aggregate(&self, algorithm: Algorithm) -> Option<&Trace> {
        self.aggregates.iter().find(|(a, _)| *a == algorithm).map(|(_, t)| t)
    }

    /// `(seed, violation)` for every stored violation.
    pub fn violations(&self) -> Vec<(u64, Violation)> {
        self.runs
            .iter()
            .flat_map(|r| r.algorithms.iter().flat_map(move |a| a.violations.iter().map(move |v| (r.seed, *v))))
            .collect()
    }

    pub fn violation_count(&self) -> usize {
        self.runs.iter().flat_map(|r| &r.algorithms).map(|a| a.violation_count).sum()
    }
}

/// Runs all seeds in parallel without touching the filesystem.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let hash = config.hash();
    let seeds: Vec<u64> = (0..config.num_runs as u64).map(|r| config.base_seed + r).collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| run_seed(config, &hash, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut aggregates = Vec::new();
    for algorithm in config.algorithms.list() {
        let traces: Vec<Trace> = runs
            .iter()
            .flat_map(|r| r.algorithms.iter().filter(|a| a.algorithm == algorithm).map(|a| a.trace.clone()))
            .collect();
        aggregates.push((algorithm, aggregate(&traces)?));
    }
    Ok(ExperimentReport {
        config_hash: hash,
        runs,
        aggregates,
        files: Vec::new(),
    })
}

/// Refuses to mix results of different configurations in one directory.
pub fn check_output_dir(dir: &Path, config_hash: &str) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(existing) = read_config_hash(&path)? {
                if existing != config_hash {
                    return Err(Error::Config(format!(
                        "{} was written by a different configuration (hash {existing})",
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Runs the experiment and writes one CSV per run and algorithm plus one
/// aggregate CSV per algorithm into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = &config.output_dir;
    check_output_dir(dir, &config.hash())?;
    let mut report = execute(config)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for run in &report.runs {
        for a in &run.algorithms {
            let path = dir.join(format!("{}_seed{}.csv", a.algorithm, run.seed));
            a.trace.write_file(&path)?;
            files.push(path);
        }
    }
    for (algorithm, trace) in &report.aggregates {
        let path = dir.join(format!("{algorithm}_aggregate.csv"));
        trace.write_file(&path)?;
        files.push(path);
    }
    report.files = files;
    Ok(report)
}

/// Parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    NumAgents,
    Topology,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "N" | "n" | "num_agents" => Ok(Self::NumAgents),
            "topology" => Ok(Self::Topology),
            other => Err(Error::Config(format!("cannot sweep over {other:?}"))),
        }
    }
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::NumAgents => "num_agents",
            Self::Topology => "topology",
        }
    }

    fn apply(self, config: &mut ExperimentConfig, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("bad {} value {value:?}: {e}", self.name()));
        match self {
            Self::Alpha => {
                config.alpha = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                config.agent_alphas = None;
            }
            Self::NumAgents => {
                config.network.num_agents = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                config.agent_alphas = None;
            }
            Self::Topology => config.network.topology = TopologyKind::from_str(value)?,
        }
        config.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub algorithm: Algorithm,
    pub final_total: f64,
    pub final_consensus: f64,
    pub plateau: f64,
    pub steps_to_half: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<ExperimentReport>,
}

fn summarize(value: &str, report: &ExperimentReport) -> Vec<SweepRow> {
    report
        .aggregates
        .iter()
        .map(|(algorithm, trace)| {
            let last = trace.last().expect("a trace always holds the initial record");
            SweepRow {
                value: value.to_string(),
                algorithm: *algorithm,
                final_total: last.total_inf,
                final_consensus: last.consensus_inf,
                plateau: plateau(trace),
                steps_to_half: steps_to_half(trace),
            }
        })
        .collect()
}

/// Runs the experiment once per value; with `write` set each run goes to
/// `<output_dir>/<param>_<value>/` and a `summary.csv` is written.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[String], write: bool) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for value in values {
        let mut c = config.clone();
        param.apply(&mut c, value)?;
        c.output_dir = config.output_dir.join(format!("{}_{value}", param.name()));
        let report = if write { run_experiment(&c)? } else { execute(&c)? };
        rows.extend(summarize(value, &report));
        reports.push(report);
    }
    if write {
        fs::create_dir_all(&config.output_dir)?;
        write_summary(&config.output_dir.join("summary.csv"), param, &rows)?;
    }
    Ok(SweepReport { param, rows, reports })
}

fn write_summary(path: &Path, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    use super::trace::format_float;
    let mut csv = csv::Writer::from_path(path)?;
    csv.write_record([param.name(), "algorithm", "final_total", "final_consensus", "plateau", "steps_to_half"])?;
    for r in rows {
        csv.write_record([
            r.value.clone(),
            r.algorithm.to_string(),
            format_float(r.final_total),
            format_float(r.final_consensus),
            format_float(r.plateau),
            r.steps_to_half.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
