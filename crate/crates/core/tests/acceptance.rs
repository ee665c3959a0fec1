//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use distq::analysis::{
    consensus_error, e_k, epsilon_avg, geometric_sum_check, total_error, Lemma, LemmaMonitor, IDENTITY_TOL,
    ORDER_TOL,
};
use distq::harness::{execute, plateau, policy_report, steps_to_half, ExperimentConfig, ExperimentReport};
use distq::harness::config::Algorithm;
use distq::learner::{dist_q_step, run, DistQ, Ensemble};
use distq::mdp::{random_mdp, sup_dist, value_iteration, Mdp, RandomMdpSpec};
use distq::network::{build_graph, gossip_deviation, lazy_metropolis, TopologyKind, WeightMatrix};
use distq::sampling::{IidModel, MarkovModel, MarkovSpec, Observation, ObservationModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random(states: usize, agents: usize, seed: u64) -> Mdp {
    random_mdp(
        &RandomMdpSpec {
            num_states: states,
            actions_per_agent: vec![2; agents],
            r_max: 1.0,
            gamma: 0.9,
        },
        seed,
    )
    .unwrap()
}

/// Rotates through ring, star and complete graphs; below three nodes every
/// connected graph is the complete one.
fn gossip(n: usize, i: usize) -> WeightMatrix {
    match n {
        1 => WeightMatrix::uniform_averaging(1),
        2 => lazy_metropolis(&build_graph(TopologyKind::Complete, 2, None).unwrap()),
        _ => {
            let kind = [TopologyKind::Ring, TopologyKind::Star, TopologyKind::Complete][i % 3];
            lazy_metropolis(&build_graph(kind, n, None).unwrap())
        }
    }
}

fn random_ensemble(mdp: &Mdp, alpha: f64, rng: &mut ChaCha8Rng) -> Ensemble {
    let n = mdp.num_agents();
    let b = mdp.q_bound();
    let values = (0..n * mdp.num_pairs()).map(|_| rng.random_range(-b..=b)).collect();
    Ensemble::from_values(mdp, values, vec![alpha; n]).unwrap()
}

/// Violation counts per lemma across a batch of monitored runs.
#[derive(Default)]
struct Tally {
    runs: usize,
    steps: u64,
    counts: BTreeMap<Lemma, usize>,
    record_bound_failures: usize,
    records: usize,
    /// Violations beyond the monitor's storage cap, charged to every lemma.
    unattributed: usize,
    max_sandwich_gap: f64,
}

impl Tally {
    fn count(&self, lemma: Lemma) -> usize {
        self.counts.get(&lemma).copied().unwrap_or(0) + self.unattributed
    }
}

/// One fully checked dist-Q run from a random initial ensemble.
fn monitored_run(mdp: &Mdp, w: &WeightMatrix, model: ObservationModel, alpha: f64, steps: u64, seed: u64, tally: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ens = random_ensemble(mdp, alpha, &mut rng);
    let d = model.sampling_weights().to_vec();
    let q_star = value_iteration(mdp, 1e-12).unwrap().into_values();
    let mut monitor = LemmaMonitor::new(mdp, d, q_star, Some(w.sigma2()), true).unwrap();
    let mut model = model;
    run(mdp, &DistQ { w }, &mut model, ens, steps, 100, &mut rng, &mut [&mut monitor]).unwrap();
    for v in monitor.violations() {
        *tally.counts.entry(v.lemma).or_default() += 1;
    }
    tally.unattributed += monitor.violation_count() - monitor.violations().len();
    for r in monitor.records() {
        tally.records += 1;
        if !(r.consensus_inf <= r.consensus_bound + ORDER_TOL) {
            tally.record_bound_failures += 1;
        }
    }
    tally.runs += 1;
    tally.steps += steps;
    tally.max_sandwich_gap = if tally.runs == 1 {
        monitor.max_sandwich_gap()
    } else {
        tally.max_sandwich_gap.max(monitor.max_sandwich_gap())
    };
}

/// Twenty random MDPs with |S| ≤ 5, N ≤ 7, two actions per agent, iid
/// sampling, 10⁵ steps each.
fn boundedness_runs() -> (Tally, Duration) {
    let start = Instant::now();
    let mut tally = Tally::default();
    for i in 0..20usize {
        let n = 1 + i % 7;
        let s = 2 + i % 4;
        let mdp = random(s, n, 1000 + i as u64);
        let w = gossip(n, i);
        let alpha = [0.5f64, 0.25, 0.1][i % 3].min(w.min_self_weight());
        let model = ObservationModel::Iid(IidModel::uniform(mdp.num_pairs()));
        monitored_run(&mdp, &w, model, alpha, 100_000, 2000 + i as u64, &mut tally);
    }
    (tally, start.elapsed())
}

/// Twenty random MDPs with four states, 10⁴ steps each, under both
/// observation models.
fn sandwich_runs() -> Tally {
    let mut tally = Tally::default();
    for i in 0..20usize {
        let n = 2 + i % 3;
        let mdp = random(4, n, 3000 + i as u64);
        let w = gossip(n, i);
        let alpha = [0.05, 0.1, 0.3, 0.5][i % 4];
        let iid = ObservationModel::Iid(IidModel::uniform(mdp.num_pairs()));
        monitored_run(&mdp, &w, iid, alpha, 10_000, 4000 + i as u64, &mut tally);
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i as u64);
        let markov = ObservationModel::Markov(MarkovModel::new(&mdp, MarkovSpec::uniform(&mdp), &mut rng).unwrap());
        monitored_run(&mdp, &w, markov, alpha, 10_000, 6000 + i as u64, &mut tally);
    }
    tally
}

fn criterion_1(t: &Tally, elapsed: Duration) -> Outcome {
    let v = t.count(Lemma::Boundedness);
    let fast = elapsed < Duration::from_secs(120);
    Outcome::new(
        v == 0 && fast,
        format!("{} runs, {} steps, {v} violations, {:.1}s", t.runs, t.steps, elapsed.as_secs_f64()),
    )
}

fn criterion_2(tallies: &[&Tally]) -> Outcome {
    let per_step: usize = tallies.iter().map(|t| t.count(Lemma::ConsensusBound)).sum();
    let records: usize = tallies.iter().map(|t| t.records).sum();
    let trace_failures: usize = tallies.iter().map(|t| t.record_bound_failures).sum();
    let runs: usize = tallies.iter().map(|t| t.runs).sum();
    Outcome::new(
        per_step == 0 && trace_failures == 0,
        format!("{runs} runs, {per_step} per-step violations, {trace_failures}/{records} recorded rows above the bound"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    for kind in [TopologyKind::Ring, TopologyKind::Star, TopologyKind::Complete] {
        for n in 2..=10 {
            // a 2-cycle is not a simple graph; the ring on two nodes is the single edge
            let kind = if kind == TopologyKind::Ring && n == 2 { TopologyKind::Complete } else { kind };
            let w = lazy_metropolis(&build_graph(kind, n, None).unwrap());
            let s = w.sigma2();
            for k in 0..=50u32 {
                worst = worst.max(gossip_deviation(&w, k) - s.powi(k as i32));
                cases += 1;
            }
        }
    }
    Outcome::new(worst <= 1e-10, format!("{cases} (graph, k) cases, max excess {worst:.3e}"))
}

fn criterion_4(t: &Tally) -> Outcome {
    let v = t.count(Lemma::Sandwich);
    Outcome::new(
        v == 0 && t.max_sandwich_gap <= 1e-9,
        format!("{} runs (iid + markov), {v} violations, max gap {:.3e}", t.runs, t.max_sandwich_gap),
    )
}

fn criterion_5(tallies: &[&Tally]) -> Outcome {
    let lemmas = [Lemma::AqNorm, Lemma::EkBound, Lemma::EpsAvgBound];
    let per_step: usize = tallies.iter().flat_map(|t| lemmas.map(|l| t.count(l))).sum();
    let mut grid_failures = 0;
    let mut grid = 0;
    let ratios = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999];
    for &a in &ratios {
        for &b in &ratios {
            for k in 0..=400u32 {
                let (exact, bound) = geometric_sum_check(a, b, k).unwrap();
                grid += 1;
                if !(exact <= bound * (1.0 + IDENTITY_TOL)) {
                    grid_failures += 1;
                }
            }
        }
    }
    Outcome::new(
        per_step == 0 && grid_failures == 0,
        format!("{per_step} per-step violations, geometric sum {grid_failures}/{grid} failures"),
    )
}

/// Single-agent Q-learning written independently of the crate.
fn reference_q_learning(q: &mut [f64], na: usize, gamma: f64, alpha: f64, obs: &Observation) {
    let next = &q[obs.next_state * na..(obs.next_state + 1) * na];
    let best = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q[obs.pair] += alpha * (obs.rewards[0] + gamma * best - q[obs.pair]);
}

fn criterion_6(tallies: &[&Tally]) -> Outcome {
    let monitored: usize = tallies.iter().map(|t| t.count(Lemma::MeanIdentity) + t.count(Lemma::Triangle)).sum();

    // averaged form: Q^avg + α(D(R̄ + γPΠQ^avg − Q^avg) + ε^avg + E_k)
    let mut worst_mean = 0.0f64;
    let mut worst_triangle = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let n = 2 + (seed as usize) % 5;
        let mdp = random(3, n, 7000 + seed);
        let w = gossip(n, seed as usize);
        let sampler = IidModel::uniform(mdp.num_pairs());
        let d = sampler.distribution().to_vec();
        let q_star = value_iteration(&mdp, 1e-12).unwrap().into_values();
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let alpha = 0.2;
        let mut ens = random_ensemble(&mdp, alpha, &mut rng);
        for _ in 0..500 {
            let obs = sampler.sample(&mdp, &mut rng);
            let next = dist_q_step(&ens, &w, &mdp, &obs).unwrap();
            let avg = ens.average();
            let eps = epsilon_avg(&mdp, &ens, &obs, &d);
            let ek = e_k(&mdp, &ens, &d);
            let v_avg: Vec<f64> = (0..mdp.num_states())
                .map(|s| distq::mdp::row_max(&avg, mdp.num_actions(), s))
                .collect();
            let pv = mdp.expected_next(&v_avg);
            let expected: Vec<f64> = (0..mdp.num_pairs())
                .map(|x| {
                    let drift = d[x] * (mdp.reward_avg()[x] + mdp.gamma() * pv[x] - avg[x]);
                    avg[x] + alpha * (drift + eps[x] + ek[x])
                })
                .collect();
            worst_mean = worst_mean.max(sup_dist(&next.average(), &expected));
            let (cons, _) = consensus_error(&next);
            let opt = sup_dist(&next.average(), &q_star);
            worst_triangle = worst_triangle.max(total_error(&next, &q_star) - cons - opt);
            ens = next;
        }
    }

    let mut bit_identical = true;
    for seed in 0..10u64 {
        let mdp = random(2 + seed as usize % 4, 1, 9000 + seed);
        let w = WeightMatrix::uniform_averaging(1);
        let sampler = IidModel::uniform(mdp.num_pairs());
        let mut rng = ChaCha8Rng::seed_from_u64(9100 + seed);
        let alpha = 0.05 + 0.1 * (seed % 5) as f64;
        let mut ens = Ensemble::zeros(&mdp, 1, alpha).unwrap();
        let mut reference = vec![0.0; mdp.num_pairs()];
        for _ in 0..20_000 {
            let obs = sampler.sample(&mdp, &mut rng);
            ens = dist_q_step(&ens, &w, &mdp, &obs).unwrap();
            reference_q_learning(&mut reference, mdp.num_actions(), mdp.gamma(), alpha, &obs);
            if ens.values() != reference.as_slice() {
                bit_identical = false;
            }
        }
    }

    Outcome::new(
        monitored == 0 && worst_mean <= IDENTITY_TOL && worst_triangle <= IDENTITY_TOL && bit_identical,
        format!(
            "mean identity max {worst_mean:.3e}, triangle excess {worst_triangle:.3e}, N=1 bit-identical {bit_identical}, {monitored} monitored violations"
        ),
    )
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn aggregate_of(report: &ExperimentReport) -> &distq::harness::Trace {
    report.aggregate(Algorithm::DistQ).unwrap()
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for m in 0..10u64 {
        let c = config(&format!(
            r#"
            num_steps = 200000
            record_interval = 1000
            num_runs = 5
            base_seed = 100
            alpha = 0.05
            checks = false
            q_star_tol = 1e-10
            [mdp]
            kind = "random"
            num_states = 4
            seed = {m}
            [network]
            topology = "ring"
            num_agents = 3
            "#
        ));
        let report = execute(&c).unwrap();
        let agg = aggregate_of(&report);
        let initial = agg.rows[0].optimality_inf;
        let fin = agg.last().unwrap().optimality_inf;
        let ratio = fin / initial;
        worst = worst.max(ratio);
        if !(ratio <= 0.1) {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        failures == 0 && elapsed < Duration::from_secs(300),
        format!(
            "10 MDPs x 5 seeds, worst final/initial {worst:.4}, {failures} above 0.1, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let c = config(
        r#"
        num_steps = 1000000
        record_interval = 10000
        num_runs = 5
        alpha = 0.01
        checks = false
        policy_tie_tol = 0.05
        [observation]
        kind = "markov"
        reset_prob = 0.1
        [mdp]
        kind = "congestion"
        num_rooms = 2
        [network]
        topology = "ring"
        num_agents = 4
        "#,
    );
    let report = execute(&c).unwrap();
    let mdp = distq::harness::experiment::build_mdp(&c, 0).unwrap();
    let q_star = value_iteration(&mdp, c.q_star_tol).unwrap().into_values();

    // the tie tolerance must stay below half the smallest genuine gap in Q*
    let na = mdp.num_actions();
    let mut min_gap = f64::INFINITY;
    for s in 0..mdp.num_states() {
        let row = &q_star[s * na..(s + 1) * na];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in row {
            if best - v > 1e-9 {
                min_gap = min_gap.min(best - v);
            }
        }
    }
    let policy = policy_report(&mdp, 2, &report, &q_star, c.policy_tie_tol);
    let matched = policy.runs.iter().filter(|r| r.all_agents_match()).count();
    let tol_ok = c.policy_tie_tol < 0.5 * min_gap;
    let max_dev = report
        .runs
        .iter()
        .flat_map(|r| &r.algorithms)
        .flat_map(|a| (0..a.final_ensemble.num_agents()).map(|i| sup_dist(a.final_ensemble.agent(i), &q_star)))
        .fold(0.0f64, f64::max);
    Outcome::new(
        tol_ok && matched == policy.runs.len(),
        format!(
            "{matched}/{} runs with every agent matching value iteration, tie tol {} vs min Q* gap {min_gap:.3}, max |Q^i - Q*| {max_dev:.4}",
            policy.runs.len(),
            c.policy_tie_tol
        ),
    )
}

fn scaling_config(extra: &str) -> ExperimentConfig {
    config(&format!(
        r#"
        num_steps = 100000
        record_interval = 100
        num_runs = 5
        checks = false
        {extra}
        [mdp]
        kind = "random"
        num_states = 3
        [network]
        topology = "ring"
        num_agents = 3
        "#
    ))
}

fn criterion_9() -> Outcome {
    let mut plateaus = Vec::new();
    for alpha in [0.2, 0.1, 0.05] {
        let c = scaling_config(&format!("alpha = {alpha}"));
        plateaus.push(plateau(aggregate_of(&execute(&c).unwrap())));
    }
    let monotone = plateaus.windows(2).all(|w| w[1] <= w[0]);
    Outcome::new(monotone, format!("plateau at alpha 0.2/0.1/0.05: {plateaus:.4?}"))
}

fn criterion_10() -> Outcome {
    let mut steps = Vec::new();
    for n in [3usize, 5, 7] {
        let mut c = scaling_config("alpha = 0.1");
        c.mdp = distq::harness::MdpConfig::Random {
            num_states: 2,
            actions_per_agent: 2,
            r_max: 1.0,
            gamma: 0.9,
            seed: None,
        };
        c.network.num_agents = n;
        steps.push(steps_to_half(aggregate_of(&execute(&c).unwrap())));
    }
    let monotone = steps.iter().all(Option::is_some) && steps.windows(2).all(|w| w[0] <= w[1]);
    Outcome::new(monotone, format!("steps to half error for N = 3/5/7: {steps:?}"))
}

/// Four states in two blocks `{0, 1}` and `{2, 3}`; every action moves
/// within the block w.p. `1 - eta` and across w.p. `eta`, uniformly.
fn block_chain(eta: f64) -> Mdp {
    let mut data = random(4, 2, 11_000).to_data();
    let na = 4;
    let mut transition = Vec::new();
    for s in 0..4 {
        let row: Vec<f64> = (0..4)
            .map(|t| if s / 2 == t / 2 { (1.0 - eta) / 2.0 } else { eta / 2.0 })
            .collect();
        for _ in 0..na {
            transition.extend_from_slice(&row);
        }
    }
    data.transition = transition;
    data.reward_mean = None;
    Mdp::new(data).unwrap()
}

/// Mean normalised total error over seeds, recorded every 100 steps.
fn normalised_curve(mdp: &Mdp, seeds: u64, steps: u64) -> Vec<(u64, f64)> {
    let w = lazy_metropolis(&build_graph(TopologyKind::Complete, 2, None).unwrap());
    let q_star = value_iteration(mdp, 1e-12).unwrap().into_values();
    let mut sum: Vec<(u64, f64)> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(12_000 + seed);
        let markov = MarkovModel::new(mdp, MarkovSpec::uniform(mdp), &mut rng).unwrap();
        let d = markov.stationary().to_vec();
        let mut model = ObservationModel::Markov(markov);
        let mut monitor = LemmaMonitor::new(mdp, d, q_star.clone(), None, false).unwrap();
        let ens = Ensemble::zeros(mdp, 2, 0.1).unwrap();
        run(mdp, &DistQ { w: &w }, &mut model, ens, steps, 100, &mut rng, &mut [&mut monitor]).unwrap();
        let initial = monitor.records()[0].total_inf;
        for (k, r) in monitor.records().iter().enumerate() {
            if sum.len() <= k {
                sum.push((r.step, 0.0));
            }
            sum[k].1 += r.total_inf / initial / seeds as f64;
        }
    }
    sum
}

fn criterion_11() -> Outcome {
    let half = |curve: &[(u64, f64)]| curve.iter().find(|(_, e)| *e <= 0.5).map(|(k, _)| *k);
    let slow = half(&normalised_curve(&block_chain(1e-4), 10, 200_000));
    let fast = half(&normalised_curve(&block_chain(0.5), 10, 200_000));
    let pass = match (fast, slow) {
        (Some(f), Some(s)) => f < s,
        (Some(_), None) => true,
        _ => false,
    };
    Outcome::new(pass, format!("steps to half error: fast chain {fast:?}, slow chain {slow:?}"))
}

fn report(index: usize, name: &str, o: Outcome, failed: &mut usize) {
    println!("criterion {index} ({name}): {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        *failed += 1;
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let (c1_tally, c1_time) = boundedness_runs();
    let c4_tally = sandwich_runs();
    let both = [&c1_tally, &c4_tally];
    report(1, "boundedness", criterion_1(&c1_tally, c1_time), &mut failed);
    report(2, "deterministic consensus bound", criterion_2(&both), &mut failed);
    report(3, "gossip contraction", criterion_3(), &mut failed);
    report(4, "comparison sandwich", criterion_4(&c4_tally), &mut failed);
    report(5, "per-step bounds", criterion_5(&both), &mut failed);
    report(6, "exact identities", criterion_6(&both), &mut failed);
    report(7, "value-iteration oracle", criterion_7(), &mut failed);
    report(8, "congestion policy", criterion_8(), &mut failed);
    report(9, "plateau vs step size", criterion_9(), &mut failed);
    report(10, "convergence vs network size", criterion_10(), &mut failed);
    report(11, "convergence vs mixing", criterion_11(), &mut failed);
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
