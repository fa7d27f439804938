//! Independent oracles and the checks built on them. Shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use std::sync::Arc;

use atsc_core::learner::{
    evaluate, grad_entropy, grad_log_prob, policy_forward, reinforce_update, softmax, train, Agent, LearnerState,
    Optimizer, PolicyParams, TrainConfig, Trajectory, TrajectoryStep,
};
use atsc_core::mesosim::{LinkRecord, SaturationRates, SimState};
use atsc_core::netmodel::{build_grid, generate_demand, Heading, Network, ODMatrix, Turn};
use atsc_core::rlenv::{region_reward, RewardParams, SignalEnv};
use atsc_core::scenario::ScenarioSpec;
use atsc_core::sensing::{ProbeSet, QueueSensor};
use atsc_core::signals::{PlanHistory, SignalPlan, SignalTiming};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Check {
        Check { pass, detail: detail.into() }
    }

    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn reference_reward_params(links: usize) -> RewardParams {
    RewardParams {
        q_lc: 10.0,
        q_hc: 25.0,
        q_ub: 50,
        w_cp: 10.0,
        w_t: 0.0,
        t_once_per_region: false,
        link_weights: vec![1.0; links],
    }
}

pub fn reward_table() -> Check {
    let params = reference_reward_params(1);
    let expected = [(5, 0.0), (10, 0.0), (15, -15.0), (25, -25.0), (30, -300.0), (11, -11.0), (26, -260.0), (0, 0.0)];
    let mut bad = Vec::new();
    for (q, want) in expected {
        let got = region_reward(&[q], 1234.0, &params);
        if got != want {
            bad.push(format!("q={q}: got {got}, want {want}"));
        }
    }
    let pair = region_reward(&[15, 30], 0.0, &reference_reward_params(2));
    if pair != -315.0 {
        bad.push(format!("q=(15,30): got {pair}, want -315"));
    }
    Check::new(bad.is_empty(), if bad.is_empty() { "all table entries exact".into() } else { bad.join("; ") })
}

/// Green starts of a per-cycle split schedule, computed from the layout
/// `P1 | Y AR | P2 | Y AR | P3 | Y AR | P4 | Y AR` with `P1 = s - 8`, `P2 = P4 = 8`.
struct ScheduleOracle {
    offset: f64,
    splits: Vec<f64>,
}

impl ScheduleOracle {
    fn split(&self, k: i64) -> f64 {
        let i = k.clamp(0, self.splits.len() as i64 - 1) as usize;
        self.splits[i]
    }

    /// Straight-phase starts for a heading, all cycles overlapping `[-200, horizon + 400]`.
    fn starts(&self, heading: Heading, horizon: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = -3;
        loop {
            let base = self.offset + 100.0 * k as f64;
            if base > horizon + 400.0 {
                break;
            }
            let s = self.split(k);
            let within = match heading {
                Heading::NS | Heading::SN => 0.0,
                Heading::EW | Heading::WE => (s - 8.0) + 4.0 + 8.0 + 4.0,
            };
            out.push(base + within);
            k += 1;
        }
        out
    }
}

fn brute_force_queue(records: &[LinkRecord], link: usize, up: &[f64], down: &[f64], t: f64) -> usize {
    let u = up.iter().copied().filter(|&s| s <= t && s >= 0.0).fold(f64::NAN, f64::max);
    if u.is_nan() {
        return 0;
    }
    let d = down.iter().copied().filter(|&s| s > t).fold(f64::INFINITY, f64::min);
    let mut n = 0;
    for r in records {
        if r.link != link || r.movement != Turn::Straight {
            continue;
        }
        let entered_before_green = r.t_entry <= u;
        let still_there = match r.t_exit {
            None => true,
            Some(x) => x >= d,
        };
        if entered_before_green && still_there {
            n += 1;
        }
    }
    n
}

fn random_time<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let t = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        t.round()
    } else {
        t
    }
}

/// Random green schedules and vehicle events on a 2x2 grid; the sensor
/// must agree with the brute-force scan on every query.
pub fn queue_oracle(traces: usize, seed: u64) -> Check {
    let net = build_grid(2, 2, 300.0, 12.5).unwrap();
    let timing = SignalTiming::default();
    let horizon = 3000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut queries, mut mismatches, mut nonzero) = (0usize, Vec::new(), 0usize);
    for trace in 0..traces {
        let mut oracles = Vec::new();
        let mut histories = Vec::new();
        for _ in 0..net.intersection_count() {
            let offset = if rng.random_bool(0.5) { rng.random_range(0..100) as f64 } else { rng.random_range(0.0..100.0) };
            let mut splits = vec![30.0 + 2.0 * rng.random_range(0..=20) as f64];
            for _ in 1..40 {
                let prev = *splits.last().unwrap();
                splits.push(if rng.random_bool(0.3) { 30.0 + 2.0 * rng.random_range(0..=20) as f64 } else { prev });
            }
            let mut h = PlanHistory::new(SignalPlan::new(&timing, splits[0], offset).unwrap());
            for (k, &s) in splits.iter().enumerate().skip(1) {
                h.schedule(k as i64, SignalPlan::new(&timing, s, offset).unwrap());
            }
            histories.push(h);
            oracles.push(ScheduleOracle { offset, splits });
        }
        let links = net.internal_links();
        let mut records = Vec::new();
        for v in 0..rng.random_range(0..120) {
            let link = if rng.random_bool(0.8) { rng.random_range(0..links.len()) } else { rng.random_range(0..net.links().len()) };
            let t_entry = random_time(&mut rng, 0.0, horizon);
            let t_exit = if rng.random_bool(0.3) { None } else { Some(t_entry + random_time(&mut rng, 0.0, 500.0).round()) };
            let movement = Turn::ALL[rng.random_range(0..3)];
            records.push(LinkRecord { vehicle: v, link, t_entry, t_exit, movement });
        }
        let sensor = QueueSensor::new(&net, &histories, 50).unwrap();
        for _ in 0..20 {
            let link = &links[rng.random_range(0..links.len())];
            let (up, down) = (link.from.unwrap(), link.to.unwrap());
            let up_starts = oracles[up].starts(link.heading, horizon);
            let down_starts = oracles[down].starts(link.heading, horizon);
            let t = match rng.random_range(0..3) {
                0 => up_starts[rng.random_range(0..up_starts.len())],
                1 => down_starts[rng.random_range(0..down_starts.len())],
                _ => random_time(&mut rng, 0.0, horizon),
            }
            .max(0.0);
            let want = brute_force_queue(&records, link.id, &up_starts, &down_starts, t);
            let got = sensor.true_queue(&records, link.id, t).unwrap();
            queries += 1;
            nonzero += usize::from(want > 0);
            if got.unclamped != want as f64 || got.value != want.min(50) as u32 {
                mismatches.push(format!("trace {trace} link {} t={t}: sensor {} oracle {want}", link.id, got.unclamped));
            }
        }
    }
    let detail = format!(
        "{traces} traces, {queries} queries ({nonzero} nonzero), {} mismatches{}",
        mismatches.len(),
        mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
    );
    Check::new(mismatches.is_empty() && nonzero > queries / 10, detail)
}

/// Discharges per cycle of a saturated southbound straight queue on a
/// single intersection at split 50.
pub fn saturation() -> Check {
    let net = Arc::new(build_grid(1, 1, 300.0, 12.5).unwrap());
    let origin = net.zone_by_label("N0").unwrap();
    let dest = net.zone_by_label("S0").unwrap();
    let horizon = 3000.0;
    let od = ODMatrix::new(horizon).with_rate(origin, dest, 7200.0);
    let schedule = Arc::new(generate_demand(&net, &od, 5).unwrap());
    let plans = vec![SignalTiming::default().initial_plan(0).unwrap()];
    let mut sim = SimState::new(net.clone(), plans, SaturationRates::default(), schedule).unwrap();
    let records = sim.run_until(horizon).unwrap();
    let entry = net.zone(origin).entry_link;
    let mut per_cycle = vec![0usize; 30];
    for r in records.iter().filter(|r| r.link == entry) {
        if let Some(x) = r.t_exit {
            per_cycle[(x / 100.0) as usize] += 1;
        }
    }
    let steady = &per_cycle[3..29];
    let ok = steady.iter().all(|&n| (49..=51).contains(&n));
    Check::new(ok, format!("discharges per cycle (cycles 3..29): {steady:?}"))
}

pub fn episode_accounting() -> Check {
    let mut problems = Vec::new();
    for (spec, m) in [(ScenarioSpec::scenario1(), 4usize), (ScenarioSpec::scenario2(), 9usize)] {
        let mut env = SignalEnv::new(spec).unwrap();
        if env.action_count() != 3 * m {
            problems.push(format!("action count {} for M={m}", env.action_count()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
        let (obs, info) = env.reset(17).unwrap();
        if info.time != 1800.0 {
            problems.push(format!("clock after reset {}", info.time));
        }
        let mut observations = vec![obs];
        let mut last = None;
        for _ in 0..144 {
            let tr = env.step(rng.random_range(0..3 * m) as i64).unwrap();
            observations.push(tr.observation.clone());
            last = Some(tr);
        }
        let last = last.unwrap();
        if last.info.time != 16_200.0 || !last.truncated || last.info.step != 144 {
            problems.push(format!("final clock {} truncated {}", last.info.time, last.truncated));
        }
        if !matches!(env.step(0), Err(atsc_core::Error::EpisodeFinished)) {
            problems.push("step after truncation did not fail".into());
        }
        for o in &observations {
            if o.size != m || o.data.len() != m * m || o.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                problems.push(format!("observation shape {} / entries out of range", o.data.len()));
                break;
            }
        }
    }
    Check::new(
        problems.is_empty(),
        if problems.is_empty() { "clock 1800 -> 16200 over 144 steps, M x M observations in [0,1], 3M actions".into() } else { problems.join("; ") },
    )
}

fn run_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

pub fn determinism() -> Check {
    let spec = ScenarioSpec::scenario1();
    let seeds = [3, 4];
    let mut problems = Vec::new();
    for agent in [Agent::FixedTime, Agent::Random { seed: 9 }, Agent::Policy(PolicyParams::new(4, 1))] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        atsc_core::harness::run_scenario(&spec, &agent, &seeds, a.path(), "determinism").unwrap();
        atsc_core::harness::run_scenario(&spec, &agent, &seeds, b.path(), "determinism").unwrap();
        if run_dir_bytes(a.path()) != run_dir_bytes(b.path()) {
            problems.push(format!("{} run directories differ", agent.name()));
        }
    }
    let rewards = |seed| {
        let mut env = SignalEnv::new(spec.clone()).unwrap();
        env.reset(seed).unwrap();
        (0..144)
            .map(|k| {
                let t = env.step(((k * 7) % 12) as i64).unwrap();
                (t.reward.to_bits(), t.observation.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.info.metrics)
            })
            .collect::<Vec<_>>()
    };
    if rewards(11) != rewards(11) {
        problems.push("reward stream differs between runs".into());
    }
    Check::new(
        problems.is_empty(),
        if problems.is_empty() { "byte-identical run directories and reward streams".into() } else { problems.join("; ") },
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / scale
    }
}

/// Analytic gradients of `log π`, the entropy and the full update direction
/// against central differences with `h = 1e-5`.
pub fn gradient_check(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for trial in 0..trials {
        let m = rng.random_range(1..=3);
        let sizes = [m * m, rng.random_range(1..=8), rng.random_range(1..=8), 3 * m];
        let params = PolicyParams::with_sizes(&sizes, trial as u64 + seed);
        let x: Vec<f64> = (0..m * m).map(|_| rng.random_range(0.0..1.0)).collect();
        let action = rng.random_range(0..3 * m);
        let theta = params.flat();
        let with = |i: usize, delta: f64| {
            let mut p = params.clone();
            let mut t = theta.clone();
            t[i] += delta;
            p.set_flat(&t).unwrap();
            p
        };
        let log_prob = |p: &PolicyParams| softmax(&policy_forward(p, &x).unwrap()).unwrap()[action].ln();
        let entropy = |p: &PolicyParams| {
            -softmax(&policy_forward(p, &x).unwrap()).unwrap().iter().map(|q| q * q.ln()).sum::<f64>()
        };
        let (_, g_lp) = grad_log_prob(&params, &x, action).unwrap();
        let (_, g_h) = grad_entropy(&params, &x).unwrap();

        // Full update direction on a short random trajectory.
        let steps = rng.random_range(1..=4);
        let traj = Trajectory {
            steps: (0..steps)
                .map(|_| TrajectoryStep {
                    observation: (0..m * m).map(|_| rng.random_range(0.0..1.0)).collect(),
                    action: rng.random_range(0..3 * m),
                    reward: rng.random_range(-2.0..2.0),
                })
                .collect(),
        };
        let config = TrainConfig {
            learning_rate: 1.0,
            gamma: 0.9,
            entropy_coef: rng.random_range(0.0..0.5),
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let baseline: Vec<f64> = (0..steps).map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = LearnerState { baseline: baseline.clone(), ..LearnerState::default() };
        let (next, _, _) = reinforce_update(&params, &traj, &config, &state).unwrap();
        let direction: Vec<f64> = next.flat().iter().zip(&theta).map(|(a, b)| a - b).collect();
        let returns = traj.returns(config.gamma);
        let surrogate = |p: &PolicyParams| {
            traj.steps
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    let probs = softmax(&policy_forward(p, &s.observation).unwrap()).unwrap();
                    let h = -probs.iter().map(|q| q * q.ln()).sum::<f64>();
                    (returns[t] - baseline[t]) * probs[s.action].ln() + config.entropy_coef * h
                })
                .sum::<f64>()
                / steps as f64
        };

        for i in 0..theta.len() {
            let (plus, minus) = (with(i, h), with(i, -h));
            let fd_lp = (log_prob(&plus) - log_prob(&minus)) / (2.0 * h);
            let fd_h = (entropy(&plus) - entropy(&minus)) / (2.0 * h);
            let fd_s = (surrogate(&plus) - surrogate(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g_lp[i], fd_lp)).max(rel_err(g_h[i], fd_h)).max(rel_err(direction[i], fd_s));
            compared += 3;
        }
    }
    Check::new(worst <= 1e-4, format!("{trials} instances, {compared} partials, max relative error {worst:.2e}"))
}

/// Records of a simulated scenario1 episode with fixed splits, and the plans.
pub fn simulated_trace(seed: u64, until: f64) -> (Arc<Network>, Vec<LinkRecord>, Vec<PlanHistory>, usize) {
    let spec = ScenarioSpec::scenario1();
    let net = Arc::new(spec.network().unwrap());
    let od = spec.od_matrix(&net).unwrap();
    let schedule = Arc::new(generate_demand(&net, &od, seed).unwrap());
    let vehicles = schedule.arrivals.len();
    let plans = (0..4).map(|m| spec.signals.initial_plan(m).unwrap()).collect();
    let mut sim = SimState::new(net.clone(), plans, spec.saturation, schedule).unwrap();
    sim.run_until(until).unwrap();
    (net, sim.records().to_vec(), sim.plans().to_vec(), vehicles)
}

pub fn probe_consistency(trials: usize) -> Check {
    let mut problems = Vec::new();
    let (net, records, plans, vehicles) = simulated_trace(21, 9000.0);
    let all = ProbeSet::all(vehicles);
    let sensor = QueueSensor::new(&net, &plans, 50).unwrap();
    let mut points = Vec::new();
    for k in 1..90 {
        let t = 100.0 * k as f64;
        for l in 0..net.internal_link_count() {
            let full = sensor.true_queue(&records, l, t).unwrap();
            let probe = sensor.probe_queue(&records, l, t, 1.0, &all).unwrap();
            if (full.value, full.unclamped) != (probe.value, probe.unclamped) {
                problems.push(format!("p=1 differs at link {l} t={t}"));
            }
            if full.unclamped >= 10.0 {
                points.push((l, t, full.unclamped));
            }
        }
    }
    // Synthetic traces too.
    let net2 = build_grid(2, 2, 300.0, 12.5).unwrap();
    let plans2: Vec<SignalPlan> = (0..4).map(|m| SignalTiming::default().initial_plan(m).unwrap()).collect();
    let sensor2 = QueueSensor::new(&net2, &plans2, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let recs: Vec<LinkRecord> = (0..80)
            .map(|v| {
                let t_entry = random_time(&mut rng, 0.0, 2000.0);
                LinkRecord {
                    vehicle: v,
                    link: rng.random_range(0..8),
                    t_entry,
                    t_exit: rng.random_bool(0.7).then(|| t_entry + rng.random_range(0.0..400.0)),
                    movement: Turn::ALL[rng.random_range(0..3)],
                }
            })
            .collect();
        let all = ProbeSet::all(80);
        let t = random_time(&mut rng, 0.0, 2000.0);
        for l in 0..8 {
            let a = sensor2.true_queue(&recs, l, t).unwrap();
            let b = sensor2.probe_queue(&recs, l, t, 1.0, &all).unwrap();
            if a.value != b.value {
                problems.push(format!("p=1 differs on synthetic trace, link {l}"));
            }
        }
    }

    // Unclamped estimates so the reporting cap does not bias the mean.
    let wide = QueueSensor::new(&net, &plans, u32::MAX).unwrap();
    points.sort_by(|a, b| a.2.total_cmp(&b.2));
    let chosen: Vec<_> = points.iter().step_by((points.len() / 8).max(1)).take(8).copied().collect();
    if chosen.is_empty() {
        problems.push("no sample with a true count of at least 10".into());
    }
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.2, 0.3] {
        for &(l, t, truth) in &chosen {
            let mut sum = 0.0;
            for trial in 0..trials {
                let set = ProbeSet::bernoulli(vehicles, p, 1_000_003 * trial as u64 + (p * 10.0) as u64).unwrap();
                sum += wide.probe_queue(&records, l, t, p, &set).unwrap().unclamped;
            }
            let dev = (sum / trials as f64 - truth).abs() / truth;
            worst = worst.max(dev);
            if dev > 0.1 {
                problems.push(format!("p={p} link {l} t={t}: mean {:.2} vs true {truth}", sum / trials as f64));
            }
        }
    }
    let detail = format!(
        "p=1 identical on all traces; {} points (true {}..{}), {trials} trials per p, worst mean deviation {:.1}%",
        chosen.len(),
        chosen.first().map_or(0.0, |c| c.2),
        chosen.last().map_or(0.0, |c| c.2),
        worst * 100.0
    );
    Check::new(problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

pub const EVAL_SEEDS: std::ops::Range<u64> = 1_000_000..1_000_020;

pub fn efficacy_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.001,
        episodes: 1000,
        gamma: 0.99,
        entropy_coef: 0.05,
        baseline_decay: 0.9,
        seed: 1,
        checkpoint_every: 0,
        reward_scale: 0.01,
        max_grad_norm: Some(1.0),
        optimizer: Optimizer::adam(),
        select_every: 50,
        select_episodes: 4,
    }
}

pub struct Efficacy {
    pub check_queue: Check,
    pub check_tt: Check,
    pub violations: usize,
}

pub fn control_efficacy() -> Efficacy {
    let spec = ScenarioSpec::scenario1();
    let config = efficacy_config();
    let mut env = SignalEnv::new(spec.clone()).unwrap();
    let outcome = train(&mut env, &config).unwrap();
    let seeds: Vec<u64> = EVAL_SEEDS.collect();
    let base = evaluate(&spec, &Agent::FixedTime, &seeds).unwrap();
    let pol = evaluate(&spec, &Agent::Policy(outcome.params), &seeds).unwrap();
    let violations = base.episodes.iter().chain(&pol.episodes).map(|e| e.conservation_violations).sum();
    let (bq, pq) = (base.max_sensed_queue(), pol.max_sensed_queue());
    let (btt, ptt) = (base.mean_tt_per_vehicle().unwrap(), pol.mean_tt_per_vehicle().unwrap());
    let ratio = ptt / btt;
    let n = outcome.curve.len() / 10;
    let first = outcome.curve[..n].iter().sum::<f64>() / n as f64;
    let last = outcome.curve[outcome.curve.len() - n..].iter().sum::<f64>() / n as f64;
    Efficacy {
        check_queue: Check::new(
            pq < bq && base.max_physical_queue() > 50,
            format!(
                "{} training episodes (reward first/last 10%: {first:.0} / {last:.0}); max sensed queue policy {pq} vs fixed {bq}; max physical fixed {}",
                config.episodes,
                base.max_physical_queue()
            ),
        ),
        check_tt: Check::new(
            ratio <= 0.9,
            format!("mean travel time per vehicle policy {ptt:.1} s vs fixed {btt:.1} s, ratio {ratio:.3} (reference 0.63)"),
        ),
        violations,
    }
}

/// Steps scenario episodes with several agents and checks vehicle
/// conservation after every step.
pub fn conservation(extra_violations: usize) -> Check {
    let mut violations = extra_violations;
    let mut observations = 0;
    for spec in [ScenarioSpec::scenario1(), ScenarioSpec::scenario2()] {
        for agent in [Agent::FixedTime, Agent::Random { seed: 4 }] {
            let report = evaluate(&spec, &agent, &[40, 41]).unwrap();
            violations += report.episodes.iter().map(|e| e.conservation_violations).sum::<usize>();
            observations += report.episodes.len() * 145;
        }
    }
    let mut sim_checks = 0;
    let (net, _, _, _) = simulated_trace(3, 0.0);
    let spec = ScenarioSpec::scenario1();
    let od = spec.od_matrix(&net).unwrap();
    let schedule = Arc::new(generate_demand(&net, &od, 8).unwrap());
    let plans = (0..4).map(|m| spec.signals.initial_plan(m).unwrap()).collect();
    let mut sim = SimState::new(net, plans, spec.saturation, schedule).unwrap();
    for _ in 0..5000 {
        sim.step();
        sim_checks += 1;
        if sim.vehicles_injected() != sim.vehicles_exited() + sim.vehicles_on_network() {
            violations += 1;
        }
    }
    Check::new(
        violations == 0,
        format!("{violations} violations over {observations} environment observations and {sim_checks} simulator seconds (plus efficacy runs)"),
    )
}
