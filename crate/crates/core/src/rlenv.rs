//! The single-agent environment.
//!
//! Observation: an `M x M` matrix whose diagonal holds each intersection's
//! normalized split and whose `(i, j)` entry holds the normalized queue on
//! link `i -> j` (zero where no link exists). Action: one of `3M` codes,
//! `3m + k` adjusting intersection `m` by `(-Δs, 0, +Δs)[k]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesosim::{SimState, StepMetrics};
use crate::netmodel::{generate_demand, Network, ODMatrix};
use crate::scenario::{ScenarioSpec, SensingMode};
use crate::sensing::{ProbeSet, QueueSensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub warmup: f64,
    pub horizon: f64,
    pub control_interval: f64,
    pub steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { warmup: 1800.0, horizon: 16_200.0, control_interval: 100.0, steps: 144 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup >= 0.0 && self.control_interval > 0.0 && self.horizon > self.warmup) {
            return Err(Error::config("episode needs warmup >= 0, control interval > 0, horizon > warmup"));
        }
        if self.warmup.fract() != 0.0 || self.control_interval.fract() != 0.0 {
            return Err(Error::config("warmup and control interval must be whole seconds"));
        }
        if (self.horizon - self.warmup) != self.steps as f64 * self.control_interval {
            return Err(Error::config(format!(
                "(horizon - warmup) / control interval = {} but steps = {}",
                (self.horizon - self.warmup) / self.control_interval,
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub q_lc: f64,
    pub q_hc: f64,
    pub q_ub: u32,
    pub w_cp: f64,
    pub w_t: f64,
    pub t_once_per_region: bool,
    /// One weight per monitored link.
    pub link_weights: Vec<f64>,
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.q_lc && self.q_lc < self.q_hc && self.q_hc <= self.q_ub as f64) {
            return Err(Error::config(format!(
                "need 0 < q_lc < q_hc <= q_ub, got {} / {} / {}",
                self.q_lc, self.q_hc, self.q_ub
            )));
        }
        let weights = [self.w_cp, self.w_t].into_iter().chain(self.link_weights.iter().copied());
        if weights.into_iter().any(|w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::config("reward weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Congestion {
    Free,
    Light,
    Heavy,
}

/// Boundaries resolve to the milder level: `q == q_lc` is free flow and
/// `q == q_hc` is light congestion.
pub fn congestion_level(q: f64, params: &RewardParams) -> Congestion {
    if q <= params.q_lc {
        Congestion::Free
    } else if q <= params.q_hc {
        Congestion::Light
    } else {
        Congestion::Heavy
    }
}

/// Sum of per-link rewards. `travel_time` is the regional total in
/// vehicle-seconds over the last control interval.
pub fn region_reward(queues: &[u32], travel_time: f64, params: &RewardParams) -> f64 {
    let tt = params.w_t * travel_time;
    let mut total = 0.0;
    let mut worst = Congestion::Free;
    for (&q, &w_l) in queues.iter().zip(&params.link_weights) {
        let q = q as f64;
        let level = congestion_level(q, params);
        let (scale, counted) = match level {
            Congestion::Free => continue,
            Congestion::Light => (1.0, !params.t_once_per_region),
            Congestion::Heavy => (params.w_cp, !params.t_once_per_region),
        };
        total -= scale * w_l * q;
        if counted {
            total -= scale * tt;
        }
        if level == Congestion::Heavy || worst == Congestion::Free {
            worst = level;
        }
    }
    if params.t_once_per_region {
        total -= match worst {
            Congestion::Free => 0.0,
            Congestion::Light => tt,
            Congestion::Heavy => params.w_cp * tt,
        };
    }
    total
}

pub fn action_space_size(intersections: usize) -> usize {
    3 * intersections
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChange {
    Decrease,
    Hold,
    Increase,
}

impl SplitChange {
    pub fn seconds(self, step: f64) -> f64 {
        match self {
            SplitChange::Decrease => -step,
            SplitChange::Hold => 0.0,
            SplitChange::Increase => step,
        }
    }
}

pub fn decode_action(action: i64, intersections: usize) -> Result<(usize, SplitChange)> {
    let count = action_space_size(intersections);
    if action < 0 || action as u64 >= count as u64 {
        return Err(Error::InvalidAction { action, count });
    }
    let a = action as usize;
    let change = match a % 3 {
        0 => SplitChange::Decrease,
        1 => SplitChange::Hold,
        _ => SplitChange::Increase,
    };
    Ok((a / 3, change))
}

pub fn encode_action(intersection: usize, change: SplitChange) -> usize {
    3 * intersection
        + match change {
            SplitChange::Decrease => 0,
            SplitChange::Hold => 1,
            SplitChange::Increase => 2,
        }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub size: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Observation {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub time: f64,
    pub step: usize,
    /// Sensed queue per monitored link.
    pub queues: Vec<u32>,
    /// Physical queue (all movements) per monitored link.
    pub physical_queues: Vec<usize>,
    pub splits: Vec<f64>,
    /// Metrics of the control interval just simulated; absent after reset.
    pub metrics: Option<StepMetrics>,
    pub vehicles_injected: usize,
    pub vehicles_exited: usize,
    pub vehicles_on_network: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

struct Episode {
    sim: SimState,
    probes: Option<(f64, ProbeSet)>,
    step: usize,
}

pub struct SignalEnv {
    scenario: Arc<ScenarioSpec>,
    network: Arc<Network>,
    od: ODMatrix,
    reward: RewardParams,
    episode: Option<Episode>,
}

impl SignalEnv {
    pub fn new(scenario: ScenarioSpec) -> Result<SignalEnv> {
        scenario.validate()?;
        let network = Arc::new(scenario.network()?);
        let od = scenario.od_matrix(&network)?;
        let reward = scenario.reward_params(&network);
        Ok(SignalEnv { scenario: Arc::new(scenario), network, od, reward, episode: None })
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn reward_params(&self) -> &RewardParams {
        &self.reward
    }

    pub fn intersection_count(&self) -> usize {
        self.network.intersection_count()
    }

    pub fn action_count(&self) -> usize {
        action_space_size(self.intersection_count())
    }

    pub fn sim(&self) -> Option<&SimState> {
        self.episode.as_ref().map(|e| &e.sim)
    }

    pub fn steps_taken(&self) -> Option<usize> {
        self.episode.as_ref().map(|e| e.step)
    }

    /// Fresh episode: demand drawn from `seed`, signals at the initial
    /// split, simulated through the warm-up.
    pub fn reset(&mut self, seed: u64) -> Result<(Observation, StepInfo)> {
        let schedule = Arc::new(generate_demand(&self.network, &self.od, seed)?);
        let timing = &self.scenario.signals;
        let plans = (0..self.intersection_count())
            .map(|m| timing.initial_plan(m))
            .collect::<Result<Vec<_>>>()?;
        let probes = match self.scenario.sensing {
            SensingMode::Full => None,
            SensingMode::Probe { penetration } => Some((
                penetration,
                ProbeSet::bernoulli(schedule.len(), penetration, seed ^ 0x9E37_79B9_7F4A_7C15)?,
            )),
        };
        let mut sim = SimState::new(self.network.clone(), plans, self.scenario.saturation, schedule)?;
        sim.run_until(self.scenario.episode.warmup)?;
        self.episode = Some(Episode { sim, probes, step: 0 });
        let queues = self.sense()?;
        let info = self.info(queues, None);
        Ok((self.observe(&info.queues), info))
    }

    pub fn step(&mut self, action: i64) -> Result<Transition> {
        let cfg = self.scenario.episode.clone();
        let split_step = self.scenario.signals.split_step;
        let m = self.intersection_count();
        let episode = self.episode.as_mut().ok_or(Error::NotReset)?;
        if episode.step >= cfg.steps {
            return Err(Error::EpisodeFinished);
        }
        let (intersection, change) = decode_action(action, m)?;
        episode.sim.adjust_split(intersection, change.seconds(split_step))?;
        let t0 = episode.sim.clock();
        episode.sim.run_until(t0 + cfg.control_interval)?;
        episode.step += 1;
        let metrics = episode.sim.snapshot_metrics(t0, episode.sim.clock())?;
        let truncated = episode.step == cfg.steps;

        let queues = self.sense()?;
        let reward = region_reward(&queues, metrics.total_travel_time, &self.reward);
        let info = self.info(queues, Some(metrics));
        Ok(Transition { observation: self.observe(&info.queues), reward, terminated: false, truncated, info })
    }

    fn sense(&self) -> Result<Vec<u32>> {
        let episode = self.episode.as_ref().ok_or(Error::NotReset)?;
        let sim = &episode.sim;
        let sensor = QueueSensor::new(&self.network, sim.plans(), self.reward.q_ub)?;
        let t = sim.clock();
        (0..self.network.internal_link_count())
            .map(|link| {
                let est = match &episode.probes {
                    None => sensor.true_queue(sim.link_records(link), link, t)?,
                    Some((p, set)) => sensor.probe_queue(sim.link_records(link), link, t, *p, set)?,
                };
                Ok(est.value)
            })
            .collect()
    }

    fn info(&self, queues: Vec<u32>, metrics: Option<StepMetrics>) -> StepInfo {
        let episode = self.episode.as_ref().expect("episode in progress");
        let sim = &episode.sim;
        StepInfo {
            time: sim.clock(),
            step: episode.step,
            physical_queues: (0..self.network.internal_link_count()).map(|l| sim.queued_on(l)).collect(),
            queues,
            splits: sim.splits(),
            metrics,
            vehicles_injected: sim.vehicles_injected(),
            vehicles_exited: sim.vehicles_exited(),
            vehicles_on_network: sim.vehicles_on_network(),
        }
    }

    fn observe(&self, queues: &[u32]) -> Observation {
        let m = self.intersection_count();
        let timing = &self.scenario.signals;
        let span = timing.split_max - timing.split_min;
        let mut data = vec![0.0; m * m];
        if let Some(episode) = &self.episode {
            for (i, s) in episode.sim.splits().into_iter().enumerate() {
                data[i * m + i] = if span > 0.0 { (s - timing.split_min) / span } else { 0.0 };
            }
        }
        let q_ub = self.reward.q_ub as f64;
        for (link, &q) in self.network.internal_links().iter().zip(queues) {
            let (i, j) = (link.from.unwrap(), link.to.unwrap());
            data[i * m + j] = q as f64 / q_ub;
        }
        Observation { size: m, data }
    }
}
