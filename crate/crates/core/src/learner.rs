//! Policy network, REINFORCE with a moving-average baseline, and the
//! reference agents.
//!
//! The policy is an MLP `M² -> 32 -> 32 -> 3M` with tanh hidden units and
//! linear logits. Observations are flattened row-major. Parameters are laid
//! out flat as, per layer, the `outputs x inputs` weight matrix (row-major)
//! followed by the bias vector; gradients use the same layout.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rlenv::{action_space_size, encode_action, Observation, SignalEnv, SplitChange, StepInfo};
use crate::scenario::ScenarioSpec;

pub const HIDDEN: [usize; 2] = [32, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Dense {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<Dense>,
}

impl PolicyParams {
    /// The standard network for `m` intersections.
    pub fn new(m: usize, seed: u64) -> PolicyParams {
        let mut sizes = vec![m * m];
        sizes.extend(HIDDEN);
        sizes.push(action_space_size(m));
        PolicyParams::with_sizes(&sizes, seed)
    }

    /// Arbitrary layer sizes, weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn with_sizes(sizes: &[usize], seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::zeros(sizes);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.inputs.max(1) as f64).sqrt();
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn zeros(sizes: &[usize]) -> PolicyParams {
        assert!(sizes.len() >= 2, "a network needs an input and an output size");
        PolicyParams { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_len()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut rest = values;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Checks the shape against an environment with `m` intersections.
    pub fn check_shape(&self, m: usize) -> Result<()> {
        if self.input_len() != m * m || self.output_len() != action_space_size(m) {
            return Err(Error::invalid(format!(
                "policy maps {} -> {} but the scenario needs {} -> {}",
                self.input_len(),
                self.output_len(),
                m * m,
                action_space_size(m)
            )));
        }
        Ok(())
    }
}

/// Activations of every layer; `acts[0]` is the input, the last entry the logits.
struct Trace {
    acts: Vec<Vec<f64>>,
}

fn forward_trace(params: &PolicyParams, x: &[f64]) -> Result<Trace> {
    if x.len() != params.input_len() {
        return Err(Error::invalid(format!("observation has {} entries, policy expects {}", x.len(), params.input_len())));
    }
    let mut acts = vec![x.to_vec()];
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.apply(acts.last().unwrap());
        if i < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    Ok(Trace { acts })
}

/// Gradient of `dlogits · logits` with respect to the flat parameters.
fn backward(params: &PolicyParams, trace: &Trace, dlogits: &[f64]) -> Vec<f64> {
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    let mut delta = dlogits.to_vec();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let input = &trace.acts[i];
        let mut g = vec![0.0; layer.len()];
        for o in 0..layer.outputs {
            for j in 0..layer.inputs {
                g[o * layer.inputs + j] = delta[o] * input[j];
            }
            g[layer.weights.len() + o] = delta[o];
        }
        grads.push(g);
        if i > 0 {
            delta = (0..layer.inputs)
                .map(|j| {
                    let back: f64 = (0..layer.outputs).map(|o| layer.weights[o * layer.inputs + j] * delta[o]).sum();
                    back * (1.0 - input[j] * input[j])
                })
                .collect();
        }
    }
    grads.into_iter().rev().flatten().collect()
}

pub fn policy_forward(params: &PolicyParams, observation: &[f64]) -> Result<Vec<f64>> {
    let logits = forward_trace(params, observation)?.acts.pop().unwrap();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("policy produced non-finite logits".into()));
    }
    Ok(logits)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax over non-finite or empty logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Inverse-CDF draw from `softmax(logits)`.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Result<usize> {
    let probs = softmax(logits)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap())
}

/// Argmax; ties go to the lowest index.
pub fn greedy_action(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("greedy action over non-finite or empty logits {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `log π(action | x)` and its gradient.
pub fn grad_log_prob(params: &PolicyParams, x: &[f64], action: usize) -> Result<(f64, Vec<f64>)> {
    let trace = forward_trace(params, x)?;
    let probs = softmax(trace.acts.last().unwrap())?;
    if action >= probs.len() {
        return Err(Error::invalid(format!("action {action} outside 0..{}", probs.len())));
    }
    let dlogits: Vec<f64> = probs.iter().enumerate().map(|(k, p)| f64::from(k == action) - p).collect();
    Ok((probs[action].ln(), backward(params, &trace, &dlogits)))
}

/// Policy entropy at `x` and its gradient.
pub fn grad_entropy(params: &PolicyParams, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let trace = forward_trace(params, x)?;
    let probs = softmax(trace.acts.last().unwrap())?;
    let (h, dlogits) = entropy_and_dlogits(&probs);
    Ok((h, backward(params, &trace, &dlogits)))
}

fn entropy_and_dlogits(probs: &[f64]) -> (f64, Vec<f64>) {
    let logp = |p: f64| if p > 0.0 { p.ln() } else { 0.0 };
    let h = -probs.iter().map(|&p| p * logp(p)).sum::<f64>();
    (h, probs.iter().map(|&p| -p * (logp(p) + h)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// `G_t = r_t + γ G_{t+1}`.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut g = 0.0;
        let mut out: Vec<f64> = self
            .steps
            .iter()
            .rev()
            .map(|s| {
                g = s.reward + gamma * g;
                g
            })
            .collect();
        out.reverse();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub episodes: usize,
    pub gamma: f64,
    pub entropy_coef: f64,
    /// Weight of the old value in the baseline moving average.
    pub baseline_decay: f64,
    pub seed: u64,
    /// Save a checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
    /// Rewards are multiplied by this before computing returns.
    pub reward_scale: f64,
    /// Rescale the update when its norm exceeds this.
    pub max_grad_norm: Option<f64>,
    pub optimizer: Optimizer,
    /// Score the greedy policy every this many episodes (0 disables) and
    /// return the best-scoring parameters instead of the last ones.
    pub select_every: usize,
    /// Episodes per greedy score, on seeds disjoint from training.
    pub select_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            episodes: 500,
            gamma: 0.99,
            entropy_coef: 0.01,
            baseline_decay: 0.9,
            seed: 0,
            checkpoint_every: 0,
            reward_scale: 1.0,
            max_grad_norm: None,
            optimizer: Optimizer::Sgd,
            select_every: 0,
            select_episodes: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("discount must lie in (0, 1]"));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::config("entropy coefficient must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return Err(Error::config("baseline decay must lie in [0, 1]"));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::config("reward scale must be positive"));
        }
        if self.select_every > 0 && self.select_episodes == 0 {
            return Err(Error::config("greedy selection needs at least one episode"));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(Error::config("max gradient norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient ascent.
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// State carried between updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearnerState {
    /// Moving-average baseline, one value per time step. Empty until the
    /// first update, which seeds it with that trajectory's returns.
    pub baseline: Vec<f64>,
    /// First and second moment estimates for Adam.
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDiagnostics {
    pub total_reward: f64,
    pub mean_return: f64,
    pub mean_entropy: f64,
    /// Norm of the ascent direction before clipping.
    pub grad_norm: f64,
}

/// One REINFORCE step on a complete trajectory.
///
/// Ascent direction: the per-step mean of
/// `(G_t - b_t) ∇log π(a_t|s_t) + β ∇H(π(·|s_t))`.
pub fn reinforce_update(
    params: &PolicyParams,
    trajectory: &Trajectory,
    config: &TrainConfig,
    state: &LearnerState,
) -> Result<(PolicyParams, LearnerState, UpdateDiagnostics)> {
    let n = trajectory.steps.len();
    let scaled = Trajectory {
        steps: trajectory
            .steps
            .iter()
            .map(|s| TrajectoryStep { reward: s.reward * config.reward_scale, ..s.clone() })
            .collect(),
    };
    let returns = scaled.returns(config.gamma);
    let mut values = state.baseline.clone();
    for (t, &g) in returns.iter().enumerate() {
        if t >= values.len() {
            values.push(g);
        }
    }

    let mut grad = vec![0.0; params.param_count()];
    let mut entropy_sum = 0.0;
    for (t, step) in trajectory.steps.iter().enumerate() {
        let trace = forward_trace(params, &step.observation)?;
        let probs = softmax(trace.acts.last().unwrap())?;
        if step.action >= probs.len() {
            return Err(Error::invalid(format!("trajectory action {} outside 0..{}", step.action, probs.len())));
        }
        let advantage = returns[t] - values[t];
        let (h, dh) = entropy_and_dlogits(&probs);
        entropy_sum += h;
        let dlogits: Vec<f64> = (0..probs.len())
            .map(|k| advantage * (f64::from(k == step.action) - probs[k]) + config.entropy_coef * dh[k])
            .collect();
        if dlogits.iter().all(|&d| d == 0.0) {
            continue;
        }
        for (g, d) in grad.iter_mut().zip(backward(params, &trace, &dlogits)) {
            *g += d;
        }
    }
    if n > 0 {
        grad.iter_mut().for_each(|g| *g /= n as f64);
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite policy gradient; trajectory (action, reward): {:?}",
            trajectory.steps.iter().map(|s| (s.action, s.reward)).collect::<Vec<_>>()
        )));
    }
    let clip = match config.max_grad_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };

    grad.iter_mut().for_each(|g| *g *= clip);

    let mut next = params.clone();
    let mut moments = state.moments.clone();
    let updates = state.updates + 1;
    let step: Vec<f64> = match config.optimizer {
        Optimizer::Sgd => grad.iter().map(|g| config.learning_rate * g).collect(),
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let (m, v) = moments.get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let (c1, c2) = (1.0 - beta1.powf(updates as f64), 1.0 - beta2.powf(updates as f64));
            grad.iter()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|(&g, (m, v))| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon)
                })
                .collect()
        }
    };
    if step.iter().any(|&d| d != 0.0) {
        let updated: Vec<f64> = params.flat().iter().zip(&step).map(|(p, d)| p + d).collect();
        next.set_flat(&updated)?;
    }
    for (v, &g) in values.iter_mut().zip(&returns) {
        *v = config.baseline_decay * *v + (1.0 - config.baseline_decay) * g;
    }
    let diagnostics = UpdateDiagnostics {
        total_reward: trajectory.total_reward(),
        mean_return: if n > 0 { returns.iter().sum::<f64>() / n as f64 } else { 0.0 },
        mean_entropy: if n > 0 { entropy_sum / n as f64 } else { 0.0 },
        grad_norm,
    };
    Ok((next, LearnerState { baseline: values, moments, updates }, diagnostics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// The selected parameters; the final ones when selection is off.
    pub params: PolicyParams,
    pub final_params: PolicyParams,
    /// Total (unscaled) reward per episode.
    pub curve: Vec<f64>,
    /// `(episodes done, mean greedy reward)` for every scored snapshot.
    pub scores: Vec<(usize, f64)>,
}

/// Seed of the environment for training episode `episode`.
pub fn training_episode_seed(config: &TrainConfig, episode: usize) -> u64 {
    config.seed.wrapping_add(episode as u64)
}

/// Seed of the `i`th greedy scoring episode.
pub fn selection_episode_seed(config: &TrainConfig, i: usize) -> u64 {
    config.seed.wrapping_add(1 << 40).wrapping_add(i as u64)
}

fn greedy_score(env: &mut SignalEnv, config: &TrainConfig, params: &PolicyParams) -> Result<f64> {
    let agent = Agent::Policy(params.clone());
    let mut total = 0.0;
    for i in 0..config.select_episodes {
        total += run_episode(env, &agent, selection_episode_seed(config, i))?.total_reward;
    }
    Ok(total / config.select_episodes as f64)
}

pub fn train(env: &mut SignalEnv, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(env, config, |_, _| Ok(()))
}

/// Like [`train`], calling `checkpoint(episodes_done, params)` every
/// `checkpoint_every` episodes.
pub fn train_with<F>(env: &mut SignalEnv, config: &TrainConfig, mut checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &PolicyParams) -> Result<()>,
{
    config.validate()?;
    let m = env.intersection_count();
    let mut params = PolicyParams::new(m, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_AC7104);
    let mut state = LearnerState::default();
    let mut curve = Vec::with_capacity(config.episodes);
    let mut scores = Vec::new();
    let mut best: Option<(f64, PolicyParams)> = None;
    for e in 0..config.episodes {
        let (mut obs, _) = env.reset(training_episode_seed(config, e))?;
        let mut trajectory = Trajectory::default();
        loop {
            let logits = policy_forward(&params, &obs.data)?;
            let action = sample_action(&logits, &mut rng)?;
            let tr = env.step(action as i64)?;
            trajectory.steps.push(TrajectoryStep { observation: obs.data, action, reward: tr.reward });
            obs = tr.observation;
            if tr.terminated || tr.truncated {
                break;
            }
        }
        let (p, st, diag) = reinforce_update(&params, &trajectory, config, &state)?;
        params = p;
        state = st;
        curve.push(diag.total_reward);
        if config.checkpoint_every > 0 && (e + 1) % config.checkpoint_every == 0 {
            checkpoint(e + 1, &params)?;
        }
        if config.select_every > 0 && ((e + 1) % config.select_every == 0 || e + 1 == config.episodes) {
            let score = greedy_score(env, config, &params)?;
            scores.push((e + 1, score));
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
            }
        }
    }
    let selected = best.map_or_else(|| params.clone(), |(_, p)| p);
    Ok(TrainOutcome { params: selected, final_params: params, curve, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Agent {
    /// Greedy execution of a trained policy.
    Policy(PolicyParams),
    /// Holds every split.
    FixedTime,
    /// Uniform over all actions; the stream for an episode depends on this
    /// seed and the episode seed.
    Random { seed: u64 },
}

impl Agent {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Policy(_) => "policy",
            Agent::FixedTime => "fixed",
            Agent::Random { .. } => "random",
        }
    }

    fn runner(&self, episode_seed: u64) -> Runner<'_> {
        match self {
            Agent::Policy(p) => Runner::Policy(p),
            Agent::FixedTime => Runner::Fixed,
            Agent::Random { seed } => {
                Runner::Random(ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(episode_seed)))
            }
        }
    }
}

enum Runner<'a> {
    Policy(&'a PolicyParams),
    Fixed,
    Random(ChaCha8Rng),
}

impl Runner<'_> {
    fn act(&mut self, obs: &Observation, action_count: usize) -> Result<usize> {
        match self {
            Runner::Policy(p) => greedy_action(&policy_forward(p, &obs.data)?),
            Runner::Fixed => Ok(encode_action(0, SplitChange::Hold)),
            Runner::Random(rng) => Ok(rng.random_range(0..action_count)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub total_reward: f64,
    /// Regional vehicle-seconds over the control period.
    pub total_travel_time: f64,
    /// Vehicles present at any time during the control period.
    pub vehicles: usize,
    /// `None` when no vehicle was present.
    pub mean_tt_per_vehicle: Option<f64>,
    pub max_sensed_queue: u32,
    pub max_physical_queue: usize,
    /// Sensed queue per (step, link), step-major.
    pub queue_samples: Vec<u32>,
    pub actions: Vec<usize>,
    pub final_splits: Vec<f64>,
    /// Observations (reset included) where injected != exited + on network.
    pub conservation_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub agent: String,
    pub links: usize,
    pub steps: usize,
    pub episodes: Vec<EpisodeReport>,
}

impl EvalReport {
    pub fn mean_reward(&self) -> Option<f64> {
        mean(self.episodes.iter().map(|e| e.total_reward))
    }

    /// Mean over episodes of the per-episode travel time per vehicle.
    pub fn mean_tt_per_vehicle(&self) -> Option<f64> {
        mean(self.episodes.iter().filter_map(|e| e.mean_tt_per_vehicle))
    }

    pub fn max_sensed_queue(&self) -> u32 {
        self.episodes.iter().map(|e| e.max_sensed_queue).max().unwrap_or(0)
    }

    pub fn max_physical_queue(&self) -> usize {
        self.episodes.iter().map(|e| e.max_physical_queue).max().unwrap_or(0)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn run_episode(env: &mut SignalEnv, agent: &Agent, seed: u64) -> Result<EpisodeReport> {
    let (mut obs, info) = env.reset(seed)?;
    let warmup = env.sim().unwrap().clock();
    let unbalanced = |i: &StepInfo| i.vehicles_injected != i.vehicles_exited + i.vehicles_on_network;
    let mut conservation_violations = usize::from(unbalanced(&info));
    let action_count = env.action_count();
    let links = env.network().internal_link_count();
    let mut runner = agent.runner(seed);
    let mut total_reward = 0.0;
    let mut queue_samples = Vec::new();
    let mut actions = Vec::new();
    let mut max_physical = 0;
    loop {
        let action = runner.act(&obs, action_count)?;
        let tr = env.step(action as i64)?;
        actions.push(action);
        total_reward += tr.reward;
        debug_assert_eq!(tr.info.queues.len(), links);
        queue_samples.extend_from_slice(&tr.info.queues);
        max_physical = tr.info.physical_queues.iter().copied().fold(max_physical, usize::max);
        conservation_violations += usize::from(unbalanced(&tr.info));
        obs = tr.observation;
        if tr.terminated || tr.truncated {
            break;
        }
    }
    let sim = env.sim().unwrap();
    let metrics = sim.snapshot_metrics(warmup, sim.clock())?;
    Ok(EpisodeReport {
        seed,
        total_reward,
        total_travel_time: metrics.total_travel_time,
        vehicles: metrics.vehicles_present,
        mean_tt_per_vehicle: (metrics.vehicles_present > 0)
            .then(|| metrics.total_travel_time / metrics.vehicles_present as f64),
        max_sensed_queue: queue_samples.iter().copied().max().unwrap_or(0),
        max_physical_queue: max_physical,
        queue_samples,
        actions,
        final_splits: sim.splits(),
        conservation_violations,
    })
}

/// One episode per seed, run in parallel; episodes are reported in seed-list order.
pub fn evaluate(scenario: &ScenarioSpec, agent: &Agent, seeds: &[u64]) -> Result<EvalReport> {
    let probe = SignalEnv::new(scenario.clone())?;
    if let Agent::Policy(p) = agent {
        p.check_shape(probe.intersection_count())?;
    }
    let episodes = seeds
        .par_iter()
        .map(|&seed| run_episode(&mut SignalEnv::new(scenario.clone())?, agent, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        agent: agent.name().into(),
        links: probe.network().internal_link_count(),
        steps: scenario.episode.steps,
        episodes,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATSCPOL\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Header: magic, version (u32), layer count (u32), then `inputs, outputs`
/// (u32 each) per layer, the parameter count (u64), and the flat
/// parameters as little-endian f64.
pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for l in &params.layers {
        out.write_all(&(l.inputs as u32).to_le_bytes())?;
        out.write_all(&(l.outputs as u32).to_le_bytes())?;
    }
    out.write_all(&(params.param_count() as u64).to_le_bytes())?;
    for v in params.flat() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<PolicyParams> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut u32_buf).map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let layers = read_u32(&mut input)? as usize;
    if layers == 0 || layers > 64 {
        return Err(bad("implausible layer count"));
    }
    let mut sizes = Vec::with_capacity(layers + 1);
    for i in 0..layers {
        let (inputs, outputs) = (read_u32(&mut input)? as usize, read_u32(&mut input)? as usize);
        if i == 0 {
            sizes.push(inputs);
        } else if sizes[i] != inputs {
            return Err(bad("layer shapes do not chain"));
        }
        sizes.push(outputs);
    }
    let mut params = PolicyParams::zeros(&sizes);
    let mut u64_buf = [0u8; 8];
    input.read_exact(&mut u64_buf).map_err(|_| bad("truncated header"))?;
    if u64::from_le_bytes(u64_buf) != params.param_count() as u64 {
        return Err(bad("parameter count does not match the shape table"));
    }
    let mut values = Vec::with_capacity(params.param_count());
    for _ in 0..params.param_count() {
        input.read_exact(&mut u64_buf).map_err(|_| bad("truncated parameter block"))?;
        values.push(f64::from_le_bytes(u64_buf));
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after parameter block"));
    }
    params.set_flat(&values)?;
    if !params.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_learning_curve<W: Write>(curve: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,total_reward")?;
    for (e, r) in curve.iter().enumerate() {
        writeln!(out, "{e},{r}")?;
    }
    Ok(())
}
