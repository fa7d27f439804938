//! Run artifacts, metric export and the environment-server protocol.
//!
//! A run directory holds `queues.csv` (`link,step,episode,q`),
//! `travel_time.csv` (`agent,mean_tt_per_vehicle`), `episodes.csv` and
//! `manifest.json`. Nothing time- or host-dependent is written, so the same
//! invocation reproduces the directory byte for byte.
//!
//! The server speaks newline-delimited JSON. Requests are objects tagged by
//! `type`: `spec`, `reset` (`seed`, optional `scenario` preset name or full
//! scenario object), `step` (`action`) and `close`. Every request gets one
//! response: `spec`, `state`, `error` (`code`, `message`) or, for `close`,
//! `closed`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{load_checkpoint, save_checkpoint, Agent, EvalReport};
use crate::rlenv::{Observation, SignalEnv, StepInfo};
use crate::scenario::ScenarioSpec;

pub const MANIFEST: &str = "manifest.json";
pub const QUEUES: &str = "queues.csv";
pub const TRAVEL_TIME: &str = "travel_time.csv";
pub const EPISODES: &str = "episodes.csv";
pub const POLICY: &str = "policy.ckpt";
pub const REPORT: &str = "report.csv";
pub const RATIOS: &str = "ratios.csv";

/// `fixed`, `random` or `policy:PATH`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AgentSpec {
    Fixed,
    Random,
    Policy(PathBuf),
}

impl std::str::FromStr for AgentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<AgentSpec> {
        match s {
            "fixed" => Ok(AgentSpec::Fixed),
            "random" => Ok(AgentSpec::Random),
            _ => match s.strip_prefix("policy:") {
                Some(path) if !path.is_empty() => Ok(AgentSpec::Policy(PathBuf::from(path))),
                _ => Err(Error::invalid(format!("unknown agent {s:?}; expected fixed, random or policy:CKPT"))),
            },
        }
    }
}

impl AgentSpec {
    /// `seed` drives the random agent only.
    pub fn load(&self, seed: u64) -> Result<Agent> {
        Ok(match self {
            AgentSpec::Fixed => Agent::FixedTime,
            AgentSpec::Random => Agent::Random { seed },
            AgentSpec::Policy(path) => Agent::Policy(load_checkpoint(path)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub mean_reward: Option<f64>,
    pub mean_tt_per_vehicle: Option<f64>,
    pub max_sensed_queue: u32,
    pub max_physical_queue: usize,
}

impl RunSummary {
    pub fn of(report: &EvalReport) -> RunSummary {
        RunSummary {
            episodes: report.episodes.len(),
            mean_reward: report.mean_reward(),
            mean_tt_per_vehicle: report.mean_tt_per_vehicle(),
            max_sensed_queue: report.max_sensed_queue(),
            max_physical_queue: report.max_physical_queue(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub agent: String,
    /// Seed of the random agent, when used.
    pub agent_seed: Option<u64>,
    /// Policy copied into the run directory, with its FNV-1a 64 digest.
    pub policy: Option<String>,
    pub policy_fnv1a64: Option<String>,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioSpec,
    pub files: Vec<String>,
    pub summary: RunSummary,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "no-data".to_string(), |v| v.to_string())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Evaluates `agent` on `seeds` and writes the run directory.
pub fn run_scenario(
    spec: &ScenarioSpec,
    agent: &Agent,
    seeds: &[u64],
    out: &Path,
    command: &str,
) -> Result<(EvalReport, RunManifest)> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let report = crate::learner::evaluate(spec, agent, seeds)?;
    let manifest = write_run(spec, agent, &report, out, command)?;
    Ok((report, manifest))
}

pub fn write_run(
    spec: &ScenarioSpec,
    agent: &Agent,
    report: &EvalReport,
    out: &Path,
    command: &str,
) -> Result<RunManifest> {
    let mut files = vec![QUEUES.to_string(), TRAVEL_TIME.to_string(), EPISODES.to_string()];

    let mut w = create(&out.join(QUEUES))?;
    writeln!(w, "link,step,episode,q")?;
    for (e, ep) in report.episodes.iter().enumerate() {
        for (i, q) in ep.queue_samples.iter().enumerate() {
            writeln!(w, "{},{},{e},{q}", i % report.links, i / report.links + 1)?;
        }
    }
    w.flush()?;

    let mut w = create(&out.join(TRAVEL_TIME))?;
    writeln!(w, "agent,mean_tt_per_vehicle")?;
    writeln!(w, "{},{}", report.agent, fmt_opt(report.mean_tt_per_vehicle()))?;
    w.flush()?;

    let mut w = create(&out.join(EPISODES))?;
    writeln!(w, "episode,seed,total_reward,total_travel_time,vehicles,mean_tt_per_vehicle,max_sensed_queue,max_physical_queue")?;
    for (e, ep) in report.episodes.iter().enumerate() {
        writeln!(
            w,
            "{e},{},{},{},{},{},{},{}",
            ep.seed,
            ep.total_reward,
            ep.total_travel_time,
            ep.vehicles,
            fmt_opt(ep.mean_tt_per_vehicle),
            ep.max_sensed_queue,
            ep.max_physical_queue
        )?;
    }
    w.flush()?;

    let (mut policy, mut digest, mut agent_seed) = (None, None, None);
    match agent {
        Agent::Policy(params) => {
            let path = out.join(POLICY);
            save_checkpoint(params, &path)?;
            digest = Some(format!("{:016x}", fnv1a64(&fs::read(&path)?)));
            policy = Some(POLICY.to_string());
            files.push(POLICY.to_string());
        }
        Agent::Random { seed } => agent_seed = Some(*seed),
        Agent::FixedTime => {}
    }

    let manifest = RunManifest {
        tool: "atsc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        agent: report.agent.clone(),
        agent_seed,
        policy,
        policy_fnv1a64: digest,
        seeds: report.episodes.iter().map(|e| e.seed).collect(),
        scenario: spec.clone(),
        files,
        summary: RunSummary::of(report),
    };
    write_manifest(&manifest, out)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<()> {
    let mut w = create(&dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub run: String,
    pub agent: String,
    pub baseline: String,
    /// Agent over baseline mean travel time per vehicle.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<(String, RunManifest)>,
    pub ratios: Vec<RatioRow>,
}

/// Collects the runs under `root` (the directory itself if it holds a
/// manifest, else each subdirectory) into `report.csv` and `ratios.csv`.
/// The baseline is the first fixed-time run in name order.
pub fn export_metrics(root: &Path) -> Result<MetricsReport> {
    let mut dirs: Vec<(String, PathBuf)> = if root.join(MANIFEST).is_file() {
        vec![(".".into(), root.to_path_buf())]
    } else {
        let mut dirs = Vec::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
            }
        }
        dirs
    };
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingManifests(vec![root.join(MANIFEST).display().to_string()]));
    }
    let missing: Vec<String> =
        dirs.iter().filter(|(_, d)| !d.join(MANIFEST).is_file()).map(|(_, d)| d.join(MANIFEST).display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingManifests(missing));
    }
    let runs = dirs
        .into_iter()
        .map(|(name, dir)| Ok((name, RunManifest::read(&dir)?)))
        .collect::<Result<Vec<_>>>()?;

    let baseline = runs.iter().find(|(_, m)| m.agent == "fixed");
    let ratios = match baseline {
        None => Vec::new(),
        Some((base_name, base)) => runs
            .iter()
            .filter(|(name, _)| name != base_name)
            .map(|(name, m)| RatioRow {
                run: name.clone(),
                agent: m.agent.clone(),
                baseline: base_name.clone(),
                ratio: m
                    .summary
                    .mean_tt_per_vehicle
                    .zip(base.summary.mean_tt_per_vehicle)
                    .filter(|&(_, b)| b > 0.0)
                    .map(|(a, b)| a / b),
            })
            .collect(),
    };

    let mut w = create(&root.join(REPORT))?;
    writeln!(w, "run,agent,episodes,mean_reward,mean_tt_per_vehicle,max_sensed_queue,max_physical_queue")?;
    for (name, m) in &runs {
        let s = &m.summary;
        writeln!(
            w,
            "{name},{},{},{},{},{},{}",
            m.agent,
            s.episodes,
            fmt_opt(s.mean_reward),
            fmt_opt(s.mean_tt_per_vehicle),
            s.max_sensed_queue,
            s.max_physical_queue
        )?;
    }
    w.flush()?;
    let mut w = create(&root.join(RATIOS))?;
    writeln!(w, "run,agent,baseline,tt_ratio")?;
    for r in &ratios {
        writeln!(w, "{},{},{},{}", r.run, r.agent, r.baseline, fmt_opt(r.ratio))?;
    }
    w.flush()?;
    Ok(MetricsReport { runs, ratios })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Preset(String),
    Spec(Box<ScenarioSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Spec,
    Reset {
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<ScenarioRef>,
    },
    Step {
        action: i64,
    },
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Spec {
        obs_rows: usize,
        obs_cols: usize,
        action_count: usize,
    },
    State {
        /// Row-major.
        observation: Vec<f64>,
        /// Absent after reset.
        reward: Option<f64>,
        terminated: bool,
        truncated: bool,
        info: StepInfo,
    },
    Error {
        code: String,
        message: String,
    },
    Closed,
}

impl Response {
    fn error(code: &str, message: impl Into<String>) -> Response {
        Response::Error { code: code.into(), message: message.into() }
    }

    fn state(observation: Observation, reward: Option<f64>, terminated: bool, truncated: bool, info: StepInfo) -> Response {
        Response::State { observation: observation.data, reward, terminated, truncated, info }
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::NotReset => "not-reset",
        Error::EpisodeFinished => "episode-finished",
        Error::InvalidAction { .. } => "invalid-action",
        Error::Config(_) => "invalid-scenario",
        Error::InvalidArgument(_) => "bad-request",
        _ => "internal",
    }
}

/// One client's private environment.
pub struct Session {
    env: SignalEnv,
}

impl Session {
    pub fn new(scenario: ScenarioSpec) -> Result<Session> {
        Ok(Session { env: SignalEnv::new(scenario)? })
    }

    pub fn handle(&mut self, request: Request) -> Response {
        let result = match request {
            Request::Spec => {
                let m = self.env.intersection_count();
                Ok(Response::Spec { obs_rows: m, obs_cols: m, action_count: self.env.action_count() })
            }
            Request::Reset { seed, scenario } => self.reset(seed, scenario),
            Request::Step { action } => self
                .env
                .step(action)
                .map(|t| Response::state(t.observation, Some(t.reward), t.terminated, t.truncated, t.info)),
            Request::Close => Ok(Response::Closed),
        };
        result.unwrap_or_else(|e| Response::error(error_code(&e), e.to_string()))
    }

    fn reset(&mut self, seed: u64, scenario: Option<ScenarioRef>) -> Result<Response> {
        match scenario {
            None => {}
            Some(ScenarioRef::Preset(name)) => {
                let spec = match name.as_str() {
                    "scenario1" => ScenarioSpec::scenario1(),
                    "scenario2" => ScenarioSpec::scenario2(),
                    _ => return Err(Error::config(format!("unknown preset {name:?}"))),
                };
                self.env = SignalEnv::new(spec)?;
            }
            Some(ScenarioRef::Spec(spec)) => self.env = SignalEnv::new(*spec)?,
        }
        let (obs, info) = self.env.reset(seed)?;
        Ok(Response::state(obs, None, false, false, info))
    }

    /// Handles one request line; the flag is set after `close`.
    pub fn handle_line(&mut self, line: &str) -> (Response, bool) {
        match serde_json::from_str::<Request>(line) {
            Ok(Request::Close) => (Response::Closed, true),
            Ok(req) => (self.handle(req), false),
            Err(e) => (Response::error("bad-request", e.to_string()), false),
        }
    }
}

/// Serves one session over a line stream until `close` or end of input.
pub fn serve_stream<R: BufRead, W: Write>(scenario: ScenarioSpec, input: R, mut output: W) -> Result<()> {
    let mut session = Session::new(scenario)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, close) = session.handle_line(&line);
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if close {
            break;
        }
    }
    Ok(())
}

pub fn serve_stdio(scenario: ScenarioSpec) -> Result<()> {
    serve_stream(scenario, std::io::stdin().lock(), std::io::stdout().lock())
}

/// Accepts connections forever, one thread and one session each. Clients
/// beyond `max_sessions` get a `busy` error and are disconnected.
pub fn serve_tcp(scenario: ScenarioSpec, listener: TcpListener, max_sessions: usize) -> Result<()> {
    scenario.validate()?;
    let active = Arc::new(AtomicUsize::new(0));
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        if active.fetch_add(1, Ordering::SeqCst) >= max_sessions {
            active.fetch_sub(1, Ordering::SeqCst);
            let busy = Response::error("busy", format!("server is at its limit of {max_sessions} sessions"));
            if serde_json::to_writer(&mut stream, &busy).is_ok() {
                let _ = stream.write_all(b"\n");
            }
            continue;
        }
        let scenario = scenario.clone();
        let active = active.clone();
        std::thread::spawn(move || {
            let _ = serve_connection(scenario, stream);
            active.fetch_sub(1, Ordering::SeqCst);
        });
    }
    Ok(())
}

fn serve_connection(scenario: ScenarioSpec, stream: TcpStream) -> Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_stream(scenario, reader, BufWriter::new(stream))
}
