use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use atsc_core::harness::{self, AgentSpec};
use atsc_core::learner::{self, Agent, TrainConfig};
use atsc_core::rlenv::SignalEnv;
use atsc_core::scenario::ScenarioSpec;

#[derive(Parser)]
#[command(name = "atsc", version, about = "Signalized grid simulation and signal control learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a reference agent or a saved policy and write the run tables.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// fixed, random or policy:CKPT
        #[arg(long, default_value = "fixed")]
        agent: String,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Seed of the first episode; later episodes use the following seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy with REINFORCE.
    Train {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Comma-separated seeds; a single seed expands to consecutive seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Also run the fixed-time baseline on the same seeds and write a
        /// comparison report.
        #[arg(long)]
        with_baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the environment protocol over TCP or standard I/O.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
        #[arg(long, default_value_t = 16)]
        max_sessions: usize,
    },
    /// Summarize run directories into report.csv and ratios.csv.
    Export {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Write a preset scenario to a file for editing.
    Scenario {
        #[arg(long, default_value = "scenario1")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArg {
    /// Preset name (scenario1, scenario2) or scenario file.
    #[arg(long, default_value = "scenario1")]
    scenario: String,
}

impl ScenarioArg {
    fn load(&self) -> Result<ScenarioSpec> {
        ScenarioSpec::load(&self.scenario).with_context(|| format!("loading scenario {}", self.scenario))
    }
}

fn expand_seeds(seeds: &[u64], episodes: usize) -> Result<Vec<u64>> {
    match seeds {
        [] => bail!("no seeds given"),
        [first] => Ok((0..episodes as u64).map(|i| first + i).collect()),
        list if list.len() >= episodes => Ok(list[..episodes].to_vec()),
        list => bail!("{} seeds given for {episodes} episodes", list.len()),
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn print_summary(dir: &Path, manifest: &harness::RunManifest) {
    let s = &manifest.summary;
    let fmt = |v: Option<f64>| v.map_or("no-data".to_string(), |v| format!("{v:.3}"));
    println!(
        "{}: agent={} episodes={} mean_reward={} mean_tt_per_vehicle={} max_sensed_queue={} max_physical_queue={}",
        dir.display(),
        manifest.agent,
        s.episodes,
        fmt(s.mean_reward),
        fmt(s.mean_tt_per_vehicle),
        s.max_sensed_queue,
        s.max_physical_queue
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, agent, episodes, seed, out } => {
            let spec = scenario.load()?;
            let agent = agent.parse::<AgentSpec>()?.load(seed)?;
            let seeds = expand_seeds(&[seed], episodes)?;
            let (_, manifest) = harness::run_scenario(&spec, &agent, &seeds, &out, &command_line())?;
            print_summary(&out, &manifest);
        }
        Command::Train { scenario, config, out } => {
            let spec = scenario.load()?;
            let config: TrainConfig = match config {
                Some(path) => serde_json::from_str(&fs::read_to_string(&path).with_context(|| path.display().to_string())?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => TrainConfig::default(),
            };
            fs::create_dir_all(&out)?;
            let mut env = SignalEnv::new(spec.clone())?;
            let outcome = learner::train_with(&mut env, &config, |episode, params| {
                learner::save_checkpoint(params, &out.join(format!("policy_{episode:06}.ckpt")))
            })?;
            learner::save_checkpoint(&outcome.params, &out.join(harness::POLICY))?;
            let mut curve = std::io::BufWriter::new(fs::File::create(out.join("learning_curve.csv"))?);
            learner::write_learning_curve(&outcome.curve, &mut curve)?;
            curve.flush()?;
            let record = serde_json::json!({
                "tool": "atsc",
                "version": env!("CARGO_PKG_VERSION"),
                "command": command_line(),
                "config": config,
                "scenario": spec,
            });
            fs::write(out.join("training.json"), serde_json::to_string_pretty(&record)? + "\n")?;
            let tail = &outcome.curve[outcome.curve.len().saturating_sub(10)..];
            if !tail.is_empty() {
                println!(
                    "trained {} episodes; mean reward of last {}: {:.3}",
                    outcome.curve.len(),
                    tail.len(),
                    tail.iter().sum::<f64>() / tail.len() as f64
                );
            }
            println!("policy written to {}", out.join(harness::POLICY).display());
        }
        Command::Evaluate { scenario, ckpt, episodes, seeds, with_baseline, out } => {
            let spec = scenario.load()?;
            let params = learner::load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let seeds = expand_seeds(&seeds, episodes)?;
            if with_baseline {
                for (name, agent) in [("fixed", Agent::FixedTime), ("policy", Agent::Policy(params))] {
                    let dir = out.join(name);
                    let (_, manifest) = harness::run_scenario(&spec, &agent, &seeds, &dir, &command_line())?;
                    print_summary(&dir, &manifest);
                }
                for r in harness::export_metrics(&out)?.ratios {
                    let ratio = r.ratio.map_or("no-data".to_string(), |v| format!("{v:.3}"));
                    println!("travel time ratio {} / {}: {ratio}", r.run, r.baseline);
                }
            } else {
                let (_, manifest) = harness::run_scenario(&spec, &Agent::Policy(params), &seeds, &out, &command_line())?;
                print_summary(&out, &manifest);
            }
        }
        Command::Serve { scenario, listen, stdio, max_sessions } => {
            let spec = scenario.load()?;
            if stdio {
                harness::serve_stdio(spec)?;
            } else {
                let addr = listen.expect("clap enforces --listen or --stdio");
                let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                harness::serve_tcp(spec, listener, max_sessions)?;
            }
        }
        Command::Export { runs } => {
            let report = harness::export_metrics(&runs)?;
            println!("{} runs summarized in {}", report.runs.len(), runs.join(harness::REPORT).display());
            for r in report.ratios {
                let ratio = r.ratio.map_or("no-data".to_string(), |v| format!("{v:.3}"));
                println!("travel time ratio {} / {}: {ratio}", r.run, r.baseline);
            }
        }
        Command::Scenario { preset, out } => {
            let spec = ScenarioSpec::load(&preset)?;
            fs::write(&out, spec.to_json() + "\n")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
