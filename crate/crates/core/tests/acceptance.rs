//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary (`cargo test --test acceptance`).

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Check;

fn report(name: &str, started: Instant, check: &Check) {
    println!(
        "{} {name} ({:.1}s): {}",
        if check.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        check.detail
    );
}

fn run(name: &str, f: impl FnOnce() -> Check) -> usize {
    let started = Instant::now();
    let check = f();
    report(name, started, &check);
    usize::from(!check.pass)
}

fn main() -> ExitCode {
    let mut failures = 0;
    failures += run("reward-unit-table", common::reward_table);
    failures += run("queue-estimator-oracle", || common::queue_oracle(1000, 2024));
    failures += run("saturation-calibration", common::saturation);
    failures += run("episode-accounting", common::episode_accounting);
    failures += run("determinism", common::determinism);
    failures += run("gradient-check", || common::gradient_check(120, 7));
    failures += run("probe-consistency", || common::probe_consistency(600));

    let started = Instant::now();
    let efficacy = common::control_efficacy();
    report("control-efficacy-queue", started, &efficacy.check_queue);
    report("control-efficacy-travel-time", started, &efficacy.check_tt);
    failures += usize::from(!efficacy.check_queue.pass) + usize::from(!efficacy.check_tt.pass);

    failures += run("conservation", || common::conservation(efficacy.violations));

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
