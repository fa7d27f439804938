//! The cheaper acceptance criteria as ordinary tests.

mod common;

#[test]
fn reward_unit_table() {
    common::reward_table().assert();
}

#[test]
fn queue_estimator_matches_brute_force() {
    common::queue_oracle(1000, 99).assert();
}

#[test]
fn saturated_straight_queue_discharges_fifty_per_cycle() {
    common::saturation().assert();
}

#[test]
fn episode_accounting() {
    common::episode_accounting().assert();
}

#[test]
fn replays_are_byte_identical() {
    common::determinism().assert();
}

#[test]
fn analytic_gradients_match_finite_differences() {
    common::gradient_check(100, 31).assert();
}

#[test]
fn probe_estimates_are_consistent() {
    common::probe_consistency(500).assert();
}

#[test]
fn vehicles_are_conserved() {
    common::conservation(0).assert();
}
