//! Four-phase fixed-cycle signal plans.
//!
//! A cycle runs `P1, Y, AR, P2, Y, AR, P3, Y, AR, P4, Y, AR` where P1 serves
//! north-south straight and right turns, P2 north-south lefts, P3 east-west
//! straight and right turns, P4 east-west lefts. The split `s` is the
//! north-south share `P1 + P2`; clearance intervals are outside it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Heading, NodeId, Turn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// P1
    NsThrough,
    /// P2
    NsLeft,
    /// P3
    EwThrough,
    /// P4
    EwLeft,
}

impl Phase {
    pub const ORDER: [Phase; 4] = [Phase::NsThrough, Phase::NsLeft, Phase::EwThrough, Phase::EwLeft];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntervalKind {
    Green(Phase),
    Yellow,
    AllRed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub kind: IntervalKind,
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Movement {
    pub intersection: NodeId,
    /// Heading of the approaching traffic.
    pub approach: Heading,
    pub turn: Turn,
}

impl Movement {
    pub fn new(intersection: NodeId, approach: Heading, turn: Turn) -> Self {
        Movement { intersection, approach, turn }
    }

    pub fn phase(&self) -> Phase {
        match (self.approach.is_north_south(), self.turn) {
            (true, Turn::Left) => Phase::NsLeft,
            (true, _) => Phase::NsThrough,
            (false, Turn::Left) => Phase::EwLeft,
            (false, _) => Phase::EwThrough,
        }
    }
}

/// Signal constants shared by every intersection of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalTiming {
    pub cycle: f64,
    pub left_phase: f64,
    pub yellow: f64,
    pub all_red: f64,
    pub initial_split: f64,
    pub split_min: f64,
    pub split_max: f64,
    pub split_step: f64,
    /// Per-intersection offsets; missing entries are 0.
    #[serde(default)]
    pub offsets: Vec<f64>,
}

impl Default for SignalTiming {
    fn default() -> Self {
        SignalTiming {
            cycle: 100.0,
            left_phase: 8.0,
            yellow: 2.0,
            all_red: 2.0,
            initial_split: 50.0,
            split_min: 30.0,
            split_max: 70.0,
            split_step: 2.0,
            offsets: Vec::new(),
        }
    }
}

impl SignalTiming {
    pub fn offset(&self, intersection: NodeId) -> f64 {
        self.offsets.get(intersection).copied().unwrap_or(0.0)
    }

    pub fn initial_plan(&self, intersection: NodeId) -> Result<SignalPlan> {
        SignalPlan::new(self, self.initial_split, self.offset(intersection))
    }

    pub fn validate(&self) -> Result<()> {
        SignalPlan::new(self, self.initial_split, 0.0)?;
        if !(self.split_step > 0.0) {
            return Err(Error::config(format!("split step must be positive, got {}", self.split_step)));
        }
        for &o in &self.offsets {
            if !(o >= 0.0 && o < self.cycle) {
                return Err(Error::config(format!("offset {o} outside [0, cycle)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub cycle: f64,
    pub split: f64,
    pub left_phase: f64,
    pub yellow: f64,
    pub all_red: f64,
    pub offset: f64,
    pub split_min: f64,
    pub split_max: f64,
}

impl SignalPlan {
    pub fn new(timing: &SignalTiming, split: f64, offset: f64) -> Result<SignalPlan> {
        let plan = SignalPlan {
            cycle: timing.cycle,
            split,
            left_phase: timing.left_phase,
            yellow: timing.yellow,
            all_red: timing.all_red,
            offset,
            split_min: timing.split_min,
            split_max: timing.split_max,
        };
        let vals = [plan.cycle, plan.split, plan.left_phase, plan.yellow, plan.all_red, plan.offset];
        if vals.iter().any(|v| !v.is_finite()) || plan.cycle <= 0.0 || plan.left_phase <= 0.0 {
            return Err(Error::config("signal constants must be finite and positive"));
        }
        if plan.yellow < 0.0 || plan.all_red < 0.0 {
            return Err(Error::config("clearance intervals must be non-negative"));
        }
        if !(plan.split_min <= plan.split_max) {
            return Err(Error::config(format!(
                "split bounds out of order: [{}, {}]",
                plan.split_min, plan.split_max
            )));
        }
        if !(plan.split_min <= split && split <= plan.split_max) {
            return Err(Error::config(format!(
                "split {split} outside [{}, {}]",
                plan.split_min, plan.split_max
            )));
        }
        // Both through phases must stay positive over the whole split range.
        if plan.split_min - plan.left_phase <= 0.0 {
            return Err(Error::config("lower split bound leaves no north-south through green"));
        }
        if plan.east_west_budget() - plan.split_max <= 0.0 {
            return Err(Error::config("upper split bound leaves no east-west through green"));
        }
        Ok(plan)
    }

    fn clearance(&self) -> f64 {
        self.yellow + self.all_red
    }

    /// `P3 = budget - s`.
    fn east_west_budget(&self) -> f64 {
        self.cycle - 4.0 * self.clearance() - self.left_phase
    }

    /// `[P1, P2, P3, P4]` in seconds.
    pub fn phase_durations(&self) -> [f64; 4] {
        let p1 = self.split - self.left_phase;
        let p2 = self.left_phase;
        let p4 = self.left_phase;
        let p3 = self.cycle - 4.0 * self.clearance() - p2 - p4 - p1;
        [p1, p2, p3, p4]
    }

    pub fn phase_duration(&self, phase: Phase) -> f64 {
        self.phase_durations()[phase_slot(phase)]
    }

    /// Seconds from the cycle start to the start of `phase`.
    pub fn phase_start_in_cycle(&self, phase: Phase) -> f64 {
        let d = self.phase_durations();
        let slot = phase_slot(phase);
        d[..slot].iter().sum::<f64>() + slot as f64 * self.clearance()
    }

    pub fn cycle_start(&self, cycle_index: i64) -> f64 {
        self.offset + cycle_index as f64 * self.cycle
    }

    /// Index of the cycle containing `t` (negative before the first offset).
    pub fn cycle_of(&self, t: f64) -> i64 {
        ((t - self.offset) / self.cycle).floor() as i64
    }

    pub fn phase_timeline(&self, cycle_index: u64) -> Vec<Interval> {
        let mut t = self.cycle_start(cycle_index as i64);
        let mut out = Vec::with_capacity(12);
        for (phase, dur) in Phase::ORDER.into_iter().zip(self.phase_durations()) {
            for (kind, len) in [
                (IntervalKind::Green(phase), dur),
                (IntervalKind::Yellow, self.yellow),
                (IntervalKind::AllRed, self.all_red),
            ] {
                out.push(Interval { kind, start: t, end: t + len });
                t += len;
            }
        }
        out
    }

    /// Cumulative adjustment, clamped to the split bounds.
    pub fn apply_split(&self, delta: f64) -> SignalPlan {
        SignalPlan {
            split: (self.split + delta).clamp(self.split_min, self.split_max),
            ..*self
        }
    }

    pub fn is_green(&self, movement: &Movement, t: f64) -> bool {
        is_green(self, movement, t)
    }

    pub fn green_start_before(&self, movement: &Movement, t: f64) -> Option<f64> {
        green_start_before(self, movement.phase(), t)
    }

    pub fn green_start_after(&self, movement: &Movement, t: f64) -> f64 {
        green_start_after(self, movement.phase(), t)
    }
}

fn phase_slot(phase: Phase) -> usize {
    match phase {
        Phase::NsThrough => 0,
        Phase::NsLeft => 1,
        Phase::EwThrough => 2,
        Phase::EwLeft => 3,
    }
}

/// A sequence of cycles, each run under some plan. Cycle length and offset
/// are constant; only the split may differ between cycles.
pub trait Timetable {
    fn plan_for_cycle(&self, cycle_index: i64) -> &SignalPlan;

    fn cycle_of(&self, t: f64) -> i64 {
        self.plan_for_cycle(0).cycle_of(t)
    }
}

impl Timetable for SignalPlan {
    fn plan_for_cycle(&self, _cycle_index: i64) -> &SignalPlan {
        self
    }
}

fn phase_start(table: &impl Timetable, phase: Phase, k: i64) -> f64 {
    let plan = table.plan_for_cycle(k);
    plan.cycle_start(k) + plan.phase_start_in_cycle(phase)
}

pub fn is_green(table: &impl Timetable, movement: &Movement, t: f64) -> bool {
    let k = table.cycle_of(t);
    let plan = table.plan_for_cycle(k);
    let start = plan.cycle_start(k) + plan.phase_start_in_cycle(movement.phase());
    t >= start && t < start + plan.phase_duration(movement.phase())
}

/// Largest start of `phase` that is `<= t`. Only starts at or after time 0
/// exist; `None` if `t` precedes the first one.
pub fn green_start_before(table: &impl Timetable, phase: Phase, t: f64) -> Option<f64> {
    // One cycle of slack: `cycle_of` can round either way at a boundary.
    let mut k = table.cycle_of(t) + 1;
    loop {
        let start = phase_start(table, phase, k);
        if start <= t {
            return (start >= 0.0).then_some(start);
        }
        if table.plan_for_cycle(k).cycle_start(k) < 0.0 {
            return None;
        }
        k -= 1;
    }
}

/// Smallest start of `phase` that is `> t`.
pub fn green_start_after(table: &impl Timetable, phase: Phase, t: f64) -> f64 {
    let mut k = table.cycle_of(t) - 1;
    loop {
        let start = phase_start(table, phase, k);
        if start > t {
            return start;
        }
        k += 1;
    }
}

/// Plans in force per cycle for one intersection. Split changes are
/// scheduled for a cycle index and hold until the next change.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanHistory {
    entries: Vec<(i64, SignalPlan)>,
}

impl PlanHistory {
    pub fn new(initial: SignalPlan) -> Self {
        PlanHistory { entries: vec![(i64::MIN, initial)] }
    }

    /// Plan of the most recently scheduled cycle.
    pub fn latest(&self) -> &SignalPlan {
        &self.entries.last().expect("history is never empty").1
    }

    /// Run `plan` from cycle `from_cycle` onwards, replacing anything
    /// scheduled at or after it.
    pub fn schedule(&mut self, from_cycle: i64, plan: SignalPlan) {
        while self.entries.len() > 1 && self.entries.last().unwrap().0 >= from_cycle {
            self.entries.pop();
        }
        if *self.latest() != plan {
            self.entries.push((from_cycle, plan));
        }
    }

    /// First cycle boundary at or after `t`.
    pub fn next_boundary_cycle(&self, t: f64) -> i64 {
        let plan = self.latest();
        let k = plan.cycle_of(t);
        if plan.cycle_start(k) == t {
            k
        } else {
            k + 1
        }
    }

    pub fn changes(&self) -> usize {
        self.entries.len() - 1
    }
}

impl Timetable for PlanHistory {
    fn plan_for_cycle(&self, cycle_index: i64) -> &SignalPlan {
        let idx = self.entries.partition_point(|(k, _)| *k <= cycle_index);
        &self.entries[idx.saturating_sub(1)].1
    }
}
