//! Point-queue mesoscopic engine with a fixed 1 s step.
//!
//! A vehicle entering a link travels at free-flow speed to the stop line and
//! joins the FIFO queue of its downstream movement. While the serving phase
//! is green each movement accrues service credit at its saturation rate and
//! releases one vehicle per whole unit of credit. Queues are vertical: they
//! never block the upstream link and have no storage cap.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{ArrivalSchedule, LinkId, LinkKind, Network, Route, Turn, VehicleId};
use crate::signals::{self, Movement, PlanHistory, SignalPlan};

/// Discharge rate as an exact ratio: `vehicles` per `seconds` of green.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub vehicles: u32,
    pub seconds: u32,
}

impl Rate {
    pub fn per_second(self) -> f64 {
        self.vehicles as f64 / self.seconds as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationRates {
    /// Aggregate over both straight lanes.
    pub straight: Rate,
    pub left: Rate,
    pub right: Rate,
}

impl Default for SaturationRates {
    /// Straight discharges exactly 50 vehicles in the 42 s P1 of a 50 s split.
    fn default() -> Self {
        SaturationRates {
            straight: Rate { vehicles: 50, seconds: 42 },
            left: Rate { vehicles: 1, seconds: 2 },
            right: Rate { vehicles: 1, seconds: 2 },
        }
    }
}

impl SaturationRates {
    pub fn for_turn(&self, turn: Turn) -> Rate {
        match turn {
            Turn::Straight => self.straight,
            Turn::Left => self.left,
            Turn::Right => self.right,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.straight, self.left, self.right] {
            if r.seconds == 0 {
                return Err(Error::config("saturation rate with zero seconds"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkRecord {
    pub vehicle: VehicleId,
    pub link: LinkId,
    pub t_entry: f64,
    pub t_exit: Option<f64>,
    /// Movement at the downstream intersection.
    pub movement: Turn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t0: f64,
    pub t1: f64,
    /// Vehicle-seconds spent in the network during `[t0, t1)`.
    pub total_travel_time: f64,
    /// Vehicles in the network for some part of the window.
    pub vehicles_present: usize,
    pub vehicles_entered: usize,
    pub vehicles_exited: usize,
    /// Physical queue per link at the end of the simulated time.
    pub queue_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Vehicle {
    route: Arc<Route>,
    hop: usize,
    record: usize,
    injected: Option<u64>,
    done: Option<u64>,
}

#[derive(Clone, Debug, Default)]
struct LinkState {
    /// `(queue join time, vehicle)`, in join order.
    transit: VecDeque<(f64, VehicleId)>,
    queues: [VecDeque<VehicleId>; 3],
    /// Service credit in units of `1 / rate.seconds` vehicles.
    credit: [u32; 3],
}

#[derive(Clone, Debug)]
pub struct SimState {
    network: Arc<Network>,
    rates: SaturationRates,
    plans: Vec<PlanHistory>,
    clock: u64,
    schedule: Arc<ArrivalSchedule>,
    cursor: usize,
    vehicles: Vec<Vehicle>,
    links: Vec<LinkState>,
    records: Vec<LinkRecord>,
    link_records: Vec<Vec<usize>>,
    injected: usize,
    exited: usize,
}

impl SimState {
    pub fn new(
        network: Arc<Network>,
        plans: Vec<SignalPlan>,
        rates: SaturationRates,
        schedule: Arc<ArrivalSchedule>,
    ) -> Result<SimState> {
        if plans.len() != network.intersection_count() {
            return Err(Error::invalid(format!(
                "{} signal plans for {} intersections",
                plans.len(),
                network.intersection_count()
            )));
        }
        rates.validate()?;
        for (i, a) in schedule.arrivals.iter().enumerate() {
            if a.vehicle != i {
                return Err(Error::invalid("arrival schedule vehicle ids must be 0..n in order"));
            }
        }
        let vehicles = schedule
            .arrivals
            .iter()
            .map(|a| Vehicle { route: a.route.clone(), hop: 0, record: usize::MAX, injected: None, done: None })
            .collect();
        let n_links = network.links().len();
        Ok(SimState {
            plans: plans.into_iter().map(PlanHistory::new).collect(),
            rates,
            clock: 0,
            schedule,
            cursor: 0,
            vehicles,
            links: vec![LinkState::default(); n_links],
            records: Vec::new(),
            link_records: vec![Vec::new(); n_links],
            injected: 0,
            exited: 0,
            network,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn clock(&self) -> f64 {
        self.clock as f64
    }

    pub fn plans(&self) -> &[PlanHistory] {
        &self.plans
    }

    /// Split of the most recently scheduled cycle at each intersection.
    pub fn splits(&self) -> Vec<f64> {
        self.plans.iter().map(|h| h.latest().split).collect()
    }

    /// Adjusts the split of `intersection` by `delta`, clamped, starting
    /// with the next cycle boundary at or after the current clock. Returns
    /// the resulting split.
    pub fn adjust_split(&mut self, intersection: usize, delta: f64) -> Result<f64> {
        let history = self
            .plans
            .get_mut(intersection)
            .ok_or_else(|| Error::invalid(format!("no intersection {intersection}")))?;
        let next = history.latest().apply_split(delta);
        let from = history.next_boundary_cycle(self.clock as f64);
        history.schedule(from, next);
        Ok(next.split)
    }

    pub fn records(&self) -> &[LinkRecord] {
        &self.records
    }

    pub fn link_records(&self, link: LinkId) -> impl Iterator<Item = &LinkRecord> + '_ {
        self.link_records[link].iter().map(move |&i| &self.records[i])
    }

    pub fn vehicles_injected(&self) -> usize {
        self.injected
    }

    pub fn vehicles_exited(&self) -> usize {
        self.exited
    }

    /// Vehicles currently travelling or queued, counted from the link
    /// containers themselves.
    pub fn vehicles_on_network(&self) -> usize {
        self.links
            .iter()
            .map(|l| l.transit.len() + l.queues.iter().map(VecDeque::len).sum::<usize>())
            .sum()
    }

    pub fn queue_len(&self, link: LinkId, turn: Turn) -> usize {
        self.links[link].queues[turn.index()].len()
    }

    pub fn queued_on(&self, link: LinkId) -> usize {
        self.links[link].queues.iter().map(VecDeque::len).sum()
    }

    pub fn queue_vehicles(&self, link: LinkId, turn: Turn) -> impl Iterator<Item = VehicleId> + '_ {
        self.links[link].queues[turn.index()].iter().copied()
    }

    /// Advances the clock by one second and returns the number of records
    /// appended.
    pub fn step(&mut self) -> usize {
        let before = self.records.len();
        let now = self.clock;
        let t = now as f64;

        while self.cursor < self.schedule.arrivals.len() && self.schedule.arrivals[self.cursor].time < t + 1.0 {
            let v = self.schedule.arrivals[self.cursor].vehicle;
            self.cursor += 1;
            self.vehicles[v].injected = Some(now);
            self.injected += 1;
            self.enter_link(v, now);
        }

        for link in 0..self.links.len() {
            let is_exit = matches!(self.network.link(link).kind, LinkKind::Exit(_));
            while let Some(&(join, v)) = self.links[link].transit.front() {
                if join > t {
                    break;
                }
                self.links[link].transit.pop_front();
                if is_exit {
                    self.records[self.vehicles[v].record].t_exit = Some(t);
                    self.vehicles[v].done = Some(now);
                    self.exited += 1;
                } else {
                    let turn = self.vehicles[v].route.movement(self.vehicles[v].hop);
                    self.links[link].queues[turn.index()].push_back(v);
                }
            }
        }

        for link in 0..self.links.len() {
            let (node, heading) = match self.network.link(link) {
                l if l.to.is_some() => (l.to.unwrap(), l.heading),
                _ => continue,
            };
            for turn in Turn::ALL {
                let slot = turn.index();
                let movement = Movement::new(node, heading, turn);
                if !signals::is_green(&self.plans[node], &movement, t) {
                    self.links[link].credit[slot] = 0;
                    continue;
                }
                let rate = self.rates.for_turn(turn);
                let state = &mut self.links[link];
                let credit = state.credit[slot] + rate.vehicles;
                let released = (credit / rate.seconds) as usize;
                state.credit[slot] = credit % rate.seconds;
                for _ in 0..released {
                    let Some(v) = self.links[link].queues[slot].pop_front() else {
                        break;
                    };
                    self.records[self.vehicles[v].record].t_exit = Some(t);
                    self.vehicles[v].hop += 1;
                    self.enter_link(v, now);
                }
            }
        }

        self.clock += 1;
        self.records.len() - before
    }

    fn enter_link(&mut self, v: VehicleId, now: u64) {
        let vehicle = &mut self.vehicles[v];
        let link = vehicle.route.links[vehicle.hop];
        let movement = vehicle.route.movement(vehicle.hop);
        let record = self.records.len();
        vehicle.record = record;
        self.records.push(LinkRecord { vehicle: v, link, t_entry: now as f64, t_exit: None, movement });
        self.link_records[link].push(record);
        let join = now as f64 + self.network.link(link).free_flow_time();
        self.links[link].transit.push_back((join, v));
    }

    /// Steps until the clock reaches `t_target`; returns the records
    /// appended on the way.
    pub fn run_until(&mut self, t_target: f64) -> Result<&[LinkRecord]> {
        if !(t_target >= self.clock as f64) {
            return Err(Error::invalid(format!(
                "target time {t_target} is before the clock ({})",
                self.clock
            )));
        }
        let start = self.records.len();
        while (self.clock as f64) < t_target {
            self.step();
        }
        Ok(&self.records[start..])
    }

    /// Travel time and flow counts over `[t0, t1)`.
    pub fn snapshot_metrics(&self, t0: f64, t1: f64) -> Result<StepMetrics> {
        let now = self.clock as f64;
        if !(t0 <= t1) || t0 < 0.0 {
            return Err(Error::invalid(format!("bad window [{t0}, {t1})")));
        }
        if t1 > now {
            return Err(Error::invalid(format!("window end {t1} beyond simulated time {now}")));
        }
        let mut m = StepMetrics {
            t0,
            t1,
            total_travel_time: 0.0,
            vehicles_present: 0,
            vehicles_entered: 0,
            vehicles_exited: 0,
            queue_counts: (0..self.links.len()).map(|l| self.queued_on(l)).collect(),
        };
        for v in &self.vehicles[..self.cursor] {
            let Some(a) = v.injected else { continue };
            let a = a as f64;
            let end = v.done.map_or(now, |d| d as f64);
            let overlap = end.min(t1) - a.max(t0);
            if overlap > 0.0 {
                m.total_travel_time += overlap;
                m.vehicles_present += 1;
            }
            if a >= t0 && a < t1 {
                m.vehicles_entered += 1;
            }
            if v.done.is_some() && end >= t0 && end < t1 {
                m.vehicles_exited += 1;
            }
        }
        Ok(m)
    }
}

/// Writes `vehicle,link,t_entry,t_exit,movement` lines; a pending exit is an
/// empty field.
pub fn write_event_log<W: Write>(records: &[LinkRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        match r.t_exit {
            Some(x) => writeln!(out, "{},{},{},{},{}", r.vehicle, r.link, r.t_entry, x, r.movement.as_str())?,
            None => writeln!(out, "{},{},{},,{}", r.vehicle, r.link, r.t_entry, r.movement.as_str())?,
        }
    }
    Ok(())
}

pub fn read_event_log<R: BufRead>(input: R) -> Result<Vec<LinkRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::invalid(format!("event log line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(LinkRecord {
            vehicle: f[0].parse().map_err(|_| bad())?,
            link: f[1].parse().map_err(|_| bad())?,
            t_entry: f[2].parse().map_err(|_| bad())?,
            t_exit: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            movement: Turn::parse(f[4]).ok_or_else(bad)?,
        });
    }
    Ok(out)
}
