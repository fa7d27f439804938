//! Link queue estimation from per-vehicle link records.
//!
//! At control time `t`, with `u` the most recent start (≤ t) of the upstream
//! straight phase feeding the link and `d` the next start (> t) of the
//! downstream straight phase leaving it, a straight-bound vehicle is queued
//! if it entered the link no later than `u` and either
//!
//! * has left the link, at or after `d`, or
//! * has not left the link yet.
//!
//! Only internal links have both an upstream and a downstream signal, so
//! only they carry estimates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesosim::LinkRecord;
use crate::netmodel::{LinkId, Network, Turn, VehicleId};
use crate::signals::{self, Movement, Timetable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Probe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEstimate {
    pub link: LinkId,
    pub time: f64,
    /// Reported count, clamped to `[0, q_ub]`.
    pub value: u32,
    /// Count before clamping (scaled by `1/p` for probes).
    pub unclamped: f64,
    pub method: Method,
    pub penetration: Option<f64>,
    /// Set when `t` precedes the first upstream green start.
    pub no_reference_green: bool,
}

impl QueueEstimate {
    pub fn write_line<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let method = match self.method {
            Method::Full => "full",
            Method::Probe => "probe",
        };
        match self.penetration {
            Some(p) => writeln!(out, "{},{},{},{},{}", self.link, self.time, self.value, method, p),
            None => writeln!(out, "{},{},{},{},", self.link, self.time, self.value, method),
        }
    }
}

/// Per-vehicle probe membership, drawn once and held for the whole trip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSet {
    members: Vec<bool>,
}

impl ProbeSet {
    pub fn bernoulli(vehicles: usize, p: f64, seed: u64) -> Result<ProbeSet> {
        check_penetration(p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..vehicles).map(|_| rng.random::<f64>() < p).collect();
        Ok(ProbeSet { members })
    }

    pub fn all(vehicles: usize) -> ProbeSet {
        ProbeSet { members: vec![true; vehicles] }
    }

    pub fn from_members(members: Vec<bool>) -> ProbeSet {
        ProbeSet { members }
    }

    pub fn contains(&self, vehicle: VehicleId) -> bool {
        self.members.get(vehicle).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_penetration(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("probe penetration must lie in (0, 1], got {p}")))
    }
}

/// Reference green starts for `link` at control time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreenReferences {
    pub upstream: Option<f64>,
    pub downstream: f64,
}

pub struct QueueSensor<'a, T> {
    network: &'a Network,
    plans: &'a [T],
    q_ub: u32,
}

impl<'a, T: Timetable> QueueSensor<'a, T> {
    pub fn new(network: &'a Network, plans: &'a [T], q_ub: u32) -> Result<Self> {
        if plans.len() != network.intersection_count() {
            return Err(Error::invalid(format!(
                "{} plans for {} intersections",
                plans.len(),
                network.intersection_count()
            )));
        }
        Ok(QueueSensor { network, plans, q_ub })
    }

    pub fn references(&self, link: LinkId, t: f64) -> Result<GreenReferences> {
        let l = self
            .network
            .links()
            .get(link)
            .ok_or_else(|| Error::invalid(format!("no link {link}")))?;
        let (Some(up), Some(down)) = (l.from, l.to) else {
            return Err(Error::invalid(format!("link {link} is not between two signals")));
        };
        let phase = Movement::new(up, l.heading, Turn::Straight).phase();
        Ok(GreenReferences {
            upstream: signals::green_start_before(&self.plans[up], phase, t),
            downstream: signals::green_start_after(&self.plans[down], phase, t),
        })
    }

    fn count<'r>(
        &self,
        records: impl IntoIterator<Item = &'r LinkRecord>,
        link: LinkId,
        refs: GreenReferences,
        mut include: impl FnMut(VehicleId) -> bool,
    ) -> usize {
        let Some(up) = refs.upstream else { return 0 };
        records
            .into_iter()
            .filter(|r| r.link == link && r.movement == Turn::Straight && r.t_entry <= up)
            .filter(|r| r.t_exit.map_or(true, |x| x >= refs.downstream))
            .filter(|r| include(r.vehicle))
            .count()
    }

    fn clamp(&self, x: f64) -> u32 {
        x.clamp(0.0, self.q_ub as f64) as u32
    }

    pub fn true_queue<'r>(
        &self,
        records: impl IntoIterator<Item = &'r LinkRecord>,
        link: LinkId,
        t: f64,
    ) -> Result<QueueEstimate> {
        let refs = self.references(link, t)?;
        let n = self.count(records, link, refs, |_| true) as f64;
        Ok(QueueEstimate {
            link,
            time: t,
            value: self.clamp(n),
            unclamped: n,
            method: Method::Full,
            penetration: None,
            no_reference_green: refs.upstream.is_none(),
        })
    }

    /// Probe count scaled by `1/p`, rounded half up, then clamped.
    pub fn probe_queue<'r>(
        &self,
        records: impl IntoIterator<Item = &'r LinkRecord>,
        link: LinkId,
        t: f64,
        p: f64,
        probes: &ProbeSet,
    ) -> Result<QueueEstimate> {
        check_penetration(p)?;
        let refs = self.references(link, t)?;
        let n = self.count(records, link, refs, |v| probes.contains(v)) as f64;
        let scaled = (n / p + 0.5).floor();
        Ok(QueueEstimate {
            link,
            time: t,
            value: self.clamp(scaled),
            unclamped: scaled,
            method: Method::Probe,
            penetration: Some(p),
            no_reference_green: refs.upstream.is_none(),
        })
    }
}

/// Mean link travel time of straight-bound vehicles that left `link` during
/// `[t0, t1)`; `None` when there are none.
pub fn mean_link_travel_time<'r>(
    records: impl IntoIterator<Item = &'r LinkRecord>,
    link: LinkId,
    t0: f64,
    t1: f64,
) -> Option<f64> {
    let (sum, n) = records
        .into_iter()
        .filter(|r| r.link == link && r.movement == Turn::Straight)
        .filter_map(|r| r.t_exit.filter(|&x| x >= t0 && x < t1).map(|x| x - r.t_entry))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    (n > 0).then(|| sum / n as f64)
}
