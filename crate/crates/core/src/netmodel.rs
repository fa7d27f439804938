//! Road network and demand.
//!
//! Intersections sit on a `rows x cols` grid; node `r * cols + c` is row `r`
//! (counted from the north edge) and column `c` (counted from the west edge).
//! Every pair of orthogonal neighbours is joined by two directed internal
//! links. Each boundary approach carries one zone with an entry link feeding
//! the intersection and an exit link leaving it.
//!
//! Link ids are assigned internal links first, so `0..internal_link_count()`
//! are exactly the monitored links.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type LinkId = usize;
pub type ZoneId = usize;
pub type VehicleId = usize;

/// Direction of travel. `NS` means travelling from north to south.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    NS,
    SN,
    EW,
    WE,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::NS, Heading::SN, Heading::EW, Heading::WE];

    /// Clockwise quarter turns from northbound.
    fn quarter_turns(self) -> u8 {
        match self {
            Heading::SN => 0,
            Heading::WE => 1,
            Heading::NS => 2,
            Heading::EW => 3,
        }
    }

    fn from_quarter_turns(q: u8) -> Heading {
        match q % 4 {
            0 => Heading::SN,
            1 => Heading::WE,
            2 => Heading::NS,
            _ => Heading::EW,
        }
    }

    pub fn is_north_south(self) -> bool {
        matches!(self, Heading::NS | Heading::SN)
    }

    /// The movement that takes a vehicle travelling `self` onto `next`.
    /// `None` for a U-turn.
    pub fn turn_to(self, next: Heading) -> Option<Turn> {
        match (next.quarter_turns() + 4 - self.quarter_turns()) % 4 {
            0 => Some(Turn::Straight),
            1 => Some(Turn::Right),
            3 => Some(Turn::Left),
            _ => None,
        }
    }

    pub fn after(self, turn: Turn) -> Heading {
        let q = self.quarter_turns();
        match turn {
            Turn::Straight => self,
            Turn::Right => Heading::from_quarter_turns(q + 1),
            Turn::Left => Heading::from_quarter_turns(q + 3),
        }
    }

    fn step(self) -> (isize, isize) {
        match self {
            Heading::NS => (1, 0),
            Heading::SN => (-1, 0),
            Heading::EW => (0, -1),
            Heading::WE => (0, 1),
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Heading::NS => "NS",
            Heading::SN => "SN",
            Heading::EW => "EW",
            Heading::WE => "WE",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Straight,
    Left,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Straight, Turn::Left, Turn::Right];

    pub fn index(self) -> usize {
        match self {
            Turn::Straight => 0,
            Turn::Left => 1,
            Turn::Right => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Turn::Straight => "straight",
            Turn::Left => "left",
            Turn::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Turn> {
        match s {
            "straight" => Some(Turn::Straight),
            "left" => Some(Turn::Left),
            "right" => Some(Turn::Right),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    North,
    East,
    South,
    West,
}

impl Side {
    fn letter(self) -> char {
        match self {
            Side::North => 'N',
            Side::East => 'E',
            Side::South => 'S',
            Side::West => 'W',
        }
    }

    /// Heading of traffic entering the grid from this side.
    pub fn inbound(self) -> Heading {
        match self {
            Side::North => Heading::NS,
            Side::South => Heading::SN,
            Side::West => Heading::WE,
            Side::East => Heading::EW,
        }
    }

    /// Heading of traffic leaving the grid through this side.
    pub fn outbound(self) -> Heading {
        match self {
            Side::North => Heading::SN,
            Side::South => Heading::NS,
            Side::West => Heading::EW,
            Side::East => Heading::WE,
        }
    }
}

/// Two straight lanes, one left-turn lane, one right-turn lane at every
/// approach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneLayout {
    pub straight: u8,
    pub left: u8,
    pub right: u8,
}

impl Default for LaneLayout {
    fn default() -> Self {
        LaneLayout { straight: 2, left: 1, right: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkKind {
    Internal,
    Entry(ZoneId),
    Exit(ZoneId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: LinkId,
    /// Upstream intersection; `None` for entry links.
    pub from: Option<NodeId>,
    /// Downstream intersection; `None` for exit links.
    pub to: Option<NodeId>,
    pub kind: LinkKind,
    pub heading: Heading,
    pub length: f64,
    pub free_flow_speed: f64,
    pub lanes: LaneLayout,
}

impl Link {
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_flow_speed
    }

    pub fn is_internal(&self) -> bool {
        self.kind == LinkKind::Internal
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Zone {
    pub id: ZoneId,
    pub label: String,
    pub side: Side,
    pub node: NodeId,
    pub entry_link: LinkId,
    pub exit_link: LinkId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Meters.
    pub link_length: f64,
    /// Meters per second.
    pub free_flow_speed: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { rows: 2, cols: 2, link_length: 300.0, free_flow_speed: 12.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    rows: usize,
    cols: usize,
    links: Vec<Link>,
    zones: Vec<Zone>,
    internal_links: usize,
    /// `outgoing[node][heading]` is the link leaving `node` in that heading.
    outgoing: Vec<[Option<LinkId>; 4]>,
}

fn heading_slot(h: Heading) -> usize {
    match h {
        Heading::NS => 0,
        Heading::SN => 1,
        Heading::EW => 2,
        Heading::WE => 3,
    }
}

pub fn build_grid(rows: usize, cols: usize, link_length: f64, free_flow_speed: f64) -> Result<Network> {
    Network::build(&GridSpec { rows, cols, link_length, free_flow_speed })
}

impl Network {
    pub fn build(spec: &GridSpec) -> Result<Network> {
        if spec.rows == 0 || spec.cols == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {}x{}",
                spec.rows, spec.cols
            )));
        }
        if !(spec.link_length > 0.0 && spec.link_length.is_finite()) {
            return Err(Error::invalid(format!("link length must be positive, got {}", spec.link_length)));
        }
        if !(spec.free_flow_speed > 0.0 && spec.free_flow_speed.is_finite()) {
            return Err(Error::invalid(format!(
                "free-flow speed must be positive, got {}",
                spec.free_flow_speed
            )));
        }

        let (rows, cols) = (spec.rows, spec.cols);
        let nodes = rows * cols;
        let mut links = Vec::new();
        let mut outgoing = vec![[None; 4]; nodes];
        let mk = |id, from, to, kind, heading| Link {
            id,
            from,
            to,
            kind,
            heading,
            length: spec.link_length,
            free_flow_speed: spec.free_flow_speed,
            lanes: LaneLayout::default(),
        };

        for node in 0..nodes {
            let (r, c) = ((node / cols) as isize, (node % cols) as isize);
            for heading in Heading::ALL {
                let (dr, dc) = heading.step();
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let to = nr as usize * cols + nc as usize;
                let id = links.len();
                links.push(mk(id, Some(node), Some(to), LinkKind::Internal, heading));
                outgoing[node][heading_slot(heading)] = Some(id);
            }
        }
        let internal_links = links.len();

        let mut zones = Vec::new();
        let mut attach = |side: Side, index: usize, node: NodeId, links: &mut Vec<Link>| {
            let zone = zones.len();
            let entry = links.len();
            links.push(mk(entry, None, Some(node), LinkKind::Entry(zone), side.inbound()));
            let exit = links.len();
            links.push(mk(exit, Some(node), None, LinkKind::Exit(zone), side.outbound()));
            outgoing[node][heading_slot(side.outbound())] = Some(exit);
            zones.push(Zone {
                id: zone,
                label: format!("{}{}", side.letter(), index),
                side,
                node,
                entry_link: entry,
                exit_link: exit,
            });
        };
        for c in 0..cols {
            attach(Side::North, c, c, &mut links);
        }
        for r in 0..rows {
            attach(Side::East, r, r * cols + cols - 1, &mut links);
        }
        for c in 0..cols {
            attach(Side::South, c, (rows - 1) * cols + c, &mut links);
        }
        for r in 0..rows {
            attach(Side::West, r, r * cols, &mut links);
        }

        Ok(Network { rows, cols, links, zones, internal_links, outgoing })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// M: number of signalized intersections.
    pub fn intersection_count(&self) -> usize {
        self.rows * self.cols
    }

    /// L: number of internal (monitored) directed links.
    pub fn internal_link_count(&self) -> usize {
        self.internal_links
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn internal_links(&self) -> &[Link] {
        &self.links[..self.internal_links]
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn zone(&self, id: ZoneId) -> &Zone {
        &self.zones[id]
    }

    pub fn zone_by_label(&self, label: &str) -> Option<ZoneId> {
        self.zones.iter().find(|z| z.label == label).map(|z| z.id)
    }

    pub fn outgoing(&self, node: NodeId, heading: Heading) -> Option<LinkId> {
        self.outgoing[node][heading_slot(heading)]
    }

    /// Internal link from intersection `from` to adjacent intersection `to`.
    pub fn link_between(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        Heading::ALL
            .iter()
            .filter_map(|&h| self.outgoing(from, h))
            .find(|&l| self.links[l].to == Some(to))
    }

    /// Neighbouring intersections of `node`, ascending.
    fn neighbours(&self, node: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = Heading::ALL
            .iter()
            .filter_map(|&h| self.outgoing(node, h))
            .filter_map(|l| self.links[l].to)
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub links: Vec<LinkId>,
    /// `turns[k]` is the movement taken at the downstream intersection of
    /// `links[k]`; the final (exit) link has none.
    pub turns: Vec<Turn>,
}

impl Route {
    /// Movement recorded for a vehicle on hop `k`. Exit links have no
    /// downstream signal and are recorded as straight.
    pub fn movement(&self, hop: usize) -> Turn {
        self.turns.get(hop).copied().unwrap_or(Turn::Straight)
    }

    pub fn nodes(&self, network: &Network) -> Vec<NodeId> {
        self.links.iter().filter_map(|&l| network.link(l).to).collect()
    }
}

/// Minimum-hop route between two zones. Ties go to the lexicographically
/// smallest intersection sequence.
pub fn shortest_route(network: &Network, origin: ZoneId, destination: ZoneId) -> Result<Route> {
    if origin >= network.zones.len() || destination >= network.zones.len() {
        return Err(Error::invalid(format!("unknown zone {origin} or {destination}")));
    }
    if origin == destination {
        return Err(Error::invalid(format!(
            "origin and destination are the same zone ({})",
            network.zones[origin].label
        )));
    }
    let (o, d) = (&network.zones[origin], &network.zones[destination]);
    let no_route = || Error::NoRoute { origin: o.label.clone(), destination: d.label.clone() };

    // Hop distances to the destination intersection.
    let n = network.intersection_count();
    let mut dist = vec![usize::MAX; n];
    dist[d.node] = 0;
    let mut queue = VecDeque::from([d.node]);
    while let Some(v) = queue.pop_front() {
        for u in network.neighbours(v) {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    if dist[o.node] == usize::MAX {
        return Err(no_route());
    }

    let mut nodes = vec![o.node];
    let mut at = o.node;
    while at != d.node {
        at = network
            .neighbours(at)
            .into_iter()
            .find(|&u| dist[u] + 1 == dist[at])
            .ok_or_else(no_route)?;
        nodes.push(at);
    }

    let mut links = vec![o.entry_link];
    for w in nodes.windows(2) {
        links.push(network.link_between(w[0], w[1]).ok_or_else(no_route)?);
    }
    links.push(d.exit_link);

    let turns = links
        .windows(2)
        .map(|w| {
            network
                .link(w[0])
                .heading
                .turn_to(network.link(w[1]).heading)
                .ok_or_else(no_route)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Route { links, turns })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ODMatrix {
    /// Vehicles per hour between zone pairs.
    pub rates: BTreeMap<(ZoneId, ZoneId), f64>,
    /// Seconds.
    pub horizon: f64,
}

impl ODMatrix {
    pub fn new(horizon: f64) -> Self {
        ODMatrix { rates: BTreeMap::new(), horizon }
    }

    pub fn with_rate(mut self, origin: ZoneId, destination: ZoneId, veh_per_hour: f64) -> Self {
        self.rates.insert((origin, destination), veh_per_hour);
        self
    }

    pub fn validate(&self, network: &Network) -> Result<()> {
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("demand horizon must be non-negative, got {}", self.horizon)));
        }
        for (&(o, d), &rate) in &self.rates {
            if o >= network.zones.len() || d >= network.zones.len() {
                return Err(Error::invalid(format!("OD pair ({o}, {d}) references an unknown zone")));
            }
            if o == d {
                return Err(Error::invalid(format!("OD pair with identical zones ({})", network.zones[o].label)));
            }
            if !(rate >= 0.0 && rate.is_finite()) {
                return Err(Error::invalid(format!("OD rate must be non-negative, got {rate}")));
            }
        }
        Ok(())
    }

    /// Expected number of arrivals over the horizon.
    pub fn expected_total(&self) -> f64 {
        self.rates.values().sum::<f64>() * self.horizon / 3600.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub vehicle: VehicleId,
    pub route: Arc<Route>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrivalSchedule {
    pub arrivals: Vec<Arrival>,
}

impl ArrivalSchedule {
    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }
}

/// Poisson arrivals per OD pair, merged and sorted. Vehicle ids follow the
/// merged order.
pub fn generate_demand(network: &Network, od: &ODMatrix, seed: u64) -> Result<ArrivalSchedule> {
    od.validate(network)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<(f64, usize, Arc<Route>)> = Vec::new();

    for (pair_index, (&(o, d), &rate)) in od.rates.iter().enumerate() {
        if rate <= 0.0 {
            continue;
        }
        let route = Arc::new(shortest_route(network, o, d)?);
        let gap = Exp::new(rate / 3600.0).map_err(|e| Error::invalid(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= od.horizon {
                break;
            }
            raw.push((t, pair_index, route.clone()));
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let arrivals = raw
        .into_iter()
        .enumerate()
        .map(|(vehicle, (time, _, route))| Arrival { time, vehicle, route })
        .collect();
    Ok(ArrivalSchedule { arrivals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let net = build_grid(3, 3, 300.0, 12.5).unwrap();
        assert_eq!(net.intersection_count(), 9);
        assert_eq!(net.internal_link_count(), 24);
        assert_eq!(net.zones().len(), 12);

        let net = build_grid(1, 1, 300.0, 12.5).unwrap();
        assert_eq!(net.intersection_count(), 1);
        assert_eq!(net.internal_link_count(), 0);
        assert_eq!(net.zones().len(), 4);

        // 2x2 grid graph has 4 undirected edges.
        let net = build_grid(2, 2, 300.0, 12.5).unwrap();
        assert_eq!(net.intersection_count(), 4);
        assert_eq!(net.internal_link_count(), 8);
    }

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(matches!(build_grid(0, 3, 300.0, 12.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid(3, 0, 300.0, 12.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid(2, 2, 0.0, 12.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid(2, 2, 300.0, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn every_link_has_a_reverse() {
        let net = build_grid(3, 4, 300.0, 12.5).unwrap();
        for l in net.internal_links() {
            let (a, b) = (l.from.unwrap(), l.to.unwrap());
            let rev = net.link_between(b, a).expect("reverse link");
            assert_eq!(net.link(rev).heading.turn_to(l.heading), None);
        }
        for z in net.zones() {
            assert_eq!(net.link(z.entry_link).to, Some(z.node));
            assert_eq!(net.link(z.exit_link).from, Some(z.node));
        }
    }

    #[test]
    fn turns_follow_compass() {
        assert_eq!(Heading::NS.turn_to(Heading::WE), Some(Turn::Left));
        assert_eq!(Heading::NS.turn_to(Heading::EW), Some(Turn::Right));
        assert_eq!(Heading::SN.turn_to(Heading::WE), Some(Turn::Right));
        assert_eq!(Heading::WE.turn_to(Heading::WE), Some(Turn::Straight));
        assert_eq!(Heading::WE.turn_to(Heading::EW), None);
        for h in Heading::ALL {
            for t in Turn::ALL {
                assert_eq!(h.turn_to(h.after(t)), Some(t));
            }
        }
    }

    #[test]
    fn straight_route_across_a_row() {
        let net = build_grid(1, 3, 300.0, 12.5).unwrap();
        let w = net.zone_by_label("W0").unwrap();
        let e = net.zone_by_label("E0").unwrap();
        let route = shortest_route(&net, w, e).unwrap();
        assert_eq!(route.nodes(&net), vec![0, 1, 2]);
        assert_eq!(route.links.len(), 4);
        assert!(route.turns.iter().all(|&t| t == Turn::Straight));
    }

    #[test]
    fn same_zone_is_invalid() {
        let net = build_grid(2, 2, 300.0, 12.5).unwrap();
        assert!(matches!(shortest_route(&net, 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn equal_hop_tie_prefers_smaller_sequence() {
        // W0 (node 0) to S1 (node 3): candidates 0-1-3 and 0-2-3.
        let net = build_grid(2, 2, 300.0, 12.5).unwrap();
        let route = shortest_route(
            &net,
            net.zone_by_label("W0").unwrap(),
            net.zone_by_label("S1").unwrap(),
        )
        .unwrap();
        let mut candidates = vec![vec![0, 1, 3], vec![0, 2, 3]];
        candidates.sort();
        assert_eq!(route.nodes(&net), candidates[0]);
        assert_eq!(route.turns, vec![Turn::Straight, Turn::Right, Turn::Straight]);
    }

    #[test]
    fn zero_rates_give_empty_schedule() {
        let net = build_grid(2, 2, 300.0, 12.5).unwrap();
        let od = ODMatrix::new(3600.0).with_rate(0, 5, 0.0);
        assert!(generate_demand(&net, &od, 7).unwrap().is_empty());
    }

    #[test]
    fn demand_is_seeded() {
        let net = build_grid(2, 2, 300.0, 12.5).unwrap();
        let od = ODMatrix::new(3600.0).with_rate(0, 5, 400.0).with_rate(7, 2, 200.0);
        let a = generate_demand(&net, &od, 11).unwrap();
        let b = generate_demand(&net, &od, 11).unwrap();
        let c = generate_demand(&net, &od, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.arrivals.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(a.arrivals.iter().enumerate().all(|(i, x)| x.vehicle == i && x.time < 3600.0));
    }

    #[test]
    fn invalid_od_rejected() {
        let net = build_grid(1, 1, 300.0, 12.5).unwrap();
        assert!(generate_demand(&net, &ODMatrix::new(10.0).with_rate(0, 99, 1.0), 0).is_err());
        assert!(generate_demand(&net, &ODMatrix::new(10.0).with_rate(0, 1, -1.0), 0).is_err());
        assert!(generate_demand(&net, &ODMatrix::new(10.0).with_rate(2, 2, 1.0), 0).is_err());
    }
}
