//! Demand lifecycle, bounded node queues and parallel per-step forwarding.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::{allocate_bandwidth, LinkQuality};
use crate::error::{Error, Result};
use crate::topology::NodeId;

pub type DemandId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    /// Probability that a sensor device emits a demand in a step.
    pub demand_probability: f64,
    pub size_min_bits: f64,
    pub size_max_bits: f64,
    pub max_delay_s: f64,
    /// Demands still queued this many steps after birth expire.
    pub max_age_steps: u64,
    pub queue_capacity: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            demand_probability: 0.3,
            size_min_bits: 400e3,
            size_max_bits: 600e3,
            max_delay_s: 2.0,
            max_age_steps: 40,
            queue_capacity: 50,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.demand_probability) {
            return Err(Error::Config("traffic: demand_probability must be in [0, 1]".into()));
        }
        if !(self.size_min_bits > 0.0 && self.size_max_bits >= self.size_min_bits) {
            return Err(Error::Config("traffic: need 0 < size_min <= size_max".into()));
        }
        if !(self.max_delay_s > 0.0) || self.max_age_steps == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("traffic: limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemandState {
    Queued(NodeId),
    /// Between leaving one queue and joining the next inside a step.
    InFlight,
    Delivered(u64),
    Expired(u64),
    Dropped(u64),
}

impl DemandState {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            DemandState::Delivered(_) | DemandState::Expired(_) | DemandState::Dropped(_)
        )
    }

    fn label(&self) -> &'static str {
        match self {
            DemandState::Queued(_) => "queued",
            DemandState::InFlight => "in_flight",
            DemandState::Delivered(_) => "delivered",
            DemandState::Expired(_) => "expired",
            DemandState::Dropped(_) => "dropped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub step: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub delay_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub id: DemandId,
    pub source: NodeId,
    pub destination: NodeId,
    pub size_bits: f64,
    pub max_delay_s: f64,
    pub born_step: u64,
    pub state: DemandState,
    pub accumulated_delay_s: f64,
    pub hop_count: u32,
    pub path: Vec<PathEntry>,
}

impl Demand {
    pub fn location(&self) -> Option<NodeId> {
        match self.state {
            DemandState::Queued(n) => Some(n),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeQueue {
    pub demands: Vec<DemandId>,
    pub capacity: usize,
    /// Arrivals accepted during the last forwarding step.
    pub received: usize,
    /// Departures during the last forwarding step.
    pub transmitted: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub expired: u64,
    /// Demands moved off a departing node outside normal forwarding.
    pub evacuated: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HopOutcome {
    Arrived,
    Delivered,
    Dropped,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub demand: DemandId,
    pub step: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth_hz: f64,
    pub rate_bps: f64,
    pub delay_s: f64,
    pub outcome: HopOutcome,
}

/// Outcome of placing a demand into a queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Enqueue {
    Accepted,
    Dropped,
}

/// Channel view used by [`Traffic::forward_all`].
pub trait LinkSource {
    /// Quality of the directed link, or `None` if it does not exist this step.
    fn quality(&self, from: NodeId, to: NodeId) -> Option<LinkQuality>;
    fn bandwidth_hz(&self, node: NodeId) -> f64;
    fn is_base_station(&self, node: NodeId) -> bool;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub step: u64,
    pub generated: u64,
    pub queued: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub expired: u64,
}

/// All demands and node queues of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    demands: BTreeMap<DemandId, Demand>,
    queues: BTreeMap<NodeId, NodeQueue>,
    default_capacity: usize,
    next_id: DemandId,
    totals: TrafficCounters,
    step_counts: TrafficCounters,
    queued_at_step_start: u64,
}

impl Traffic {
    pub fn new(default_capacity: usize) -> Self {
        Traffic {
            default_capacity,
            ..Traffic::default()
        }
    }

    pub fn set_capacity(&mut self, node: NodeId, capacity: usize) {
        self.queue_mut(node).capacity = capacity;
    }

    fn queue_mut(&mut self, node: NodeId) -> &mut NodeQueue {
        let cap = self.default_capacity;
        self.queues.entry(node).or_insert_with(|| NodeQueue {
            capacity: cap,
            ..NodeQueue::default()
        })
    }

    pub fn queue(&self, node: NodeId) -> &[DemandId] {
        self.queues.get(&node).map_or(&[], |q| q.demands.as_slice())
    }

    pub fn node_queue(&self, node: NodeId) -> Option<&NodeQueue> {
        self.queues.get(&node)
    }

    pub fn capacity(&self, node: NodeId) -> usize {
        self.queues.get(&node).map_or(self.default_capacity, |q| q.capacity)
    }

    pub fn demand(&self, id: DemandId) -> Option<&Demand> {
        self.demands.get(&id)
    }

    pub fn demands(&self) -> impl Iterator<Item = &Demand> {
        self.demands.values()
    }

    pub fn totals(&self) -> TrafficCounters {
        self.totals
    }

    pub fn step_counts(&self) -> TrafficCounters {
        self.step_counts
    }

    pub fn queued_count(&self) -> u64 {
        self.queues.values().map(|q| q.demands.len() as u64).sum()
    }

    /// Marks the start of a simulation step for the per-step audit.
    pub fn begin_step(&mut self) {
        self.step_counts = TrafficCounters::default();
        self.queued_at_step_start = self.queued_count();
    }

    /// Creates a demand queued at its source, counting it as generated.
    pub fn inject(
        &mut self,
        source: NodeId,
        destination: NodeId,
        size_bits: f64,
        max_delay_s: f64,
        step: u64,
    ) -> (DemandId, Enqueue) {
        let id = self.next_id;
        self.next_id += 1;
        self.demands.insert(
            id,
            Demand {
                id,
                source,
                destination,
                size_bits,
                max_delay_s,
                born_step: step,
                state: DemandState::InFlight,
                accumulated_delay_s: 0.0,
                hop_count: 0,
                path: Vec::new(),
            },
        );
        self.totals.generated += 1;
        self.step_counts.generated += 1;
        let outcome = self.enqueue(source, id, step).expect("fresh demand is unqueued");
        (id, outcome)
    }

    /// Appends an in-flight demand to `node`'s queue, or drops it when full.
    pub fn enqueue(&mut self, node: NodeId, id: DemandId, step: u64) -> Result<Enqueue> {
        let state = self
            .demands
            .get(&id)
            .map(|d| d.state)
            .ok_or_else(|| Error::IllegalAction(format!("unknown demand {id}")))?;
        if state != DemandState::InFlight {
            return Err(Error::IllegalAction(format!(
                "demand {id} is not in flight ({state:?})"
            )));
        }
        let q = self.queue_mut(node);
        if q.demands.len() >= q.capacity {
            self.finish(id, DemandState::Dropped(step));
            return Ok(Enqueue::Dropped);
        }
        q.demands.push(id);
        self.demands.get_mut(&id).unwrap().state = DemandState::Queued(node);
        Ok(Enqueue::Accepted)
    }

    fn detach(&mut self, id: DemandId) {
        if let Some(DemandState::Queued(n)) = self.demands.get(&id).map(|d| d.state) {
            if let Some(q) = self.queues.get_mut(&n) {
                q.demands.retain(|&d| d != id);
            }
            self.demands.get_mut(&id).unwrap().state = DemandState::InFlight;
        }
    }

    fn finish(&mut self, id: DemandId, state: DemandState) {
        self.detach(id);
        self.demands.get_mut(&id).unwrap().state = state;
        let (t, s) = (&mut self.totals, &mut self.step_counts);
        match state {
            DemandState::Delivered(_) => {
                t.delivered += 1;
                s.delivered += 1;
            }
            DemandState::Dropped(_) => {
                t.dropped += 1;
                s.dropped += 1;
            }
            DemandState::Expired(_) => {
                t.expired += 1;
                s.expired += 1;
            }
            _ => unreachable!("finish with non-terminal state"),
        }
    }

    /// Moves every demand that has a decision one hop. Bandwidth of each
    /// sending node is split across its departing demands in proportion to
    /// their sizes; arrivals are processed in ascending demand id so capacity
    /// races resolve deterministically. Demands without a decision stay put.
    pub fn forward_all<L: LinkSource>(
        &mut self,
        decisions: &BTreeMap<DemandId, NodeId>,
        links: &L,
        step: u64,
    ) -> Result<Vec<HopRecord>> {
        let mut by_node: BTreeMap<NodeId, Vec<(DemandId, NodeId)>> = BTreeMap::new();
        for (&id, &to) in decisions {
            let d = self
                .demands
                .get(&id)
                .ok_or_else(|| Error::IllegalAction(format!("unknown demand {id}")))?;
            let from = d.location().ok_or_else(|| {
                Error::IllegalAction(format!("demand {id} is not queued ({:?})", d.state))
            })?;
            if links.quality(from, to).is_none() {
                return Err(Error::IllegalAction(format!(
                    "demand {id}: no link {from} -> {to}"
                )));
            }
            if links.is_base_station(to) && to != d.destination {
                return Err(Error::IllegalAction(format!(
                    "demand {id}: {to} is not its destination"
                )));
            }
            by_node.entry(from).or_default().push((id, to));
        }

        for q in self.queues.values_mut() {
            q.received = 0;
            q.transmitted = 0;
        }

        let mut hops = Vec::with_capacity(decisions.len());
        for (&from, moves) in &by_node {
            let sizes: Vec<(DemandId, f64)> =
                moves.iter().map(|&(id, _)| (id, self.demands[&id].size_bits)).collect();
            let shares = allocate_bandwidth(&sizes, links.bandwidth_hz(from));
            for &(id, to) in moves {
                let q = links.quality(from, to).expect("checked above");
                let bw = shares[&id];
                let rate = bw * q.spectral_efficiency;
                if !(rate > 0.0) {
                    return Err(Error::ZeroRate { from, to });
                }
                hops.push(HopRecord {
                    demand: id,
                    step,
                    from,
                    to,
                    bandwidth_hz: bw,
                    rate_bps: rate,
                    delay_s: self.demands[&id].size_bits / rate,
                    outcome: HopOutcome::Arrived,
                });
            }
            self.queue_mut(from).transmitted = moves.len();
        }

        for h in &hops {
            self.detach(h.demand);
        }
        hops.sort_by_key(|h| h.demand);
        for h in &mut hops {
            let d = self.demands.get_mut(&h.demand).unwrap();
            d.accumulated_delay_s += h.delay_s;
            d.hop_count += 1;
            d.path.push(PathEntry {
                step,
                from: h.from,
                to: h.to,
                delay_s: h.delay_s,
            });
            let (late, dest) = (d.accumulated_delay_s > d.max_delay_s, d.destination);
            h.outcome = if late {
                self.finish(h.demand, DemandState::Expired(step));
                HopOutcome::Expired
            } else if h.to == dest {
                self.finish(h.demand, DemandState::Delivered(step));
                HopOutcome::Delivered
            } else {
                match self.enqueue(h.to, h.demand, step)? {
                    Enqueue::Accepted => {
                        self.queue_mut(h.to).received += 1;
                        HopOutcome::Arrived
                    }
                    Enqueue::Dropped => HopOutcome::Dropped,
                }
            };
        }
        Ok(hops)
    }

    /// Expires queued demands whose age has reached `max_age_steps`.
    pub fn expire_stale(&mut self, step: u64, max_age_steps: u64) -> Vec<(DemandId, NodeId)> {
        let stale: Vec<(DemandId, NodeId)> = self
            .demands
            .values()
            .filter_map(|d| match d.state {
                DemandState::Queued(n) if step.saturating_sub(d.born_step) >= max_age_steps => {
                    Some((d.id, n))
                }
                _ => None,
            })
            .collect();
        for &(id, _) in &stale {
            self.finish(id, DemandState::Expired(step));
        }
        stale
    }

    /// Moves a queued demand to `to` without transmission (membership
    /// churn); dropped when `to` is `None` or full.
    pub fn relocate(&mut self, id: DemandId, to: Option<NodeId>, step: u64) -> Result<Enqueue> {
        if self.demands.get(&id).and_then(Demand::location).is_none() {
            return Err(Error::IllegalAction(format!("demand {id} is not queued")));
        }
        self.detach(id);
        self.totals.evacuated += 1;
        self.step_counts.evacuated += 1;
        match to {
            Some(n) => self.enqueue(n, id, step),
            None => {
                self.finish(id, DemandState::Dropped(step));
                Ok(Enqueue::Dropped)
            }
        }
    }

    /// Checks `generated = queued + delivered + dropped + expired` both
    /// cumulatively and for the current step, plus the queue/state
    /// bookkeeping and the per-demand delay identity.
    pub fn conservation_audit(&self, step: u64) -> Result<AuditReport> {
        let fail = |detail: String| Err(Error::ConservationViolation { step, detail });
        let mut by_state = [0u64; 4];
        for d in self.demands.values() {
            match d.state {
                DemandState::Queued(n) => {
                    let hits = self.queues.get(&n).map_or(0, |q| {
                        q.demands.iter().filter(|&&x| x == d.id).count()
                    });
                    if hits != 1 {
                        return fail(format!("demand {} listed {hits} times at {n}", d.id));
                    }
                    by_state[0] += 1;
                }
                DemandState::Delivered(_) => {
                    by_state[1] += 1;
                    let sum: f64 = d.path.iter().map(|p| p.delay_s).sum();
                    if sum != d.accumulated_delay_s || d.path.last().map(|p| p.to) != Some(d.destination) {
                        return fail(format!("delivered demand {} has inconsistent path", d.id));
                    }
                }
                DemandState::Dropped(_) => by_state[2] += 1,
                DemandState::Expired(_) => by_state[3] += 1,
                DemandState::InFlight => return fail(format!("demand {} left in flight", d.id)),
            }
        }
        let queued = self.queued_count();
        if queued != by_state[0] {
            return fail(format!("queues hold {queued}, states say {}", by_state[0]));
        }
        for (n, q) in &self.queues {
            if q.demands.len() > q.capacity {
                return fail(format!("queue {n} over capacity"));
            }
        }
        let t = self.totals;
        if (t.delivered, t.dropped, t.expired) != (by_state[1], by_state[2], by_state[3]) {
            return fail("terminal counters disagree with demand states".into());
        }
        if t.generated != queued + t.delivered + t.dropped + t.expired {
            return fail(format!(
                "generated {} != queued {queued} + delivered {} + dropped {} + expired {}",
                t.generated, t.delivered, t.dropped, t.expired
            ));
        }
        let s = self.step_counts;
        if self.queued_at_step_start + s.generated != queued + s.delivered + s.dropped + s.expired {
            return fail("per-step balance does not close".into());
        }
        Ok(AuditReport {
            step,
            generated: t.generated,
            queued,
            delivered: t.delivered,
            dropped: t.dropped,
            expired: t.expired,
        })
    }

    /// Writes `step,demand,state,delay,hops` for every demand.
    pub fn write_demand_csv<W: Write>(&self, mut w: W, step: u64, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "step,demand,state,delay,hops")?;
        }
        for d in self.demands.values() {
            writeln!(
                w,
                "{step},{},{},{:.9},{}",
                d.id,
                d.state.label(),
                d.accumulated_delay_s,
                d.hop_count
            )?;
        }
        Ok(())
    }
}
