//! Exact minimum-delay routing on small frozen instances, and policy
//! evaluation against it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::channel::allocate_bandwidth;
use crate::env::{ActionSet, DemandSpec, Env, EnvConfig, Links, Policy};
use crate::error::{Error, Result};
use crate::topology::{NodeId, NodeKind, Topology};
use crate::traffic::{DemandId, DemandState, LinkSource};

pub const MAX_UAVS: usize = 8;
pub const MAX_DEMANDS: usize = 3;
pub const MAX_HORIZON: usize = 10;

/// A frozen instance: static topology, no ledger, demands placed at step 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: EnvConfig,
    pub horizon: usize,
}

impl Snapshot {
    /// Freezes `config`: mobility and the ledger are switched off and the
    /// episode length is set to the horizon.
    pub fn new(mut config: EnvConfig, demands: Vec<DemandSpec>, horizon: usize) -> Result<Self> {
        config.topology.max_speed_mps = 0.0;
        config.ledger.enabled = false;
        config.load = None;
        config.demands = demands;
        config.steps_per_episode = horizon as u64;
        let s = Snapshot { config, horizon };
        s.check_size()?;
        Ok(s)
    }

    pub fn demands(&self) -> &[DemandSpec] {
        &self.config.demands
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::from_config(&self.config.topology)
    }

    pub fn env(&self) -> Result<Env> {
        Env::new(self.config.clone(), 0)
    }

    fn check_size(&self) -> Result<()> {
        let topo = self.topology()?;
        let uavs = topo.uavs().count();
        if uavs > MAX_UAVS || self.demands().len() > MAX_DEMANDS || self.horizon > MAX_HORIZON {
            return Err(Error::InstanceTooLarge(format!(
                "{uavs} UAVs, {} demands, horizon {} (limits {MAX_UAVS}, {MAX_DEMANDS}, {MAX_HORIZON})",
                self.demands().len(),
                self.horizon
            )));
        }
        if self.demands().is_empty() {
            return Err(Error::Config("snapshot has no demands".into()));
        }
        Ok(())
    }
}

/// An optimal routing: per step, the next hop of every demand that moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: Vec<BTreeMap<DemandId, NodeId>>,
    /// Node sequence of each demand, source first.
    pub paths: Vec<Vec<NodeId>>,
    /// End-to-end delay of each demand.
    pub delays: Vec<f64>,
    /// Sum of `delays` in demand order.
    pub total_delay_s: f64,
    /// The search's own optimum, accumulated backwards; equal to
    /// `total_delay_s` up to rounding.
    pub search_delay_s: f64,
    pub states_explored: usize,
}

type Positions = Vec<Option<NodeId>>;

struct Model<'a> {
    topo: &'a Topology,
    links: Links<'a>,
    demands: Vec<(NodeId, NodeId, f64)>,
    k_max: usize,
    base_stations: Vec<NodeId>,
    capacity: usize,
    horizon: usize,
    memo: HashMap<(Positions, usize), (f64, Option<Positions>)>,
}

impl Model<'_> {
    /// Next-hop options of demand `d` at `at`, mirroring the environment:
    /// sensor devices use the fixed uplink, UAVs pick among their first
    /// `k_max` neighbors or the destination when it is in range. An empty
    /// list means the demand holds.
    fn options(&self, d: usize, at: NodeId) -> Vec<NodeId> {
        let node = self.topo.node(at).expect("known node");
        match node.kind {
            NodeKind::SensorDevice => self.topo.uplink_target(at).into_iter().collect(),
            NodeKind::Uav => {
                let mut out: Vec<NodeId> = self
                    .topo
                    .neighbors(at)
                    .map(|n| n.into_iter().take(self.k_max).collect())
                    .unwrap_or_default();
                let dest = self.demands[d].1;
                let in_range = self.topo.reachable_bs(at).map(|b| b.contains(&dest)).unwrap_or(false);
                if in_range && self.base_stations.contains(&dest) {
                    out.push(dest);
                }
                out.sort();
                out
            }
            NodeKind::BaseStation => Vec::new(),
        }
    }

    /// Per-demand hop delays of one joint move, with the bandwidth of each
    /// sender split over the demands it sends.
    fn step_delays(&self, pos: &Positions, moves: &[Option<NodeId>]) -> Option<Vec<f64>> {
        let mut by_sender: BTreeMap<NodeId, Vec<(u64, f64)>> = BTreeMap::new();
        for (d, m) in moves.iter().enumerate() {
            if m.is_some() {
                by_sender
                    .entry(pos[d].expect("moving demand is queued"))
                    .or_default()
                    .push((d as u64, self.demands[d].2));
            }
        }
        let mut delays = vec![0.0; moves.len()];
        for (from, sizes) in by_sender {
            let shares = allocate_bandwidth(&sizes, self.links.bandwidth_hz(from));
            for &(d, size) in &sizes {
                let to = moves[d as usize].expect("moving");
                let q = self.links.quality(from, to)?;
                let rate = shares[&d] * q.spectral_efficiency;
                if !(rate > 0.0) {
                    return None;
                }
                delays[d as usize] = size / rate;
            }
        }
        Some(delays)
    }

    fn next_positions(&self, pos: &Positions, moves: &[Option<NodeId>]) -> Option<Positions> {
        let mut next = pos.clone();
        let mut load: BTreeMap<NodeId, usize> = BTreeMap::new();
        for d in 0..pos.len() {
            if let Some(to) = moves[d] {
                next[d] = if to == self.demands[d].1 { None } else { Some(to) };
            }
            if let Some(at) = next[d] {
                *load.entry(at).or_default() += 1;
            }
        }
        if load.values().any(|&n| n > self.capacity) {
            return None;
        }
        Some(next)
    }

    /// Every joint move in lexicographic order of target ids.
    fn joint_moves(&self, pos: &Positions) -> Vec<Vec<Option<NodeId>>> {
        let mut all: Vec<Vec<Option<NodeId>>> = vec![Vec::new()];
        for (d, p) in pos.iter().enumerate() {
            let opts: Vec<Option<NodeId>> = match p {
                None => vec![None],
                Some(at) => {
                    let o = self.options(d, *at);
                    if o.is_empty() {
                        vec![None]
                    } else {
                        o.into_iter().map(Some).collect()
                    }
                }
            };
            all = all
                .into_iter()
                .flat_map(|prefix| {
                    opts.iter().map(move |&o| {
                        let mut v = prefix.clone();
                        v.push(o);
                        v
                    })
                })
                .collect();
        }
        all
    }

    /// Minimum delay to deliver everything from `pos` with `t` steps used.
    fn best(&mut self, pos: &Positions, t: usize) -> f64 {
        if pos.iter().all(Option::is_none) {
            return 0.0;
        }
        if t == self.horizon {
            return f64::INFINITY;
        }
        if let Some(&(c, _)) = self.memo.get(&(pos.clone(), t)) {
            return c;
        }
        let mut best = (f64::INFINITY, None);
        for moves in self.joint_moves(pos) {
            let Some(delays) = self.step_delays(pos, &moves) else { continue };
            let Some(next) = self.next_positions(pos, &moves) else { continue };
            let c = delays.iter().sum::<f64>() + self.best(&next, t + 1);
            // Earlier candidates are lexicographically smaller; a later one
            // must be better by more than rounding to replace them.
            if c < best.0 && (best.0 == f64::INFINITY || c < best.0 - 1e-12 * best.0) {
                best = (c, Some(moves));
            }
        }
        self.memo.insert((pos.clone(), t), best.clone());
        best.0
    }
}

/// Exhaustive minimum total end-to-end delay routing of `s`.
pub fn solve_exact(s: &Snapshot) -> Result<Solution> {
    s.check_size()?;
    let topo = s.topology()?;
    let base_stations: Vec<NodeId> = topo.ids_of(NodeKind::BaseStation).take(s.config.b_max).collect();
    let mut m = Model {
        topo: &topo,
        links: Links {
            topo: &topo,
            channel: &s.config.channel,
        },
        demands: s
            .demands()
            .iter()
            .map(|d| (d.source, d.destination, d.size_bits))
            .collect(),
        k_max: s.config.k_max,
        base_stations,
        capacity: s.config.traffic.queue_capacity,
        horizon: s.horizon,
        memo: HashMap::new(),
    };
    for d in s.demands() {
        if topo.node(d.source).map(|n| n.kind) != Some(NodeKind::SensorDevice)
            || topo.node(d.destination).map(|n| n.kind) != Some(NodeKind::BaseStation)
        {
            return Err(Error::Config("demands must run from a sensor device to a base station".into()));
        }
    }
    let start: Positions = m.demands.iter().map(|d| Some(d.0)).collect();
    let search = m.best(&start, 0);
    if !search.is_finite() {
        return Err(Error::Infeasible(s.horizon));
    }

    let n = m.demands.len();
    let mut pos = start;
    let mut plan = Vec::new();
    let mut paths: Vec<Vec<NodeId>> = m.demands.iter().map(|d| vec![d.0]).collect();
    let mut delays = vec![0.0; n];
    let mut t = 0;
    while pos.iter().any(Option::is_some) {
        let moves = m.memo[&(pos.clone(), t)].1.clone().expect("finite state has a move");
        let hop = m.step_delays(&pos, &moves).expect("feasible move");
        let mut step_plan = BTreeMap::new();
        for d in 0..n {
            if let Some(to) = moves[d] {
                step_plan.insert(d as DemandId, to);
                paths[d].push(to);
                delays[d] += hop[d];
            }
        }
        plan.push(step_plan);
        pos = m.next_positions(&pos, &moves).expect("feasible move");
        t += 1;
    }
    let total_delay_s = delays.iter().sum();
    Ok(Solution {
        plan,
        paths,
        delays,
        total_delay_s,
        search_delay_s: search,
        states_explored: m.memo.len(),
    })
}

/// Follows an oracle plan step by step.
pub struct OraclePolicy {
    plan: Vec<BTreeMap<DemandId, NodeId>>,
}

impl OraclePolicy {
    pub fn new(solution: &Solution) -> Self {
        OraclePolicy {
            plan: solution.plan.clone(),
        }
    }
}

impl Policy for OraclePolicy {
    fn choose(&mut self, env: &Env, agent: NodeId, demand: DemandId, _: &[f64], actions: &ActionSet) -> Result<usize> {
        let want = self
            .plan
            .get(env.current_step() as usize)
            .and_then(|p| p.get(&demand))
            .ok_or_else(|| Error::IllegalAction(format!("plan has no move for demand {demand} at {agent}")))?;
        actions
            .targets
            .iter()
            .position(|t| *t == Some(*want))
            .ok_or_else(|| Error::IllegalAction(format!("planned hop {want} is not a slot at {agent}")))
    }
}

/// One greedy run of a policy on a snapshot, compared with the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Total end-to-end delay; infinite when a demand was not delivered.
    pub policy_delay_s: f64,
    pub oracle_delay_s: f64,
    pub gap: f64,
    pub demands: usize,
    /// Demands whose path is one of the oracle's, or all demands of a run
    /// whose total delay ties the optimum.
    pub optimal_demands: usize,
    pub paths: Vec<Vec<NodeId>>,
}

/// Runs `policy` once on `s` and scores it against `solution`.
pub fn evaluate<P: Policy + ?Sized>(policy: &mut P, s: &Snapshot, solution: &Solution) -> Result<Evaluation> {
    let mut env = s.env()?;
    let m = env.run_episode(0, policy)?;
    let n = s.demands().len();
    let mut paths = Vec::with_capacity(n);
    for id in 0..n as DemandId {
        let d = env.traffic().demand(id).expect("snapshot demand");
        let mut p = vec![d.source];
        p.extend(d.path.iter().map(|h| h.to));
        paths.push(p);
    }
    let all_delivered = m.delivered as usize == n;
    let policy_delay_s = if all_delivered { m.total_delay_s } else { f64::INFINITY };
    let ties = all_delivered && (policy_delay_s - solution.total_delay_s).abs() <= 1e-9 * solution.total_delay_s;
    let optimal_demands = if ties {
        n
    } else {
        (0..n)
            .filter(|&i| {
                let d = env.traffic().demand(i as DemandId).expect("snapshot demand");
                matches!(d.state, DemandState::Delivered(_)) && paths[i] == solution.paths[i]
            })
            .count()
    };
    Ok(Evaluation {
        policy_delay_s,
        oracle_delay_s: solution.total_delay_s,
        gap: policy_delay_s / solution.total_delay_s,
        demands: n,
        optimal_demands,
        paths,
    })
}

/// Mean policy delay over `episodes` runs divided by the oracle delay.
pub fn policy_gap<P: Policy + ?Sized>(policy: &mut P, s: &Snapshot, episodes: usize) -> Result<f64> {
    let solution = solve_exact(s)?;
    let mut total = 0.0;
    for _ in 0..episodes.max(1) {
        total += evaluate(policy, s, &solution)?.policy_delay_s;
    }
    Ok(total / episodes.max(1) as f64 / solution.total_delay_s)
}
