//! Nodes, clusters, positions, mobility and the communication graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable node identity; doubles as the index into [`Topology::nodes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    SensorDevice,
    Uav,
    BaseStation,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::SensorDevice => "sd",
            NodeKind::Uav => "uav",
            NodeKind::BaseStation => "bs",
        }
    }
}

/// Role partition of the UAV swarm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cluster {
    Collection,
    Relay,
    Downlink,
}

impl Cluster {
    pub const ALL: [Cluster; 3] = [Cluster::Collection, Cluster::Relay, Cluster::Downlink];

    /// Horizontal band, as fractions of the area length, that UAVs of this
    /// cluster are placed in and kept inside of.
    fn x_band(self) -> (f64, f64) {
        match self {
            Cluster::Collection => (0.05, 0.40),
            Cluster::Relay => (0.30, 0.70),
            Cluster::Downlink => (0.60, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// `Some` exactly for UAVs.
    pub cluster: Option<Cluster>,
    pub position: Vec3,
    /// Abstract energy and compute score used for cluster-head selection.
    pub capability: f64,
    /// Joined and authenticated.
    pub active: bool,
}

impl Node {
    pub fn is_uav(&self) -> bool {
        self.kind == NodeKind::Uav
    }
}

/// Euclidean distance between two positions.
pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn horizontal_distance(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Explicit node placement, used for frozen instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub kind: NodeKind,
    #[serde(default)]
    pub cluster: Option<Cluster>,
    pub position: Vec3,
    #[serde(default = "default_capability")]
    pub capability: f64,
}

fn default_capability() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub area_x_m: f64,
    pub area_y_m: f64,
    pub altitude_min_m: f64,
    pub altitude_max_m: f64,
    /// Minimum UAV separation.
    pub d_min_m: f64,
    /// Maximum UAV-to-UAV communication distance.
    pub d_max_m: f64,
    /// Maximum ground-to-air distance (SD uplink and BS downlink).
    pub ground_range_m: f64,
    pub collection_uavs: usize,
    pub relay_uavs: usize,
    pub downlink_uavs: usize,
    pub sensor_devices: usize,
    pub base_stations: usize,
    pub max_speed_mps: f64,
    pub step_duration_s: f64,
    pub seed: u64,
    /// When present, overrides the random placement entirely.
    pub nodes: Option<Vec<NodeSpec>>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            area_x_m: 1_500.0,
            area_y_m: 500.0,
            altitude_min_m: 200.0,
            altitude_max_m: 400.0,
            d_min_m: 10.0,
            d_max_m: 350.0,
            ground_range_m: 600.0,
            collection_uavs: 4,
            relay_uavs: 4,
            downlink_uavs: 4,
            sensor_devices: 3,
            base_stations: 2,
            max_speed_mps: 10.0,
            step_duration_s: 1.0,
            seed: 7,
            nodes: None,
        }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("topology: {m}")));
        if !(self.area_x_m > 0.0 && self.area_y_m > 0.0) {
            return bad("area must be positive");
        }
        if !(self.altitude_min_m > 0.0 && self.altitude_max_m >= self.altitude_min_m) {
            return bad("altitude band must satisfy 0 < min <= max");
        }
        if !(self.d_min_m >= 0.0 && self.d_max_m > self.d_min_m) {
            return bad("need 0 <= d_min < d_max");
        }
        if self.ground_range_m <= 0.0 || self.max_speed_mps < 0.0 || self.step_duration_s <= 0.0 {
            return bad("ground range and step duration must be positive, speed non-negative");
        }
        if let Some(nodes) = &self.nodes {
            for n in nodes {
                if (n.kind == NodeKind::Uav) != n.cluster.is_some() {
                    return bad("cluster must be set exactly for UAVs");
                }
            }
        }
        Ok(())
    }
}

/// The network graph at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub time_step: u64,
    pub d_min: f64,
    pub d_max_per_uav: BTreeMap<NodeId, f64>,
    pub ground_range: f64,
    pub comm_links: BTreeSet<(NodeId, NodeId)>,
    area: [f64; 2],
    altitude: [f64; 2],
    max_step_m: f64,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 256;
const MAX_TOPOLOGY_ATTEMPTS: usize = 64;
const MOVE_RESAMPLES: usize = 8;

impl Topology {
    /// Builds the topology described by `cfg`: explicit nodes when given,
    /// otherwise a seeded random placement that is retried until every SD
    /// can reach every BS.
    pub fn from_config(cfg: &TopologyConfig) -> Result<Topology> {
        cfg.validate()?;
        if let Some(specs) = &cfg.nodes {
            let nodes = specs
                .iter()
                .enumerate()
                .map(|(i, s)| Node {
                    id: NodeId(i as u32),
                    kind: s.kind,
                    cluster: s.cluster,
                    position: s.position,
                    capability: s.capability,
                    active: true,
                })
                .collect();
            let topo = Topology::assemble(cfg, nodes);
            topo.check_invariants().map_err(Error::Config)?;
            return Ok(topo);
        }
        for attempt in 0..MAX_TOPOLOGY_ATTEMPTS as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
            if let Some(nodes) = random_nodes(cfg, &mut rng) {
                let topo = Topology::assemble(cfg, nodes);
                if topo.all_pairs_connected() {
                    return Ok(topo);
                }
            }
        }
        Err(Error::Config(
            "could not place a connected topology; increase d_max or UAV counts".into(),
        ))
    }

    fn assemble(cfg: &TopologyConfig, nodes: Vec<Node>) -> Topology {
        let d_max_per_uav = nodes
            .iter()
            .filter(|n| n.is_uav())
            .map(|n| (n.id, cfg.d_max_m))
            .collect();
        let mut topo = Topology {
            nodes,
            time_step: 0,
            d_min: cfg.d_min_m,
            d_max_per_uav,
            ground_range: cfg.ground_range_m,
            comm_links: BTreeSet::new(),
            area: [cfg.area_x_m, cfg.area_y_m],
            altitude: [cfg.altitude_min_m, cfg.altitude_max_m],
            max_step_m: cfg.max_speed_mps * cfg.step_duration_s,
        };
        topo.rebuild_links();
        topo
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.index())
    }

    pub fn position(&self, id: NodeId) -> Vec3 {
        self.nodes[id.index()].position
    }

    pub fn dist(&self, a: NodeId, b: NodeId) -> f64 {
        distance(&self.position(a), &self.position(b))
    }

    pub fn ids_of(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(move |n| n.kind == kind).map(|n| n.id)
    }

    pub fn uavs(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.iter().filter(|n| n.is_uav())
    }

    pub fn active_uavs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.uavs().filter(|n| n.active).map(|n| n.id)
    }

    pub fn d_max(&self, u: NodeId) -> f64 {
        self.d_max_per_uav.get(&u).copied().unwrap_or(0.0)
    }

    fn active_uav(&self, u: NodeId) -> Result<&Node> {
        match self.node(u) {
            Some(n) if n.is_uav() && n.active => Ok(n),
            _ => Err(Error::NodeNotActive(u)),
        }
    }

    /// Active UAVs within communication range of `u`.
    pub fn neighbors(&self, u: NodeId) -> Result<BTreeSet<NodeId>> {
        self.active_uav(u)?;
        Ok(self
            .comm_links
            .range((u, NodeId(0))..=(u, NodeId(u32::MAX)))
            .map(|&(_, m)| m)
            .filter(|m| self.nodes[m.index()].is_uav())
            .collect())
    }

    /// Base stations reachable from `u`; empty unless `u` is a downlink UAV.
    pub fn reachable_bs(&self, u: NodeId) -> Result<BTreeSet<NodeId>> {
        self.active_uav(u)?;
        Ok(self
            .comm_links
            .range((u, NodeId(0))..=(u, NodeId(u32::MAX)))
            .map(|&(_, m)| m)
            .filter(|m| self.nodes[m.index()].kind == NodeKind::BaseStation)
            .collect())
    }

    /// Uplink target of a sensor device: the nearest active collection UAV in
    /// range, lowest id on ties.
    pub fn uplink_target(&self, sd: NodeId) -> Option<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for &(_, m) in self.comm_links.range((sd, NodeId(0))..=(sd, NodeId(u32::MAX))) {
            let d = self.dist(sd, m);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, m));
            }
        }
        best.map(|(_, m)| m)
    }

    pub fn has_link(&self, from: NodeId, to: NodeId) -> bool {
        self.comm_links.contains(&(from, to))
    }

    /// Recomputes `comm_links` from positions and membership.
    pub fn rebuild_links(&mut self) {
        let mut links = BTreeSet::new();
        for a in &self.nodes {
            if !a.active {
                continue;
            }
            for b in &self.nodes {
                if a.id == b.id || !b.active {
                    continue;
                }
                let d = distance(&a.position, &b.position);
                let ok = match (a.kind, a.cluster, b.kind, b.cluster) {
                    (NodeKind::SensorDevice, _, NodeKind::Uav, Some(Cluster::Collection)) => {
                        d <= self.ground_range
                    }
                    (NodeKind::Uav, _, NodeKind::Uav, _) => d <= self.d_max(a.id) && d >= self.d_min,
                    (NodeKind::Uav, Some(Cluster::Downlink), NodeKind::BaseStation, _) => {
                        d <= self.ground_range
                    }
                    _ => false,
                };
                if ok {
                    links.insert((a.id, b.id));
                }
            }
        }
        self.comm_links = links;
    }

    pub fn set_active(&mut self, id: NodeId, active: bool) {
        if let Some(n) = self.nodes.get_mut(id.index()) {
            n.active = active;
        }
        self.rebuild_links();
    }

    /// The `per_cluster` highest-capability active UAVs of every cluster,
    /// ties broken by lowest id. Returned in ascending id order.
    pub fn cluster_heads(&self, per_cluster: usize) -> Vec<NodeId> {
        let mut heads = Vec::new();
        for c in Cluster::ALL {
            let mut members: Vec<&Node> = self
                .uavs()
                .filter(|n| n.active && n.cluster == Some(c))
                .collect();
            members.sort_by(|a, b| b.capability.total_cmp(&a.capability).then(a.id.cmp(&b.id)));
            heads.extend(members.iter().take(per_cluster).map(|n| n.id));
        }
        heads.sort();
        heads
    }

    /// True when every SD has a directed path to every BS.
    pub fn all_pairs_connected(&self) -> bool {
        let bss: Vec<NodeId> = self.ids_of(NodeKind::BaseStation).collect();
        self.ids_of(NodeKind::SensorDevice).all(|sd| {
            let seen = self.reachable_from(sd);
            bss.iter().all(|b| seen.contains(b))
        })
    }

    fn reachable_from(&self, start: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &(_, m) in self.comm_links.range((n, NodeId(0))..=(n, NodeId(u32::MAX))) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    }

    /// Returns the topology one step later: every active UAV takes a random
    /// displacement inside a sphere of radius `v_max * dt`, clamped to its
    /// cluster band and the altitude band. A candidate closer than `d_min` to
    /// any other active UAV is resampled up to 8 times, after which the UAV
    /// stays put.
    pub fn step_mobility(&self, seed: u64) -> Topology {
        let mut next = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        next.time_step += 1;
        if self.max_step_m > 0.0 {
            for i in 0..next.nodes.len() {
                let node = &next.nodes[i];
                if !node.is_uav() || !node.active {
                    continue;
                }
                let cluster = node.cluster.expect("uav has cluster");
                let origin = node.position;
                for _ in 0..MOVE_RESAMPLES {
                    let step = sample_in_ball(&mut rng, self.max_step_m);
                    let cand = next.clamp_to_band(
                        cluster,
                        [origin[0] + step[0], origin[1] + step[1], origin[2] + step[2]],
                    );
                    if next.separated(next.nodes[i].id, &cand) {
                        next.nodes[i].position = cand;
                        break;
                    }
                }
            }
        }
        next.rebuild_links();
        next
    }

    fn clamp_to_band(&self, cluster: Cluster, p: Vec3) -> Vec3 {
        let (lo, hi) = cluster.x_band();
        [
            p[0].clamp(lo * self.area[0], hi * self.area[0]),
            p[1].clamp(0.0, self.area[1]),
            p[2].clamp(self.altitude[0], self.altitude[1]),
        ]
    }

    fn separated(&self, id: NodeId, p: &Vec3) -> bool {
        self.uavs()
            .filter(|n| n.active && n.id != id)
            .all(|n| distance(&n.position, p) >= self.d_min)
    }

    /// Checks the separation, range, link-shape and placement invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let uavs: Vec<&Node> = self.uavs().filter(|n| n.active).collect();
        for (i, a) in uavs.iter().enumerate() {
            for b in &uavs[i + 1..] {
                let d = distance(&a.position, &b.position);
                if d < self.d_min {
                    return Err(format!("uavs {} and {} are {d:.3} m apart", a.id, b.id));
                }
            }
        }
        for n in &self.nodes {
            match n.kind {
                NodeKind::Uav => {
                    if n.cluster.is_none() {
                        return Err(format!("uav {} has no cluster", n.id));
                    }
                    let z = n.position[2];
                    if z < self.altitude[0] - 1e-9 || z > self.altitude[1] + 1e-9 {
                        return Err(format!("uav {} altitude {z} outside band", n.id));
                    }
                }
                _ => {
                    if n.cluster.is_some() || n.position[2] != 0.0 {
                        return Err(format!("ground node {} must be unclustered at z = 0", n.id));
                    }
                }
            }
        }
        for &(a, b) in &self.comm_links {
            let (na, nb) = (&self.nodes[a.index()], &self.nodes[b.index()]);
            let d = self.dist(a, b);
            let ok = match (na.kind, na.cluster, nb.kind, nb.cluster) {
                (NodeKind::SensorDevice, _, NodeKind::Uav, Some(Cluster::Collection)) => true,
                (NodeKind::Uav, _, NodeKind::Uav, _) => d <= self.d_max(a),
                (NodeKind::Uav, Some(Cluster::Downlink), NodeKind::BaseStation, _) => true,
                _ => false,
            };
            if !ok || !na.active || !nb.active {
                return Err(format!("illegal link {a} -> {b}"));
            }
        }
        Ok(())
    }

    /// Writes one CSV row per node: `step,node,kind,x,y,z,active`.
    pub fn write_snapshot_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "step,node,kind,x,y,z,active")?;
        }
        for n in &self.nodes {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{}",
                self.time_step,
                n.id,
                n.kind.as_str(),
                n.position[0],
                n.position[1],
                n.position[2],
                n.active as u8
            )?;
        }
        Ok(())
    }
}

fn sample_in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0 {
            return [v[0] * radius, v[1] * radius, v[2] * radius];
        }
    }
}

fn random_nodes(cfg: &TopologyConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Node>> {
    let mut nodes = Vec::new();
    let push = |nodes: &mut Vec<Node>, kind, cluster, position, capability| {
        let id = NodeId(nodes.len() as u32);
        nodes.push(Node {
            id,
            kind,
            cluster,
            position,
            capability,
            active: true,
        });
    };
    for _ in 0..cfg.sensor_devices {
        let p = [
            rng.gen_range(0.0..=0.1 * cfg.area_x_m),
            rng.gen_range(0.0..=cfg.area_y_m),
            0.0,
        ];
        push(&mut nodes, NodeKind::SensorDevice, None, p, 0.0);
    }
    let counts = [cfg.collection_uavs, cfg.relay_uavs, cfg.downlink_uavs];
    for (c, &count) in Cluster::ALL.iter().zip(&counts) {
        let (lo, hi) = c.x_band();
        for _ in 0..count {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let p = [
                    rng.gen_range(lo * cfg.area_x_m..=hi * cfg.area_x_m),
                    rng.gen_range(0.0..=cfg.area_y_m),
                    rng.gen_range(cfg.altitude_min_m..=cfg.altitude_max_m),
                ];
                let clear = nodes
                    .iter()
                    .filter(|n| n.is_uav())
                    .all(|n| distance(&n.position, &p) >= cfg.d_min_m);
                if clear {
                    placed = Some(p);
                    break;
                }
            }
            let cap = rng.gen_range(0.0..1.0);
            push(&mut nodes, NodeKind::Uav, Some(*c), placed?, cap);
        }
    }
    for _ in 0..cfg.base_stations {
        let p = [
            rng.gen_range(0.9 * cfg.area_x_m..=cfg.area_x_m),
            rng.gen_range(0.0..=cfg.area_y_m),
            0.0,
        ];
        push(&mut nodes, NodeKind::BaseStation, None, p, 0.0);
    }
    Some(nodes)
}
