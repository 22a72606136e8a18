//! Multi-agent environment: per-UAV observations, per-demand actions over
//! neighbor and base-station slots, hop rewards and the step contract.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{link_quality, ChannelParams, LinkQuality};
use crate::error::{Error, Result};
use crate::ledger::{LedgerConfig, LedgerRuntime};
use crate::topology::{distance, NodeId, NodeKind, Topology, TopologyConfig, Vec3};
use crate::traffic::{DemandId, DemandState, HopOutcome, HopRecord, LinkSource, Traffic, TrafficConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Reciprocal hop delay.
    Base,
    /// Reciprocal of delay plus `sigma`, weighted by progress toward the
    /// destination base station.
    Sherb,
}

/// How the hop reward is turned into the value the learner maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSign {
    /// The reward itself.
    AsWritten,
    /// Minus its reciprocal, so that summed rewards along a path are a cost
    /// (for the base reward, minus the end-to-end delay).
    NegativeReciprocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub mode: RewardMode,
    pub sigma: f64,
    pub sign: RewardSign,
    pub drop_penalty: f64,
    pub expiry_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            mode: RewardMode::Sherb,
            sigma: 0.1,
            sign: RewardSign::NegativeReciprocal,
            drop_penalty: -1.0,
            expiry_penalty: -1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("reward: sigma must be positive".into()));
        }
        Ok(())
    }

    /// Hop reward for a transmission from `u` to `k` toward base station `b`.
    pub fn reward(&self, hop_delay_s: f64, d_uk_m: f64, d_kb_m: f64) -> Result<f64> {
        match self.mode {
            RewardMode::Base => base_reward(hop_delay_s),
            RewardMode::Sherb => sherb_reward(hop_delay_s, d_uk_m, d_kb_m, self.sigma),
        }
    }

    pub fn signal(&self, reward: f64) -> f64 {
        match self.sign {
            RewardSign::AsWritten => reward,
            RewardSign::NegativeReciprocal => -1.0 / reward.max(1e-12),
        }
    }
}

pub fn base_reward(hop_delay_s: f64) -> Result<f64> {
    if !(hop_delay_s > 0.0) || !hop_delay_s.is_finite() {
        return Err(Error::DegenerateDelay(hop_delay_s));
    }
    Ok(1.0 / hop_delay_s)
}

pub fn sherb_reward(hop_delay_s: f64, d_uk_m: f64, d_kb_m: f64, sigma: f64) -> Result<f64> {
    if !(hop_delay_s >= 0.0) || !(sigma > 0.0) {
        return Err(Error::DegenerateDelay(hop_delay_s));
    }
    if !(d_uk_m >= 0.0 && d_kb_m >= 0.0) || d_uk_m + d_kb_m == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    Ok(1.0 / (hop_delay_s + sigma) * (d_uk_m / (d_uk_m + d_kb_m)))
}

/// A demand placed at step 0, for frozen instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    pub source: NodeId,
    pub destination: NodeId,
    pub size_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub topology: TopologyConfig,
    pub channel: ChannelParams,
    pub traffic: TrafficConfig,
    pub ledger: LedgerConfig,
    pub reward: RewardSpec,
    /// Neighbor slots in the observation and action space.
    pub k_max: usize,
    /// Base-station slots.
    pub b_max: usize,
    pub steps_per_episode: u64,
    /// Demands injected at step 0, spread over the sensor devices. When unset
    /// (and no explicit demands are given) each sensor device emits demands
    /// at random every step.
    pub load: Option<usize>,
    /// With `load`, draw each episode's count uniformly from `load..=load_max`.
    pub load_max: Option<usize>,
    pub demands: Vec<DemandSpec>,
    /// Run the conservation audit after every step.
    pub audit: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            topology: TopologyConfig::default(),
            channel: ChannelParams::default(),
            traffic: TrafficConfig::default(),
            ledger: LedgerConfig::default(),
            reward: RewardSpec::default(),
            k_max: 11,
            b_max: 2,
            steps_per_episode: 12,
            load: None,
            load_max: None,
            demands: Vec::new(),
            audit: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.channel.validate()?;
        self.traffic.validate()?;
        self.reward.validate()?;
        if self.ledger.enabled {
            self.ledger.validate()?;
        }
        if self.k_max == 0 || self.b_max == 0 {
            return Err(Error::Config("k_max and b_max must be positive".into()));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::Config("steps_per_episode must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            k_max: self.k_max,
            b_max: self.b_max,
        }
    }
}

/// Widths of the flat observation vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub k_max: usize,
    pub b_max: usize,
}

const SELF_WIDTH: usize = 8;
const NEIGHBOR_WIDTH: usize = 5;
const BS_WIDTH: usize = 4;
const DEMAND_FIXED_WIDTH: usize = 8;

impl Layout {
    /// Width of the agent-level encoding.
    pub fn observation_dim(&self) -> usize {
        SELF_WIDTH + NEIGHBOR_WIDTH * self.k_max + BS_WIDTH * self.b_max
    }

    /// Width of the encoding with one demand's features appended.
    pub fn input_dim(&self) -> usize {
        self.observation_dim() + DEMAND_FIXED_WIDTH + self.b_max + self.k_max
    }

    pub fn action_dim(&self) -> usize {
        self.k_max + self.b_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandSummary {
    pub id: DemandId,
    pub size_bits: f64,
    pub destination: NodeId,
    pub age: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub id: NodeId,
    pub position: Vec3,
    pub queue_len: u32,
}

/// What one UAV sees: itself, its queue, its current neighbors and the
/// fixed base-station sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: NodeId,
    pub self_position: Vec3,
    pub self_queue: Vec<DemandSummary>,
    /// Sorted by id, truncated to `k_max`.
    pub neighbors: Vec<NeighborView>,
    /// Every base station in id order, truncated to `b_max`, with whether it
    /// is in range.
    pub base_stations: Vec<(NodeId, Vec3, bool)>,
}

/// Slot-to-target map and validity for one demand at one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSet {
    pub targets: Vec<Option<NodeId>>,
    pub mask: Vec<bool>,
}

impl ActionSet {
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn valid_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub agent: NodeId,
    pub demand: DemandId,
    pub slot: usize,
}

/// Result of one agent decision after the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub agent: NodeId,
    pub demand: DemandId,
    pub slot: usize,
    pub target: NodeId,
    pub hop_delay_s: f64,
    /// The hop reward as defined; zero when the demand was dropped or expired.
    pub reward: f64,
    /// What the learner receives.
    pub signal: f64,
    /// Set exactly when the target is the demand's destination.
    pub flag: bool,
    /// Delivered, dropped or expired on this hop.
    pub terminal: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub hops: Vec<HopRecord>,
    pub outcomes: Vec<DecisionOutcome>,
    /// Demands expired by age after the step, with their last holder.
    pub expired: Vec<(DemandId, NodeId)>,
    /// UAVs that left the network this step.
    pub departed: Vec<NodeId>,
    /// UAVs admitted this step.
    pub joined: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub expired: u64,
    pub in_network: u64,
    pub evacuated: u64,
    pub mean_delay_s: f64,
    pub mean_hops: f64,
    pub total_delay_s: f64,
}

impl EpisodeMetrics {
    pub fn delivery_rate(&self) -> f64 {
        ratio(self.delivered, self.generated)
    }

    pub fn drop_rate(&self) -> f64 {
        ratio(self.dropped + self.expired, self.generated)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub agent: NodeId,
    pub demand: DemandId,
    pub action: NodeId,
    pub reward: f64,
    pub flag: bool,
}

/// Channel view over a topology snapshot.
pub struct Links<'a> {
    pub topo: &'a Topology,
    pub channel: &'a ChannelParams,
}

impl LinkSource for Links<'_> {
    fn quality(&self, from: NodeId, to: NodeId) -> Option<LinkQuality> {
        if !self.topo.has_link(from, to) {
            return None;
        }
        link_quality(self.topo, from, to, self.channel).ok()
    }

    fn bandwidth_hz(&self, _node: NodeId) -> f64 {
        self.channel.node_bandwidth_hz
    }

    fn is_base_station(&self, node: NodeId) -> bool {
        self.topo.node(node).is_some_and(|n| n.kind == NodeKind::BaseStation)
    }
}

/// Mixes a run seed, an episode index and a stream tag into one seed.
pub fn stream_seed(seed: u64, episode: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB));
    z ^= z >> 31;
    z = z.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z ^ (z >> 29)
}

const STREAM_TRAFFIC: u64 = 1;
const STREAM_MOBILITY: u64 = 2;
const STREAM_CHURN: u64 = 3;
const STREAM_LEDGER: u64 = 4;

pub struct Env {
    cfg: EnvConfig,
    seed: u64,
    initial: Topology,
    topo: Topology,
    traffic: Traffic,
    ledger: Option<LedgerRuntime>,
    step: u64,
    episode: u64,
    rng_traffic: ChaCha8Rng,
    rng_churn: ChaCha8Rng,
    demand_hash: u64,
    sds: Vec<NodeId>,
    bss: Vec<NodeId>,
    trace: Option<Vec<TraceRow>>,
}

impl Env {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Env> {
        cfg.validate()?;
        let initial = Topology::from_config(&cfg.topology)?;
        let sds = initial.ids_of(NodeKind::SensorDevice).collect();
        let bss = initial.ids_of(NodeKind::BaseStation).collect();
        let mut env = Env {
            traffic: Traffic::new(cfg.traffic.queue_capacity),
            topo: initial.clone(),
            initial,
            cfg,
            seed,
            ledger: None,
            step: 0,
            episode: 0,
            rng_traffic: ChaCha8Rng::seed_from_u64(0),
            rng_churn: ChaCha8Rng::seed_from_u64(0),
            demand_hash: FNV_OFFSET,
            sds,
            bss,
            trace: None,
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Layout {
        self.cfg.layout()
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn traffic(&self) -> &Traffic {
        &self.traffic
    }

    pub fn ledger(&self) -> Option<&LedgerRuntime> {
        self.ledger.as_ref()
    }

    pub fn ledger_mut(&mut self) -> Option<&mut LedgerRuntime> {
        self.ledger.as_mut()
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn base_stations(&self) -> &[NodeId] {
        &self.bss
    }

    /// Every UAV, active or not; agent identity is stable across churn.
    pub fn agents(&self) -> Vec<NodeId> {
        self.topo.uavs().map(|n| n.id).collect()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Hash of every demand generated this episode (step, source,
    /// destination, size), for checking that paired runs saw the same load.
    pub fn demand_hash(&self) -> u64 {
        self.demand_hash
    }

    /// Starts episode `episode` from the initial topology. All randomness of
    /// the episode derives from the run seed and the episode index.
    pub fn reset(&mut self, episode: u64) -> Result<()> {
        self.episode = episode;
        self.step = 0;
        self.topo = self.initial.clone();
        self.traffic = Traffic::new(self.cfg.traffic.queue_capacity);
        self.rng_traffic = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, episode, STREAM_TRAFFIC));
        self.rng_churn = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, episode, STREAM_CHURN));
        self.demand_hash = FNV_OFFSET;
        if let Some(t) = &mut self.trace {
            t.clear();
        }
        self.ledger = if self.cfg.ledger.enabled {
            Some(LedgerRuntime::genesis(
                &self.topo,
                self.cfg.ledger.clone(),
                stream_seed(self.seed, episode, STREAM_LEDGER),
            )?)
        } else {
            None
        };
        self.traffic.begin_step();
        if !self.cfg.demands.is_empty() {
            for d in self.cfg.demands.clone() {
                self.inject(d.source, d.destination, d.size_bits);
            }
        } else if let Some(load) = self.cfg.load {
            let load = match self.cfg.load_max {
                Some(hi) if hi > load => self.rng_traffic.gen_range(load..=hi),
                _ => load,
            };
            for i in 0..load {
                let src = self.sds[i % self.sds.len()];
                let (dst, size) = self.sample_demand();
                self.inject(src, dst, size);
            }
        } else {
            self.generate();
        }
        Ok(())
    }

    fn sample_demand(&mut self) -> (NodeId, f64) {
        let dst = self.bss[self.rng_traffic.gen_range(0..self.bss.len())];
        let t = &self.cfg.traffic;
        let size = if t.size_max_bits > t.size_min_bits {
            self.rng_traffic.gen_range(t.size_min_bits..=t.size_max_bits)
        } else {
            t.size_min_bits
        };
        (dst, size)
    }

    fn generate(&mut self) {
        for i in 0..self.sds.len() {
            if self.rng_traffic.gen_bool(self.cfg.traffic.demand_probability) {
                let (dst, size) = self.sample_demand();
                self.inject(self.sds[i], dst, size);
            }
        }
    }

    fn inject(&mut self, src: NodeId, dst: NodeId, size: f64) {
        for word in [self.step, u64::from(src.0), u64::from(dst.0), size.to_bits()] {
            self.demand_hash = fnv1a(self.demand_hash, &word.to_le_bytes());
        }
        self.traffic
            .inject(src, dst, size, self.cfg.traffic.max_delay_s, self.step);
    }

    /// True once the step budget is spent, or, for a fixed load, once every
    /// demand has left the network.
    pub fn is_done(&self) -> bool {
        let fixed = self.cfg.load.is_some() || !self.cfg.demands.is_empty();
        self.step >= self.cfg.steps_per_episode || (fixed && self.traffic.queued_count() == 0)
    }

    fn neighbor_queue_len(&self, k: NodeId) -> u32 {
        match &self.ledger {
            Some(l) => l.status(k).map_or(0, |s| s.queue_len),
            None => self.traffic.queue(k).len() as u32,
        }
    }

    pub fn observe(&self, u: NodeId) -> Result<Observation> {
        let neighbors = self.topo.neighbors(u)?;
        let reachable = self.topo.reachable_bs(u)?;
        Ok(Observation {
            agent: u,
            self_position: self.topo.position(u),
            self_queue: self
                .traffic
                .queue(u)
                .iter()
                .map(|&id| {
                    let d = self.traffic.demand(id).expect("queued demand exists");
                    DemandSummary {
                        id,
                        size_bits: d.size_bits,
                        destination: d.destination,
                        age: self.step - d.born_step,
                    }
                })
                .collect(),
            neighbors: neighbors
                .into_iter()
                .take(self.cfg.k_max)
                .map(|k| NeighborView {
                    id: k,
                    position: self.topo.position(k),
                    queue_len: self.neighbor_queue_len(k),
                })
                .collect(),
            base_stations: self
                .bss
                .iter()
                .take(self.cfg.b_max)
                .map(|&b| (b, self.topo.position(b), reachable.contains(&b)))
                .collect(),
        })
    }

    fn scales(&self) -> Scales {
        let t = &self.cfg.topology;
        Scales {
            pos: [t.area_x_m, t.area_y_m, t.altitude_max_m],
            diag: t.area_x_m.hypot(t.area_y_m),
            capacity: self.cfg.traffic.queue_capacity as f64,
            size: self.cfg.traffic.size_max_bits,
            age: self.cfg.traffic.max_age_steps as f64,
        }
    }

    /// Fixed-width encoding of an observation.
    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let s = self.scales();
        let layout = self.layout();
        let mut v = Vec::with_capacity(layout.input_dim());
        for i in 0..3 {
            v.push(obs.self_position[i] / s.pos[i]);
        }
        let q = &obs.self_queue;
        let bits: f64 = q.iter().map(|d| d.size_bits).sum();
        let oldest = q.iter().map(|d| d.age).max().unwrap_or(0);
        let mut centroid = [0.0; 2];
        for d in q {
            let p = self.topo.position(d.destination);
            centroid[0] += p[0] / q.len() as f64;
            centroid[1] += p[1] / q.len() as f64;
        }
        v.push(q.len() as f64 / s.capacity);
        v.push(bits / (s.capacity * s.size));
        v.push(oldest as f64 / s.age);
        v.push(centroid[0] / s.pos[0]);
        v.push(centroid[1] / s.pos[1]);
        for slot in 0..layout.k_max {
            match obs.neighbors.get(slot) {
                Some(n) => {
                    v.push(1.0);
                    for i in 0..3 {
                        v.push((n.position[i] - obs.self_position[i]) / s.pos[i]);
                    }
                    v.push(f64::from(n.queue_len) / s.capacity);
                }
                None => v.extend([0.0; NEIGHBOR_WIDTH]),
            }
        }
        for slot in 0..layout.b_max {
            match obs.base_stations.get(slot) {
                Some((_, p, reachable)) => {
                    v.push(f64::from(u8::from(*reachable)));
                    for i in 0..3 {
                        v.push((p[i] - obs.self_position[i]) / s.pos[i]);
                    }
                }
                None => v.extend([0.0; BS_WIDTH]),
            }
        }
        debug_assert_eq!(v.len(), layout.observation_dim());
        v
    }

    /// Slot targets and validity for `demand` as seen by `u`. Neighbor slots
    /// are valid when occupied; a base-station slot only when it is in range
    /// and is the demand's destination.
    pub fn action_set(&self, obs: &Observation, demand: DemandId) -> Result<ActionSet> {
        let d = self
            .traffic
            .demand(demand)
            .ok_or_else(|| Error::IllegalAction(format!("unknown demand {demand}")))?;
        let layout = self.layout();
        let mut targets = vec![None; layout.action_dim()];
        let mut mask = vec![false; layout.action_dim()];
        for (i, n) in obs.neighbors.iter().enumerate() {
            targets[i] = Some(n.id);
            mask[i] = true;
        }
        for (i, (b, _, reachable)) in obs.base_stations.iter().enumerate() {
            targets[layout.k_max + i] = Some(*b);
            mask[layout.k_max + i] = *reachable && *b == d.destination;
        }
        Ok(ActionSet { targets, mask })
    }

    /// Observation of `u` with the features of `demand` appended, and the
    /// demand's action set at `u`. The demand need not be queued at `u`.
    pub fn observe_demand(&self, u: NodeId, demand: DemandId) -> Result<(Vec<f64>, ActionSet)> {
        let obs = self.observe(u)?;
        let actions = self.action_set(&obs, demand)?;
        let mut v = self.encode(&obs);
        let d = self.traffic.demand(demand).expect("checked by action_set");
        let s = self.scales();
        let dest = self.topo.position(d.destination);
        v.push(d.size_bits / s.size);
        v.push((self.step - d.born_step) as f64 / s.age);
        v.push(f64::from(d.hop_count) / 10.0);
        let rank = d
            .location()
            .and_then(|at| self.traffic.queue(at).iter().position(|&x| x == demand))
            .unwrap_or(0);
        v.push(rank as f64 / s.capacity);
        for i in 0..3 {
            v.push((dest[i] - obs.self_position[i]) / s.pos[i]);
        }
        v.push(distance(&obs.self_position, &dest) / s.diag);
        for slot in 0..self.cfg.b_max {
            let hit = obs.base_stations.get(slot).is_some_and(|(b, _, _)| *b == d.destination);
            v.push(f64::from(u8::from(hit)));
        }
        for slot in 0..self.cfg.k_max {
            v.push(match obs.neighbors.get(slot) {
                Some(n) => distance(&n.position, &dest) / s.diag,
                None => 0.0,
            });
        }
        debug_assert_eq!(v.len(), self.layout().input_dim());
        Ok((v, actions))
    }

    /// Queued demands at active UAVs that have at least one valid action, in
    /// (agent, demand) order. Demands with an empty action set hold.
    pub fn pending(&self) -> Result<Vec<(NodeId, DemandId)>> {
        let mut out = Vec::new();
        for u in self.topo.active_uavs() {
            let q = self.traffic.queue(u);
            if q.is_empty() {
                continue;
            }
            let obs = self.observe(u)?;
            for &id in q {
                if !self.action_set(&obs, id)?.is_empty() {
                    out.push((u, id));
                }
            }
        }
        Ok(out)
    }

    /// Applies one joint action: forwards every decided demand plus every
    /// sensor-device uplink, scores the hops, then advances age expiry,
    /// mobility, the ledger schedule and demand generation.
    pub fn step(&mut self, decisions: &[Decision]) -> Result<StepResult> {
        self.traffic.begin_step();
        let step = self.step;
        let expected: BTreeSet<(NodeId, DemandId)> = self.pending()?.into_iter().collect();
        let mut plan: BTreeMap<DemandId, NodeId> = BTreeMap::new();
        let mut chosen: BTreeMap<DemandId, (NodeId, usize)> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for dec in decisions {
            if !expected.contains(&(dec.agent, dec.demand)) || !seen.insert(dec.demand) {
                return Err(Error::IllegalAction(format!(
                    "no pending decision for demand {} at {}",
                    dec.demand, dec.agent
                )));
            }
            let obs = self.observe(dec.agent)?;
            let actions = self.action_set(&obs, dec.demand)?;
            if !actions.mask.get(dec.slot).copied().unwrap_or(false) {
                return Err(Error::IllegalAction(format!(
                    "slot {} is not valid for demand {} at {}",
                    dec.slot, dec.demand, dec.agent
                )));
            }
            plan.insert(dec.demand, actions.targets[dec.slot].expect("valid slot has target"));
            chosen.insert(dec.demand, (dec.agent, dec.slot));
        }
        if seen.len() != expected.len() {
            return Err(Error::IllegalAction(format!(
                "{} pending demands left without a decision",
                expected.len() - seen.len()
            )));
        }
        for &sd in &self.sds {
            if let Some(up) = self.topo.uplink_target(sd) {
                for &id in self.traffic.queue(sd) {
                    plan.insert(id, up);
                }
            }
        }

        let hops = self.traffic.forward_all(
            &plan,
            &Links {
                topo: &self.topo,
                channel: &self.cfg.channel,
            },
            step,
        )?;
        let mut result = StepResult::default();
        for h in &hops {
            let Some(&(agent, slot)) = chosen.get(&h.demand) else { continue };
            let dest = self.traffic.demand(h.demand).expect("hop demand exists").destination;
            let spec = &self.cfg.reward;
            let (reward, signal) = match h.outcome {
                HopOutcome::Arrived | HopOutcome::Delivered => {
                    let r = spec.reward(h.delay_s, self.topo.dist(h.from, h.to), self.topo.dist(h.to, dest))?;
                    (r, spec.signal(r))
                }
                HopOutcome::Dropped => (0.0, spec.drop_penalty),
                HopOutcome::Expired => (0.0, spec.expiry_penalty),
            };
            let outcome = DecisionOutcome {
                agent,
                demand: h.demand,
                slot,
                target: h.to,
                hop_delay_s: h.delay_s,
                reward,
                signal,
                flag: h.outcome == HopOutcome::Delivered,
                terminal: h.outcome != HopOutcome::Arrived,
            };
            if let Some(t) = &mut self.trace {
                t.push(TraceRow {
                    step,
                    agent,
                    demand: h.demand,
                    action: h.to,
                    reward: signal,
                    flag: outcome.flag,
                });
            }
            result.outcomes.push(outcome);
        }
        result.hops = hops;

        self.step += 1;
        result.expired = self.traffic.expire_stale(self.step, self.cfg.traffic.max_age_steps);
        if self.cfg.topology.max_speed_mps > 0.0 {
            self.topo = self
                .topo
                .step_mobility(stream_seed(self.seed, self.episode, STREAM_MOBILITY ^ (self.step << 8)));
        }
        if self.ledger.is_some() && self.step % self.cfg.ledger.block_period_steps == 0 {
            self.ledger_epoch(&mut result)?;
        }
        if self.cfg.load.is_none() && self.cfg.demands.is_empty() {
            self.generate();
        }
        if self.cfg.audit {
            self.traffic.conservation_audit(self.step)?;
        }
        Ok(result)
    }

    fn ledger_epoch(&mut self, result: &mut StepResult) -> Result<()> {
        let step = self.step;
        let churn = self.cfg.ledger.churn.clone();
        let ledger = self.ledger.as_mut().expect("ledger enabled");
        let committee: BTreeSet<NodeId> = ledger.committee(&self.topo).into_iter().collect();
        for u in self.topo.uavs().map(|n| n.id).collect::<Vec<_>>() {
            if committee.contains(&u) {
                continue;
            }
            if ledger.is_active(u) {
                if self.rng_churn.gen_bool(churn.exit_probability) {
                    ledger.request_exit(u, &self.topo);
                } else if self.rng_churn.gen_bool(churn.silent_probability) {
                    ledger.set_silent(u, true);
                }
            } else if ledger.registry().current(u).is_none() && self.rng_churn.gen_bool(churn.rejoin_probability) {
                // A refused rejoin is counted in the ledger statistics.
                let _ = ledger.request_rejoin(u, step, &self.topo);
            }
        }
        let period = self.cfg.ledger.block_period_steps;
        for e in churn.scripted_exits.iter().filter(|e| e.due(step, period)) {
            ledger.request_exit(e.node, &self.topo);
        }
        for e in churn.scripted_silences.iter().filter(|e| e.due(step, period)) {
            ledger.set_silent(e.node, true);
        }
        for u in self.topo.active_uavs().collect::<Vec<_>>() {
            let neighbors = self.topo.neighbors(u)?.into_iter().collect();
            let queue_len = self.traffic.queue(u).len() as u32;
            ledger.submit_status(u, queue_len, self.topo.position(u), neighbors, &self.topo);
        }
        ledger.reauthenticate_epoch(step, &self.topo);
        ledger.produce_block(step, &self.topo)?;

        let uavs: Vec<(NodeId, bool)> = self.topo.uavs().map(|n| (n.id, n.active)).collect();
        let before = self.topo.clone();
        for (u, was_active) in uavs {
            let now = ledger.is_active(u);
            if was_active && !now {
                result.departed.push(u);
            } else if !was_active && now {
                result.joined.push(u);
            }
            if was_active != now {
                self.topo.set_active(u, now);
            }
        }
        for &u in &result.departed {
            self.evacuate(u, &before, step)?;
        }
        Ok(())
    }

    /// Moves the queue of a departed UAV to its nearest still-active former
    /// neighbor with room, dropping what does not fit.
    fn evacuate(&mut self, u: NodeId, before: &Topology, step: u64) -> Result<()> {
        let mut candidates: Vec<(f64, NodeId)> = before
            .comm_links
            .range((u, NodeId(0))..=(u, NodeId(u32::MAX)))
            .map(|&(_, m)| m)
            .filter(|&m| self.topo.node(m).is_some_and(|n| n.is_uav() && n.active))
            .map(|m| (before.dist(u, m), m))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for id in self.traffic.queue(u).to_vec() {
            let target = candidates
                .iter()
                .map(|&(_, m)| m)
                .find(|&m| self.traffic.queue(m).len() < self.traffic.capacity(m));
            self.traffic.relocate(id, target, step)?;
        }
        Ok(())
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        let totals = self.traffic.totals();
        let delivered: Vec<(f64, u32)> = self
            .traffic
            .demands()
            .filter(|d| matches!(d.state, DemandState::Delivered(_)))
            .map(|d| (d.accumulated_delay_s, d.hop_count))
            .collect();
        let n = delivered.len() as f64;
        let total: f64 = delivered.iter().map(|x| x.0).sum();
        EpisodeMetrics {
            generated: totals.generated,
            delivered: totals.delivered,
            dropped: totals.dropped,
            expired: totals.expired,
            in_network: self.traffic.queued_count(),
            evacuated: totals.evacuated,
            mean_delay_s: if n > 0.0 { total / n } else { 0.0 },
            mean_hops: if n > 0.0 {
                delivered.iter().map(|x| f64::from(x.1)).sum::<f64>() / n
            } else {
                0.0
            },
            total_delay_s: total,
        }
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,agent,demand,action,reward,flag")?;
        for r in self.trace() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step,
                r.agent,
                r.demand,
                r.action,
                r.reward,
                u8::from(r.flag)
            )?;
        }
        Ok(())
    }
}

/// Chooses one slot per pending demand.
pub trait Policy {
    fn choose(&mut self, env: &Env, agent: NodeId, demand: DemandId, input: &[f64], actions: &ActionSet) -> Result<usize>;
}

/// Uniform over the valid slots.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn choose(&mut self, _: &Env, _: NodeId, _: DemandId, _: &[f64], actions: &ActionSet) -> Result<usize> {
        let valid: Vec<usize> = actions.valid_slots().collect();
        Ok(valid[self.rng.gen_range(0..valid.len())])
    }
}

impl Env {
    /// Asks `policy` for every pending demand. A slot outside the valid set
    /// is an error.
    pub fn decide<P: Policy + ?Sized>(&self, policy: &mut P) -> Result<Vec<Decision>> {
        let mut out = Vec::new();
        for (agent, demand) in self.pending()? {
            let (input, actions) = self.observe_demand(agent, demand)?;
            let slot = policy.choose(self, agent, demand, &input, &actions)?;
            if !actions.mask.get(slot).copied().unwrap_or(false) {
                return Err(Error::IllegalAction(format!(
                    "policy chose invalid slot {slot} for demand {demand} at {agent}"
                )));
            }
            out.push(Decision { agent, demand, slot });
        }
        Ok(out)
    }

    /// Resets to `episode` and runs it to the end under `policy`.
    pub fn run_episode<P: Policy + ?Sized>(&mut self, episode: u64, policy: &mut P) -> Result<EpisodeMetrics> {
        self.reset(episode)?;
        while !self.is_done() {
            let decisions = self.decide(policy)?;
            self.step(&decisions)?;
        }
        Ok(self.metrics())
    }

    pub fn set_reward_mode(&mut self, mode: RewardMode) {
        self.cfg.reward.mode = mode;
    }
}

struct Scales {
    pos: [f64; 3],
    diag: f64,
    capacity: f64,
    size: f64,
    age: f64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Cluster, NodeSpec};

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn base_reward_examples() {
        close(base_reward(1.0).unwrap(), 1.0);
        close(base_reward(0.25).unwrap(), 4.0);
        assert!(matches!(base_reward(0.0), Err(Error::DegenerateDelay(_))));
    }

    #[test]
    fn sherb_reward_examples() {
        // u=(0,0), k=(50,0), b=(100,0): (1 / (0.5 + 0.5)) * 50 / (50 + 50)
        close(sherb_reward(0.5, 50.0, 50.0, 0.5).unwrap(), 0.5);
        close(sherb_reward(0.3, 80.0, 0.0, 0.2).unwrap(), 2.0);
        let forward = sherb_reward(0.1, 50.0, 60.0, 0.1).unwrap();
        let behind = sherb_reward(0.1, 50.0, 140.0, 0.1).unwrap();
        assert!(behind < forward);
        assert!(matches!(sherb_reward(0.1, 0.0, 0.0, 0.1), Err(Error::DegenerateGeometry)));
    }

    #[test]
    fn negative_reciprocal_of_base_is_minus_delay() {
        let spec = RewardSpec {
            mode: RewardMode::Base,
            ..RewardSpec::default()
        };
        close(spec.signal(spec.reward(0.04, 1.0, 1.0).unwrap()), -0.04);
    }

    fn line_config() -> EnvConfig {
        let uav = |c, x: f64| NodeSpec {
            kind: NodeKind::Uav,
            cluster: Some(c),
            position: [x, 250.0, 300.0],
            capability: 1.0,
        };
        EnvConfig {
            topology: TopologyConfig {
                max_speed_mps: 0.0,
                nodes: Some(vec![
                    NodeSpec {
                        kind: NodeKind::SensorDevice,
                        cluster: None,
                        position: [50.0, 250.0, 0.0],
                        capability: 1.0,
                    },
                    uav(Cluster::Collection, 300.0),
                    uav(Cluster::Relay, 600.0),
                    uav(Cluster::Relay, 700.0),
                    uav(Cluster::Downlink, 1000.0),
                    NodeSpec {
                        kind: NodeKind::BaseStation,
                        cluster: None,
                        position: [1400.0, 250.0, 0.0],
                        capability: 1.0,
                    },
                ]),
                ..TopologyConfig::default()
            },
            ledger: LedgerConfig {
                enabled: false,
                ..LedgerConfig::default()
            },
            k_max: 4,
            b_max: 1,
            demands: vec![DemandSpec {
                source: NodeId(0),
                destination: NodeId(5),
                size_bits: 500e3,
            }],
            steps_per_episode: 10,
            ..EnvConfig::default()
        }
    }

    fn run_greedy_to_bs(env: &mut Env) -> Vec<StepResult> {
        let mut out = Vec::new();
        while !env.is_done() {
            let decisions: Vec<Decision> = env
                .pending()
                .unwrap()
                .into_iter()
                .map(|(agent, demand)| {
                    let (_, a) = env.observe_demand(agent, demand).unwrap();
                    let slot = a.valid_slots().last().unwrap();
                    Decision { agent, demand, slot }
                })
                .collect();
            out.push(env.step(&decisions).unwrap());
        }
        out
    }

    #[test]
    fn dimensions_match_layout() {
        let env = Env::new(line_config(), 0).unwrap();
        let (v, a) = env.observe_demand(NodeId(1), 0).unwrap();
        assert_eq!(v.len(), env.layout().input_dim());
        assert_eq!(a.mask.len(), env.layout().action_dim());
    }

    #[test]
    fn delivery_sets_flag_exactly_once() {
        let mut env = Env::new(line_config(), 0).unwrap();
        let results = run_greedy_to_bs(&mut env);
        let flags: usize = results.iter().flat_map(|r| &r.outcomes).filter(|o| o.flag).count();
        assert_eq!(flags, 1);
        let relays: Vec<&DecisionOutcome> = results
            .iter()
            .flat_map(|r| &r.outcomes)
            .filter(|o| !o.flag)
            .collect();
        assert!(relays.iter().all(|o| !o.terminal));
        let m = env.metrics();
        assert_eq!(m.delivered, 1);
        let d = env.traffic().demand(0).unwrap();
        let sum: f64 = d.path.iter().map(|p| p.delay_s).sum();
        close(m.mean_delay_s, sum);
    }

    #[test]
    fn isolated_uav_has_zero_neighbor_slots() {
        let mut cfg = line_config();
        if let Some(nodes) = &mut cfg.topology.nodes {
            nodes[2].position[0] = 650.0;
            nodes[3].position[0] = 660.0;
            nodes[4].position[0] = 1050.0;
        }
        cfg.topology.d_max_m = 50.0;
        cfg.topology.ground_range_m = 600.0;
        let env = Env::new(cfg, 0).unwrap();
        let obs = env.observe(NodeId(1)).unwrap();
        assert!(obs.neighbors.is_empty());
        let v = env.encode(&obs);
        assert!(v[SELF_WIDTH..SELF_WIDTH + NEIGHBOR_WIDTH * 4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_worlds_identical_vectors() {
        let a = Env::new(EnvConfig::default(), 3).unwrap();
        let b = Env::new(EnvConfig::default(), 3).unwrap();
        for u in a.agents() {
            assert_eq!(a.encode(&a.observe(u).unwrap()), b.encode(&b.observe(u).unwrap()));
        }
    }

    #[test]
    fn revoked_node_cannot_observe() {
        let mut env = Env::new(line_config(), 0).unwrap();
        env.topo.set_active(NodeId(2), false);
        assert!(matches!(env.observe(NodeId(2)), Err(Error::NodeNotActive(_))));
    }

    #[test]
    fn missing_or_illegal_decisions_rejected() {
        let mut env = Env::new(line_config(), 0).unwrap();
        env.step(&[]).unwrap();
        assert_eq!(env.pending().unwrap(), vec![(NodeId(1), 0)]);
        assert!(matches!(env.step(&[]), Err(Error::IllegalAction(_))));
        let bad = Decision {
            agent: NodeId(1),
            demand: 0,
            slot: 4,
        };
        assert!(matches!(env.step(&[bad]), Err(Error::IllegalAction(_))));
    }

    #[test]
    fn full_downstream_queue_drops_with_penalty() {
        let mut env = Env::new(line_config(), 0).unwrap();
        env.step(&[]).unwrap();
        env.traffic.set_capacity(NodeId(2), 0);
        let (_, a) = env.observe_demand(NodeId(1), 0).unwrap();
        let slot = a.targets.iter().position(|t| *t == Some(NodeId(2))).unwrap();
        let r = env
            .step(&[Decision {
                agent: NodeId(1),
                demand: 0,
                slot,
            }])
            .unwrap();
        let o = &r.outcomes[0];
        assert!(o.terminal && !o.flag);
        assert_eq!(o.signal, -1.0);
        assert_eq!(env.metrics().dropped, 1);
    }

    #[test]
    fn trace_csv_rows() {
        let mut env = Env::new(line_config(), 0).unwrap();
        env.enable_trace();
        run_greedy_to_bs(&mut env);
        let mut buf = Vec::new();
        env.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,agent,demand,action,reward,flag");
        assert_eq!(text.lines().count(), 1 + env.trace().len());
        assert!(text.lines().last().unwrap().ends_with(",1"));
    }

    #[test]
    fn demand_hash_depends_only_on_seed() {
        let mut a = Env::new(EnvConfig::default(), 11).unwrap();
        let mut b = Env::new(EnvConfig::default(), 11).unwrap();
        let c = Env::new(EnvConfig::default(), 12).unwrap();
        assert_eq!(a.demand_hash(), b.demand_hash());
        a.reset(4).unwrap();
        b.reset(4).unwrap();
        assert_eq!(a.demand_hash(), b.demand_hash());
        let _ = c;
    }
}
