//! Multi-agent training loop: epsilon-greedy collection, per-agent replay,
//! double-DQN updates and soft target tracking.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{argmax, q_forward, soft_target_update, Optimizer, OptimizerState, ValueNet};
use super::replay::{BufferMode, ReplayBuffer, Transition};
use super::target::{batch_gradients, q_target_with, TargetKind};
use crate::env::{ActionSet, Decision, Env, Policy, RewardMode};
use crate::error::{Error, Result};
use crate::topology::NodeId;
use crate::traffic::DemandId;

/// Whose observation the bootstrap term is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// The demand's holder after the hop, scored by that agent's networks.
    NextHolder,
    /// The acting agent's own next observation, scored by its own networks.
    SelfAgent,
}

/// Which network picks the bootstrap action in the double-DQN target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Online,
    /// A lagged copy, i.e. the target network itself.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Soft target update every this many gradient steps.
    pub target_period: u64,
    pub tau: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub episodes: u64,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub target: TargetKind,
    pub buffer: BufferMode,
    pub bootstrap: BootstrapMode,
    pub selection: Selection,
    /// Write a checkpoint every this many episodes when a directory is given.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            gamma: 0.95,
            batch_size: 64,
            target_period: 100,
            tau: 0.01,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            episodes: 2_000,
            buffer_capacity: 20_000,
            hidden: vec![64, 64],
            optimizer: Optimizer::Sgd,
            target: TargetKind::Ddqn,
            buffer: BufferMode::Sherb,
            bootstrap: BootstrapMode::NextHolder,
            selection: Selection::Online,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.batch_size == 0 || self.target_period == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, target_period and buffer_capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must be in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be nonempty");
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: u64) -> f64 {
        let span = self.epsilon_decay_fraction * self.episodes as f64;
        let frac = if span > 0.0 {
            (episode as f64 / span).min(1.0)
        } else {
            1.0
        };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    /// Short algorithm label, e.g. `SHERB-MADDQN`.
    pub fn label(&self) -> String {
        let b = match self.buffer {
            BufferMode::Plain => "ERB",
            BufferMode::Sherb => "SHERB",
            BufferMode::Hherb => "HHERB",
        };
        let t = match self.target {
            TargetKind::Ddqn => "MADDQN",
            TargetKind::Dqn => "MADQN",
        };
        format!("{b}-{t}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub cumulative_reward: f64,
    pub mean_loss: f64,
    pub epsilon: f64,
    pub delivered: u64,
    pub generated: u64,
    pub mean_delay_s: f64,
    /// [`Env::demand_hash`] at the end of the episode.
    pub demand_hash: u64,
}

/// One online/target pair per UAV, indexed like [`TrainedPolicies::agents`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPolicies {
    pub agents: Vec<NodeId>,
    pub online: Vec<ValueNet>,
    pub target: Vec<ValueNet>,
    pub steps: u64,
}

impl TrainedPolicies {
    pub fn new<R: Rng>(agents: Vec<NodeId>, dims: &[usize], rng: &mut R) -> Result<Self> {
        let online = agents
            .iter()
            .map(|_| ValueNet::new(dims, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedPolicies {
            agents,
            target: online.clone(),
            online,
            steps: 0,
        })
    }

    pub fn index_of(&self, agent: NodeId) -> Option<usize> {
        self.agents.iter().position(|&a| a == agent)
    }

    /// Greedy slot under the online network.
    pub fn greedy(&self, agent: NodeId, input: &[f64], actions: &ActionSet) -> Result<usize> {
        let i = self
            .index_of(agent)
            .ok_or_else(|| Error::IllegalAction(format!("no policy for {agent}")))?;
        let q = q_forward(&self.online[i], input, &actions.mask)?;
        argmax(&q).ok_or_else(|| Error::IllegalAction(format!("no valid slot at {agent}")))
    }

    const MAGIC: &'static [u8; 8] = b"LAINNETS";
    const VERSION: u32 = 1;

    /// Versioned little-endian blob: magic, version, step counter, agent
    /// ids, then each online and target net as layer dims followed by
    /// row-major weights and biases.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&self.steps.to_le_bytes())?;
        w.write_all(&(self.agents.len() as u32).to_le_bytes())?;
        for a in &self.agents {
            w.write_all(&a.0.to_le_bytes())?;
        }
        for net in self.online.iter().chain(&self.target) {
            let dims = net.dims();
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for p in net.flat() {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Decode(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32_buf = [0u8; 4];
        let mut u64_buf = [0u8; 8];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut u64_buf).map_err(|_| bad("truncated"))?;
        let steps = u64::from_le_bytes(u64_buf);
        let n = read_u32(&mut r)? as usize;
        if n > 1 << 16 {
            return Err(bad("agent count out of range"));
        }
        let agents = (0..n).map(|_| read_u32(&mut r).map(NodeId)).collect::<Result<Vec<_>>>()?;
        let mut nets = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let layers = read_u32(&mut r)? as usize;
            if !(2..=64).contains(&layers) {
                return Err(bad("layer count out of range"));
            }
            let dims = (0..layers)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims.iter().any(|&d| d == 0 || d > 1 << 16) {
                return Err(bad("layer width out of range"));
            }
            let mut net = ValueNet::zeros(&dims)?;
            let mut params = vec![0.0; net.parameter_count()];
            for p in &mut params {
                r.read_exact(&mut u64_buf).map_err(|_| bad("truncated"))?;
                *p = f64::from_le_bytes(u64_buf);
            }
            net.set_flat(&params)?;
            nets.push(net);
        }
        let target = nets.split_off(n);
        Ok(TrainedPolicies {
            agents,
            online: nets,
            target,
            steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

impl Policy for TrainedPolicies {
    fn choose(&mut self, _: &Env, agent: NodeId, _: DemandId, input: &[f64], actions: &ActionSet) -> Result<usize> {
        self.greedy(agent, input, actions)
    }
}

/// Ties the borrow of a trained policy to the [`Policy`] interface without
/// needing `&mut`.
pub struct Greedy<'a>(pub &'a TrainedPolicies);

impl Policy for Greedy<'_> {
    fn choose(&mut self, _: &Env, agent: NodeId, _: DemandId, input: &[f64], actions: &ActionSet) -> Result<usize> {
        self.0.greedy(agent, input, actions)
    }
}

pub struct TrainOutput {
    pub policies: TrainedPolicies,
    pub records: Vec<EpisodeRecord>,
}

pub fn write_metrics_csv<W: Write>(records: &[EpisodeRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "episode,cumulative_reward,mean_loss,epsilon")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.episode, r.cumulative_reward, r.mean_loss, r.epsilon)?;
    }
    Ok(())
}

struct Pending {
    agent: usize,
    demand: DemandId,
    input: Vec<f64>,
    mask: Vec<bool>,
    slot: usize,
}

/// Trains one network pair per UAV on `env`. The reward the buffers store
/// follows the buffer mode: shaped for SHERB, base otherwise. `seed` drives
/// initialization, exploration and replay sampling; the environment keeps
/// its own streams.
pub fn train(env: &mut Env, cfg: &TrainConfig, seed: u64, checkpoint_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    env.set_reward_mode(if cfg.buffer.shaped() {
        RewardMode::Sherb
    } else {
        RewardMode::Base
    });
    let layout = env.layout();
    let mut dims = vec![layout.input_dim()];
    dims.extend(&cfg.hidden);
    dims.push(layout.action_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_1EA2);
    let mut pol = TrainedPolicies::new(env.agents(), &dims, &mut rng)?;
    let n = pol.agents.len();
    let mut buffers: Vec<ReplayBuffer> = (0..n).map(|_| ReplayBuffer::new(cfg.buffer, cfg.buffer_capacity)).collect();
    let mut opts: Vec<OptimizerState> = pol.online.iter().map(|net| OptimizerState::new(cfg.optimizer, net)).collect();
    let mut updates = vec![0u64; n];
    let index: BTreeMap<NodeId, usize> = pol.agents.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let expiry_penalty = env.config().reward.expiry_penalty;
    let mut records = Vec::with_capacity(cfg.episodes as usize);

    for episode in 0..cfg.episodes {
        env.reset(episode)?;
        let eps = cfg.epsilon(episode);
        let mut cumulative = 0.0;
        let (mut loss_sum, mut loss_n) = (0.0, 0u64);
        while !env.is_done() {
            let step = env.current_step();
            let mut pending = Vec::new();
            for (agent, demand) in env.pending()? {
                let (input, actions) = env.observe_demand(agent, demand)?;
                let i = index[&agent];
                let slot = if rng.gen_bool(eps) {
                    let valid: Vec<usize> = actions.valid_slots().collect();
                    valid[rng.gen_range(0..valid.len())]
                } else {
                    argmax(&q_forward(&pol.online[i], &input, &actions.mask)?).expect("pending demand has a valid slot")
                };
                pending.push(Pending {
                    agent: i,
                    demand,
                    input,
                    mask: actions.mask,
                    slot,
                });
            }
            let decisions: Vec<Decision> = pending
                .iter()
                .map(|p| Decision {
                    agent: pol.agents[p.agent],
                    demand: p.demand,
                    slot: p.slot,
                })
                .collect();
            let result = env.step(&decisions)?;
            let outcomes: BTreeMap<DemandId, &crate::env::DecisionOutcome> =
                result.outcomes.iter().map(|o| (o.demand, o)).collect();
            for p in pending {
                let o = outcomes[&p.demand];
                let expired = result.expired.iter().any(|&(d, _)| d == p.demand);
                let r = o.signal + if expired { expiry_penalty } else { 0.0 };
                cumulative += r;
                let holder = env.traffic().demand(p.demand).and_then(|d| d.location());
                let mut t = Transition {
                    o: p.input,
                    a: p.slot,
                    r,
                    o_next: Vec::new(),
                    mask_next: Vec::new(),
                    next_agent: None,
                    done: true,
                    mask: p.mask,
                    destination: env.traffic().demand(p.demand).expect("known demand").destination,
                };
                let next = match (cfg.bootstrap, holder) {
                    _ if o.terminal || expired => None,
                    (_, None) => None,
                    (BootstrapMode::NextHolder, Some(h)) => index.get(&h).map(|&i| (h, Some(i))),
                    (BootstrapMode::SelfAgent, Some(_)) => Some((pol.agents[p.agent], None)),
                };
                if let Some((who, next_agent)) = next {
                    if let Ok((x, a)) = env.observe_demand(who, p.demand) {
                        if !a.is_empty() {
                            t.o_next = x;
                            t.mask_next = a.mask;
                            t.next_agent = next_agent;
                            t.done = false;
                        }
                    }
                }
                buffers[p.agent].push(t);
            }

            for i in 0..n {
                if buffers[i].len() <= cfg.batch_size {
                    continue;
                }
                let batch = buffers[i].sample(cfg.batch_size, &mut rng);
                let y = {
                    let online = &pol.online;
                    let target = &pol.target;
                    q_target_with(&batch, cfg.target, cfg.gamma, |who| {
                        let j = who.unwrap_or(i);
                        match cfg.selection {
                            Selection::Online => (&online[j], &target[j]),
                            Selection::Target => (&target[j], &target[j]),
                        }
                    })?
                };
                let (loss, g) = batch_gradients(&pol.online[i], &batch, &y).map_err(|e| with_context(e, episode, step))?;
                opts[i].step(&mut pol.online[i], &g, cfg.learning_rate);
                if !pol.online[i].is_finite() {
                    if let Some(dir) = checkpoint_dir {
                        let _ = pol.save(&dir.join("diverged.ckpt"));
                    }
                    return Err(Error::DivergenceDetected {
                        episode,
                        step,
                        detail: format!("non-finite parameters for agent {}", pol.agents[i]),
                    });
                }
                loss_sum += loss;
                loss_n += 1;
                updates[i] += 1;
                pol.steps += 1;
                if updates[i] % cfg.target_period == 0 {
                    let (online, target) = (&pol.online[i], &mut pol.target[i]);
                    soft_target_update(online, target, cfg.tau)?;
                }
            }
        }
        let m = env.metrics();
        records.push(EpisodeRecord {
            episode,
            cumulative_reward: cumulative,
            mean_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            epsilon: eps,
            delivered: m.delivered,
            generated: m.generated,
            mean_delay_s: m.mean_delay_s,
            demand_hash: env.demand_hash(),
        });
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if every > 0 && (episode + 1) % every == 0 {
                pol.save(&dir.join(format!("episode-{:06}.ckpt", episode + 1)))?;
            }
        }
    }
    Ok(TrainOutput {
        policies: pol,
        records,
    })
}

fn with_context(e: Error, episode: u64, step: u64) -> Error {
    match e {
        Error::DivergenceDetected { detail, .. } => Error::DivergenceDetected { episode, step, detail },
        other => other,
    }
}
