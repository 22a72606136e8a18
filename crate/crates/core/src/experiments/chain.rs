use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::env::{ActionSet, Env, EnvConfig, Policy};
use crate::error::{Error, Result};
use crate::ledger::pbft::Unsigned;
use crate::ledger::{pbft_round, Behavior, FaultEntry, LedgerStats, PbftReplicaState, ScriptedEvent};
use crate::topology::{distance, Cluster, NodeId};
use crate::traffic::DemandId;

/// Forwards every demand to the slot closest to its destination, taking the
/// destination itself whenever it is a slot.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestToDestination;

impl Policy for NearestToDestination {
    fn choose(&mut self, env: &Env, _: NodeId, demand: DemandId, _: &[f64], actions: &ActionSet) -> Result<usize> {
        let dest = env
            .traffic()
            .demand(demand)
            .ok_or_else(|| Error::IllegalAction(format!("unknown demand {demand}")))?
            .destination;
        let goal = env.topology().position(dest);
        let mut best: Option<(f64, usize)> = None;
        for slot in actions.valid_slots() {
            let Some(t) = actions.targets[slot] else { continue };
            let d = if t == dest {
                -1.0
            } else {
                distance(&env.topology().position(t), &goal)
            };
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, slot));
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::IllegalAction("no valid slot".into()))
    }
}

pub const CHAIN_STEPS: u64 = 60;
pub const CHAIN_EPISODES: u64 = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainScenario {
    pub name: String,
    /// Consensus committee size.
    pub replicas: usize,
    pub faulty: usize,
    pub rounds: u64,
    pub committed: u64,
    /// Committed over attempted (not skipped) rounds.
    pub success_rate: f64,
    pub view_changes: u64,
    pub revocations: u64,
    /// Steps from a scripted event to the UAV leaving the topology, averaged
    /// over episodes where it left.
    pub revocation_latency_steps: Option<f64>,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub evacuated: u64,
    pub mean_delay_s: f64,
    /// Mean delay minus the fault-free scenario's.
    pub delay_delta_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub scenarios: Vec<ChainScenario>,
}

impl ChainReport {
    pub fn get(&self, name: &str) -> Option<&ChainScenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        for s in &self.scenarios {
            w.serialize(s).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn add_stats(acc: &mut LedgerStats, s: &LedgerStats) {
    acc.rounds += s.rounds;
    acc.failed_rounds += s.failed_rounds;
    acc.skipped_rounds += s.skipped_rounds;
    acc.view_changes += s.view_changes;
    acc.revocations += s.revocations;
}

/// Runs the ledger-enabled simulator under one script.
fn run_env(name: &str, cfg: EnvConfig, seed: u64, watch: Option<ScriptedEvent>) -> Result<ChainScenario> {
    let faulty = cfg.ledger.faults.len();
    let mut env = Env::new(cfg, seed)?;
    let replicas = env.ledger().map_or(0, |l| l.committee(env.topology()).len());
    let mut stats = LedgerStats::default();
    let mut latencies = Vec::new();
    let (mut generated, mut delivered, mut dropped, mut evacuated) = (0, 0, 0, 0);
    let mut delay = 0.0;
    for ep in 0..CHAIN_EPISODES {
        env.reset(ep)?;
        let mut left = None;
        while !env.is_done() {
            let decisions = env.decide(&mut NearestToDestination)?;
            let r = env.step(&decisions)?;
            if let Some(w) = watch {
                if left.is_none() && r.departed.contains(&w.node) {
                    left = Some(env.current_step());
                }
            }
        }
        if let (Some(w), Some(at)) = (watch, left) {
            latencies.push(at.saturating_sub(w.step) as f64);
        }
        let m = env.metrics();
        generated += m.generated;
        delivered += m.delivered;
        dropped += m.dropped + m.expired;
        evacuated += m.evacuated;
        delay += m.total_delay_s;
        if let Some(l) = env.ledger() {
            add_stats(&mut stats, l.stats());
        }
    }
    let attempted = stats.rounds - stats.skipped_rounds;
    let committed = attempted - stats.failed_rounds;
    Ok(ChainScenario {
        name: name.to_string(),
        replicas,
        faulty,
        rounds: stats.rounds,
        committed,
        success_rate: if attempted > 0 {
            committed as f64 / attempted as f64
        } else {
            0.0
        },
        view_changes: stats.view_changes,
        revocations: stats.revocations,
        revocation_latency_steps: super::stats::mean(&latencies),
        generated,
        delivered,
        dropped,
        evacuated,
        mean_delay_s: if delivered > 0 { delay / delivered as f64 } else { 0.0 },
        delay_delta_s: 0.0,
    })
}

/// Standalone rounds at `n = 3f + 1` with every choice of `f` mute
/// replicas.
fn pbft_mute_sweep(f: usize) -> Result<ChainScenario> {
    let n = 3 * f + 1;
    let proposal = [0xA5; 32];
    let rogue = [0x5A; 32];
    let mut s = ChainScenario {
        name: format!("pbft-n{n}-mute{f}"),
        replicas: n,
        faulty: f,
        ..ChainScenario::default()
    };
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != f {
            continue;
        }
        let faults: BTreeMap<usize, Behavior> = (0..n)
            .filter(|r| mask & (1 << r) != 0)
            .map(|r| (r, Behavior::Mute))
            .collect();
        let mut reps: Vec<PbftReplicaState> = (0..n).map(|r| PbftReplicaState::new(r, n, proposal)).collect();
        let out = pbft_round(&mut reps, &faults, &Unsigned, rogue, (f + 1) as u32)?;
        s.rounds += 1;
        s.committed += u64::from(out.committed == Some(proposal) && !out.conflicting);
        s.view_changes += u64::from(out.view_changes);
    }
    s.success_rate = s.committed as f64 / s.rounds as f64;
    Ok(s)
}

/// Scripted consensus, membership and fault scenarios on the configured
/// scenario, run with [`NearestToDestination`] routing. Requires the ledger
/// to be enabled.
pub fn chain_scenarios(cfg: &ExperimentConfig) -> Result<ChainReport> {
    if !cfg.scenario.ledger.enabled {
        return Err(Error::Config("chain scenarios need the ledger enabled".into()));
    }
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let base = EnvConfig {
        steps_per_episode: CHAIN_STEPS,
        load: None,
        load_max: None,
        demands: Vec::new(),
        ..cfg.scenario.clone()
    };
    let mut clean = base.clone();
    clean.ledger.faults.clear();
    clean.ledger.churn = Default::default();

    let probe = Env::new(clean.clone(), seed)?;
    let committee = probe.ledger().expect("ledger enabled").committee(probe.topology());
    let f = committee.len().saturating_sub(1) / 3;
    let target = probe
        .topology()
        .uavs()
        .filter(|n| n.cluster == Some(Cluster::Relay) && !committee.contains(&n.id))
        .map(|n| n.id)
        .next()
        .or_else(|| probe.topology().uavs().map(|n| n.id).find(|id| !committee.contains(id)));

    let mut scenarios = vec![run_env("no-faults", clean.clone(), seed, None)?];

    let mut mute = clean.clone();
    mute.ledger.faults = (0..f)
        .map(|r| FaultEntry {
            replica: r,
            behavior: Behavior::Mute,
            start_round: 0,
            stop_round: u64::MAX,
        })
        .collect();
    scenarios.push(run_env("mute-replicas", mute, seed, None)?);

    let mut equivocate = clean.clone();
    equivocate.ledger.faults = vec![FaultEntry {
        replica: 0,
        behavior: Behavior::Equivocate,
        start_round: 0,
        stop_round: u64::MAX,
    }];
    scenarios.push(run_env("equivocating-primary", equivocate, seed, None)?);

    if let Some(node) = target {
        let exit = ScriptedEvent {
            step: CHAIN_STEPS / 2,
            node,
        };
        let mut c = clean.clone();
        c.ledger.churn.scripted_exits = vec![exit];
        scenarios.push(run_env("uav-exit", c, seed, Some(exit))?);

        let silent = ScriptedEvent { step: 10, node };
        let mut c = clean.clone();
        c.ledger.churn.scripted_silences = vec![silent];
        scenarios.push(run_env("silent-uav", c, seed, Some(silent))?);
    }

    let mut churn = clean.clone();
    churn.ledger.churn.exit_probability = 0.05;
    churn.ledger.churn.rejoin_probability = 0.3;
    churn.ledger.churn.silent_probability = 0.02;
    scenarios.push(run_env("random-churn", churn, seed, None)?);

    let baseline = scenarios[0].mean_delay_s;
    for s in &mut scenarios {
        s.delay_delta_s = s.mean_delay_s - baseline;
    }
    scenarios.push(pbft_mute_sweep(1)?);
    scenarios.push(pbft_mute_sweep(2)?);
    Ok(ChainReport { scenarios })
}
