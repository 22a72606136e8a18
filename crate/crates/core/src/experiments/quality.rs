use serde::{Deserialize, Serialize};

use crate::env::{Env, Policy};
use crate::error::Result;
use crate::instances::six_uav_config;
use crate::learner::{train, BufferMode, TargetKind, TrainConfig, TrainedPolicies};
use crate::oracle::{evaluate, solve_exact, Snapshot};
use crate::topology::NodeId;

/// SHERB-MADDQN settings for the six-UAV instance. The target network
/// tracks the online one at every update (`target_period = 1`).
pub fn six_uav_train_config() -> TrainConfig {
    TrainConfig {
        buffer: BufferMode::Sherb,
        target: TargetKind::Ddqn,
        episodes: 2_000,
        target_period: 1,
        buffer_capacity: 5_000,
        ..TrainConfig::default()
    }
}

/// Trains on the six-UAV instance with one to three demands per episode.
pub fn train_six_uav(cfg: &TrainConfig, seed: u64) -> Result<TrainedPolicies> {
    let mut env_cfg = six_uav_config();
    env_cfg.load = Some(1);
    env_cfg.load_max = Some(3);
    let mut env = Env::new(env_cfg, seed)?;
    Ok(train(&mut env, cfg, seed, None)?.policies)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotScore {
    pub demands: usize,
    pub policy_delay_s: f64,
    pub oracle_delay_s: f64,
    pub gap: f64,
    pub optimal_demands: usize,
    pub policy_paths: Vec<Vec<NodeId>>,
    pub oracle_paths: Vec<Vec<NodeId>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scores: Vec<SnapshotScore>,
}

impl QualityReport {
    /// Largest per-snapshot gap.
    pub fn worst_gap(&self) -> f64 {
        self.scores.iter().map(|s| s.gap).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_gap(&self) -> f64 {
        self.scores.iter().map(|s| s.gap).sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// Share of evaluation demands routed on an oracle-optimal path.
    pub fn optimal_fraction(&self) -> f64 {
        let n: usize = self.scores.iter().map(|s| s.demands).sum();
        let ok: usize = self.scores.iter().map(|s| s.optimal_demands).sum();
        ok as f64 / n.max(1) as f64
    }
}

/// Scores a greedy policy against the oracle on each snapshot.
pub fn policy_quality<P: Policy + ?Sized>(policy: &mut P, snapshots: &[Snapshot]) -> Result<QualityReport> {
    let mut scores = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        let sol = solve_exact(s)?;
        let e = evaluate(policy, s, &sol)?;
        scores.push(SnapshotScore {
            demands: e.demands,
            policy_delay_s: e.policy_delay_s,
            oracle_delay_s: e.oracle_delay_s,
            gap: e.gap,
            optimal_demands: e.optimal_demands,
            policy_paths: e.paths,
            oracle_paths: sol.paths,
        });
    }
    Ok(QualityReport { scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::six_uav_snapshots;
    use crate::oracle::OraclePolicy;

    #[test]
    fn oracle_scores_perfectly() {
        let snaps = six_uav_snapshots().unwrap();
        let mut scores = Vec::new();
        for s in &snaps {
            let sol = solve_exact(s).unwrap();
            let r = policy_quality(&mut OraclePolicy::new(&sol), std::slice::from_ref(s)).unwrap();
            scores.extend(r.scores);
        }
        let r = QualityReport { scores };
        assert_eq!(r.worst_gap(), 1.0);
        assert_eq!(r.optimal_fraction(), 1.0);
    }

    #[test]
    fn short_training_runs() {
        let cfg = TrainConfig {
            episodes: 5,
            ..six_uav_train_config()
        };
        let pol = train_six_uav(&cfg, 0).unwrap();
        let r = policy_quality(&mut crate::learner::Greedy(&pol), &six_uav_snapshots().unwrap()).unwrap();
        assert_eq!(r.scores.len(), 6);
        assert!(r.scores.iter().all(|s| s.gap >= 1.0 - 1e-9));
    }
}
