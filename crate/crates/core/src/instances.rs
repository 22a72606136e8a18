//! Frozen instances used by the oracle, the acceptance suite and the
//! benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{DemandSpec, EnvConfig};
use crate::error::Result;
use crate::ledger::LedgerConfig;
use crate::oracle::Snapshot;
use crate::topology::{Cluster, NodeId, NodeKind, NodeSpec, TopologyConfig};

fn uav(cluster: Cluster, x: f64, y: f64, z: f64) -> NodeSpec {
    NodeSpec {
        kind: NodeKind::Uav,
        cluster: Some(cluster),
        position: [x, y, z],
        capability: 1.0,
    }
}

fn ground(kind: NodeKind, x: f64, y: f64) -> NodeSpec {
    NodeSpec {
        kind,
        cluster: None,
        position: [x, y, 0.0],
        capability: 1.0,
    }
}

/// Static configuration over explicit nodes, ledger off.
pub fn frozen_config(nodes: Vec<NodeSpec>, k_max: usize, b_max: usize) -> EnvConfig {
    EnvConfig {
        topology: TopologyConfig {
            max_speed_mps: 0.0,
            nodes: Some(nodes),
            ..TopologyConfig::default()
        },
        ledger: LedgerConfig {
            enabled: false,
            ..LedgerConfig::default()
        },
        k_max,
        b_max,
        ..EnvConfig::default()
    }
}

/// One sensor device, six UAVs in two rows across the three clusters, one
/// base station. Node ids: SD 0, collection 1-2, relay 3-4, downlink 5-6,
/// BS 7.
pub fn six_uav_config() -> EnvConfig {
    let nodes = vec![
        ground(NodeKind::SensorDevice, 0.0, 250.0),
        uav(Cluster::Collection, 250.0, 140.0, 300.0),
        uav(Cluster::Collection, 250.0, 360.0, 300.0),
        uav(Cluster::Relay, 560.0, 120.0, 300.0),
        uav(Cluster::Relay, 580.0, 370.0, 300.0),
        uav(Cluster::Downlink, 880.0, 160.0, 300.0),
        uav(Cluster::Downlink, 900.0, 330.0, 300.0),
        ground(NodeKind::BaseStation, 1150.0, 250.0),
    ];
    let mut cfg = frozen_config(nodes, 5, 1);
    cfg.steps_per_episode = 10;
    cfg
}

pub const SIX_UAV_SD: NodeId = NodeId(0);
pub const SIX_UAV_BS: NodeId = NodeId(7);

/// Evaluation snapshots on the six-UAV instance: one to three demands of
/// assorted sizes.
pub fn six_uav_snapshots() -> Result<Vec<Snapshot>> {
    let sizes: [&[f64]; 6] = [
        &[500e3],
        &[400e3],
        &[600e3],
        &[500e3, 500e3],
        &[400e3, 600e3],
        &[450e3, 500e3, 550e3],
    ];
    sizes
        .iter()
        .map(|s| {
            let demands = s
                .iter()
                .map(|&size_bits| DemandSpec {
                    source: SIX_UAV_SD,
                    destination: SIX_UAV_BS,
                    size_bits,
                })
                .collect();
            Snapshot::new(six_uav_config(), demands, 10)
        })
        .collect()
}

/// SD, a collection UAV, a downlink UAV and a BS in a line.
pub fn chain() -> Result<Snapshot> {
    let nodes = vec![
        ground(NodeKind::SensorDevice, 0.0, 0.0),
        uav(Cluster::Collection, 250.0, 0.0, 300.0),
        uav(Cluster::Downlink, 500.0, 0.0, 300.0),
        ground(NodeKind::BaseStation, 750.0, 0.0),
    ];
    let demands = vec![DemandSpec {
        source: NodeId(0),
        destination: NodeId(3),
        size_bits: 500e3,
    }];
    Snapshot::new(frozen_config(nodes, 4, 1), demands, 6)
}

/// Collection UAV 1 reaches downlink UAV 4 either directly over a long hop
/// or through relay 2 or 3 on two short hops.
pub fn diamond(relay_offset_m: f64) -> Result<Snapshot> {
    let nodes = vec![
        ground(NodeKind::SensorDevice, 0.0, 250.0),
        uav(Cluster::Collection, 200.0, 250.0, 300.0),
        uav(Cluster::Relay, 360.0, 250.0 - relay_offset_m, 300.0),
        uav(Cluster::Relay, 360.0, 250.0 + relay_offset_m, 300.0),
        uav(Cluster::Downlink, 520.0, 250.0, 300.0),
        ground(NodeKind::BaseStation, 720.0, 250.0),
    ];
    let demands = vec![DemandSpec {
        source: NodeId(0),
        destination: NodeId(5),
        size_bits: 500e3,
    }];
    Snapshot::new(frozen_config(nodes, 4, 1), demands, 8)
}

/// Random instance with `uavs` UAVs spread over the three clusters, one
/// or two sensor devices, one or two base stations, up to `demands`
/// demands and the given horizon.
pub fn random_small(seed: u64, uavs: usize, demands: usize, horizon: usize) -> Result<Snapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 900.0;
    let mut nodes = Vec::new();
    let sds = rng.gen_range(1..=2);
    let bss = rng.gen_range(1..=2);
    for _ in 0..sds {
        nodes.push(ground(NodeKind::SensorDevice, rng.gen_range(0.0..80.0), rng.gen_range(0.0..400.0)));
    }
    for i in 0..uavs {
        let cluster = Cluster::ALL[i * 3 / uavs.max(1)];
        let band = match cluster {
            Cluster::Collection => 150.0..330.0,
            Cluster::Relay => 360.0..560.0,
            Cluster::Downlink => 600.0..780.0,
        };
        nodes.push(uav(
            cluster,
            rng.gen_range(band),
            rng.gen_range(0.0..400.0),
            rng.gen_range(200.0..400.0),
        ));
    }
    for _ in 0..bss {
        nodes.push(ground(NodeKind::BaseStation, rng.gen_range(width - 80.0..width), rng.gen_range(0.0..400.0)));
    }
    let n_dem = rng.gen_range(1..=demands.max(1));
    let specs = (0..n_dem)
        .map(|_| DemandSpec {
            source: NodeId(rng.gen_range(0..sds) as u32),
            destination: NodeId((sds + uavs + rng.gen_range(0..bss)) as u32),
            size_bits: rng.gen_range(300e3..700e3),
        })
        .collect();
    let mut cfg = frozen_config(nodes, uavs, 2);
    cfg.topology.d_max_m = 300.0;
    Snapshot::new(cfg, specs, horizon)
}
