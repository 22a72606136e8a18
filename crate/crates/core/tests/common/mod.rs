//! Reference implementations and fixtures shared by the integration tests
//! and the acceptance target.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lain_core::env::{Env, EnvConfig, RandomPolicy};
use lain_core::experiments::{emit_plot_data, run_matrix, ExperimentConfig, PLOT_FILES};
use lain_core::learner::{Transition, ValueNet};
use lain_core::ledger::chain::encode_chain;
use lain_core::ledger::CryptoKind;
use lain_core::oracle::Snapshot;
use lain_core::topology::{Cluster, NodeId, NodeKind, NodeSpec};

/// Relative error, with an absolute floor for values near zero.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Channel quantities evaluated to 30+ digits with arbitrary-precision
/// arithmetic, at the default parameters (2.4 GHz, rho 5.0188 / 0.3511,
/// excess 0.1 / 21 dB, 40 dBm transmit, -110 dBm noise).
#[allow(clippy::excessive_precision)]
pub mod channel_ref {
    /// LoS probability at zero horizontal distance, 100 m height difference.
    pub const LOS_OVERHEAD: f64 = 0.999_999_999_999_447_160_382_853_887_965_8;
    /// LoS probability at 100 m horizontal distance, equal heights.
    pub const LOS_LEVEL_100: f64 = 0.033_076_652_873_946_499_588_535_47;
    /// LoS probability at 300 m horizontal distance, 200 m height difference.
    pub const LOS_300_200: f64 = 0.999_786_847_852_968_076_932_93;
    /// Free-space loss at 100 m.
    pub const FSPL_100: f64 = 80.045_997_020_280_796_608_399_255_238_267_28;
    /// Ground-air loss at 500 m with LoS probability 0.3.
    pub const GA_LOSS_500_03: f64 = 108.755_397_107_001_172_704_124_477_3;
    /// SNR, spectral efficiency and rate at 2 MHz for a loss of `FSPL_100`.
    pub const SNR_FSPL_100: f64 = 9_894_646.840_072_047_992_566;
    pub const SE_FSPL_100: f64 = 23.238_216_930_621_953_150_455_697_97;
    pub const RATE_FSPL_100_2MHZ: f64 = 46_476_433.861_243_906_300_911_395_94;
    /// Ground-air hop over 400 m horizontal, 300 m vertical (500 m slant):
    /// LoS probability, loss, rate at 2 MHz and delay of 500 kbit.
    pub const HOP_LOS: f64 = 0.999_930_194_609_960_353_562_661_527_734_469_478_676;
    pub const HOP_LOSS: f64 = 94.126_856_039_653_001_314_664_851_41;
    pub const HOP_RATE: f64 = 37_121_320.796_902_484_714_050_88;
    pub const HOP_DELAY: f64 = 0.013_469_348_322_372_233_919_012_955_04;
}

/// Spectral efficiency between two node specs, computed from geometry and the
/// channel parameters without the library's channel or topology code.
fn spectral_efficiency(cfg: &EnvConfig, a: &NodeSpec, b: &NodeSpec) -> f64 {
    let p = &cfg.channel;
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    let dz = a.position[2] - b.position[2];
    let horizontal = (dx * dx + dy * dy).sqrt();
    let slant = (horizontal * horizontal + dz * dz).sqrt();
    let air = a.kind == NodeKind::Uav && b.kind == NodeKind::Uav;
    let fs = 20.0 * (4.0 * std::f64::consts::PI * p.carrier_frequency_hz * slant / p.light_speed_mps).log10();
    let (loss, noise) = if air {
        (fs, p.air_noise_power_dbm.unwrap_or(p.noise_power_dbm))
    } else {
        let theta = if horizontal <= 0.0 {
            90.0
        } else {
            (dz.abs() / horizontal).atan().to_degrees()
        };
        let pl = 1.0 / (1.0 + p.rho1 * (-p.rho2 * (theta - p.rho1)).exp());
        (fs + pl * p.excess_los_db + (1.0 - pl) * p.excess_nlos_db, p.noise_power_dbm)
    };
    let snr = 10f64.powf((p.tx_power_dbm - loss - noise) / 10.0);
    (1.0 + snr).log2()
}

fn slant(a: &NodeSpec, b: &NodeSpec) -> f64 {
    (0..3).map(|i| (a.position[i] - b.position[i]).powi(2)).sum::<f64>().sqrt()
}

/// Brute-force minimum total delay by per-demand walk enumeration and
/// branch-and-bound over walk combinations. `None` when no assignment
/// delivers every demand within the horizon.
pub fn second_enumerator(s: &Snapshot) -> Option<f64> {
    let cfg = &s.config;
    let nodes = cfg.topology.nodes.as_ref().expect("explicit nodes");
    let bw = cfg.channel.node_bandwidth_hz;
    let bs_allowed: Vec<usize> = (0..nodes.len())
        .filter(|&i| nodes[i].kind == NodeKind::BaseStation)
        .take(cfg.b_max)
        .collect();

    let moves_from = |at: usize, dest: usize| -> Vec<usize> {
        let a = &nodes[at];
        match a.kind {
            NodeKind::SensorDevice => {
                let mut best: Option<(f64, usize)> = None;
                for (j, b) in nodes.iter().enumerate() {
                    if b.kind != NodeKind::Uav || b.cluster != Some(Cluster::Collection) {
                        continue;
                    }
                    let d = slant(a, b);
                    if d <= cfg.topology.ground_range_m && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
                best.map(|b| vec![b.1]).unwrap_or_default()
            }
            NodeKind::Uav => {
                let mut out: Vec<usize> = (0..nodes.len())
                    .filter(|&j| {
                        j != at && nodes[j].kind == NodeKind::Uav && {
                            let d = slant(a, &nodes[j]);
                            d <= cfg.topology.d_max_m && d >= cfg.topology.d_min_m
                        }
                    })
                    .take(cfg.k_max)
                    .collect();
                if a.cluster == Some(Cluster::Downlink)
                    && bs_allowed.contains(&dest)
                    && slant(a, &nodes[dest]) <= cfg.topology.ground_range_m
                {
                    out.push(dest);
                }
                out
            }
            NodeKind::BaseStation => Vec::new(),
        }
    };

    let demands: Vec<(usize, usize, f64)> = s
        .demands()
        .iter()
        .map(|d| (d.source.0 as usize, d.destination.0 as usize, d.size_bits))
        .collect();

    // Every walk of each demand that ends at its destination within the
    // horizon, with its cost when it has the sender's whole bandwidth.
    let mut walks: Vec<Vec<(f64, Vec<usize>)>> = Vec::new();
    for &(src, dest, size) in &demands {
        let mut found = Vec::new();
        let mut stack = vec![(vec![src], 0.0)];
        while let Some((w, cost)) = stack.pop() {
            let at = *w.last().unwrap();
            if at == dest {
                found.push((cost, w));
                continue;
            }
            if w.len() > s.horizon {
                continue;
            }
            for next in moves_from(at, dest) {
                let se = spectral_efficiency(cfg, &nodes[at], &nodes[next]);
                let mut w2 = w.clone();
                w2.push(next);
                stack.push((w2, cost + size / (bw * se)));
            }
        }
        if found.is_empty() {
            return None;
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        walks.push(found);
    }

    let joint = |chosen: &[&Vec<usize>]| -> Option<f64> {
        let steps = chosen.iter().map(|w| w.len() - 1).max().unwrap_or(0);
        let mut total = 0.0;
        for t in 0..steps {
            let mut by_sender: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (d, w) in chosen.iter().enumerate() {
                if t + 1 < w.len() {
                    by_sender.entry(w[t]).or_default().push(d);
                }
            }
            for (from, ds) in &by_sender {
                let bits: f64 = ds.iter().map(|&d| demands[d].2).sum();
                for &d in ds {
                    let share = demands[d].2 / bits * bw;
                    let se = spectral_efficiency(cfg, &nodes[*from], &nodes[chosen[d][t + 1]]);
                    total += demands[d].2 / (share * se);
                }
            }
            let mut load: BTreeMap<usize, usize> = BTreeMap::new();
            for (d, w) in chosen.iter().enumerate() {
                if t + 1 < w.len() && w[t + 1] != demands[d].1 {
                    *load.entry(w[t + 1]).or_default() += 1;
                }
            }
            if load.values().any(|&n| n > cfg.traffic.queue_capacity) {
                return None;
            }
        }
        Some(total)
    };

    let min_rest: Vec<f64> = (0..walks.len())
        .map(|d| walks[d..].iter().map(|w| w[0].0).sum())
        .chain(std::iter::once(0.0))
        .collect();
    let mut best = f64::INFINITY;
    let mut chosen: Vec<&Vec<usize>> = Vec::new();
    fn search<'a>(
        d: usize,
        lower: f64,
        walks: &'a [Vec<(f64, Vec<usize>)>],
        min_rest: &[f64],
        chosen: &mut Vec<&'a Vec<usize>>,
        best: &mut f64,
        joint: &dyn Fn(&[&Vec<usize>]) -> Option<f64>,
    ) {
        if d == walks.len() {
            if let Some(c) = joint(chosen) {
                *best = best.min(c);
            }
            return;
        }
        for (cost, w) in &walks[d] {
            if lower + cost + min_rest[d + 1] >= *best {
                break;
            }
            chosen.push(w);
            search(d + 1, lower + cost, walks, min_rest, chosen, best, joint);
            chosen.pop();
        }
    }
    search(0, 0.0, &walks, &min_rest, &mut chosen, &mut best, &joint);
    best.is_finite().then_some(best)
}

/// A random network with random biases as well as weights.
pub fn random_net(rng: &mut ChaCha8Rng) -> ValueNet {
    let mut dims = vec![rng.gen_range(2..7)];
    for _ in 0..rng.gen_range(1..3) {
        dims.push(rng.gen_range(3..9));
    }
    dims.push(rng.gen_range(2..6));
    let mut net = ValueNet::new(&dims, rng).unwrap();
    let normal = Normal::new(0.0, 0.5).unwrap();
    let params: Vec<f64> = (0..net.parameter_count()).map(|_| normal.sample(rng)).collect();
    net.set_flat(&params).unwrap();
    net
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Worst relative error between analytic and central-difference gradients
/// of the batch loss of one random net, as
/// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` in the
/// Euclidean norm.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&mut rng);
    let batch = rng.gen_range(1..6);
    let inputs: Vec<Vec<f64>> = (0..batch).map(|_| random_vec(&mut rng, net.input_dim())).collect();
    let actions: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..net.output_dim())).collect();
    let targets = random_vec(&mut rng, batch);
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let (_, g) = net.loss_and_gradients(&xs, &actions, &targets).unwrap();
    let analytic = g.flat();
    let theta = net.flat();
    let h = 1e-6;
    let mut probe = net.clone();
    let mut loss_at = |params: &[f64]| {
        probe.set_flat(params).unwrap();
        probe.loss_and_gradients(&xs, &actions, &targets).unwrap().0
    };
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        let up = loss_at(&p);
        p[i] = theta[i] - h;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// A random batch for `online`'s shape; some samples terminal, masks random
/// with at least one valid slot.
pub fn random_transitions(rng: &mut ChaCha8Rng, net: &ValueNet, n: usize) -> Vec<Transition> {
    let k = net.output_dim();
    (0..n)
        .map(|_| {
            let mut mask_next: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.6)).collect();
            let keep = rng.gen_range(0..k);
            mask_next[keep] = true;
            Transition {
                o: random_vec(rng, net.input_dim()),
                a: rng.gen_range(0..k),
                r: rng.gen_range(-2.0..0.0),
                o_next: random_vec(rng, net.input_dim()),
                mask_next,
                next_agent: None,
                done: rng.gen_bool(0.2),
                mask: vec![true; k],
                destination: NodeId(0),
            }
        })
        .collect()
}

/// Ledger-enabled scenario with real signatures, run under random routing
/// until the chain holds `blocks` blocks.
pub fn committed_chain(blocks: usize, seed: u64) -> (Vec<u8>, lain_core::ledger::Crypto) {
    let mut cfg = EnvConfig::default();
    cfg.ledger.crypto = CryptoKind::Real;
    cfg.steps_per_episode = 10_000;
    let mut env = Env::new(cfg, seed).unwrap();
    env.reset(0).unwrap();
    let mut policy = RandomPolicy::new(seed);
    while env.ledger().unwrap().chain().len() < blocks {
        let d = env.decide(&mut policy).unwrap();
        env.step(&d).unwrap();
    }
    let ledger = env.ledger().unwrap();
    (encode_chain(&ledger.chain()[..blocks]), ledger.crypto().clone())
}

/// Flips `flips` random single bits of `bytes`, one at a time, and counts the
/// mutations `verify` reports as tampered.
pub fn tamper_detections(bytes: &[u8], flips: usize, seed: u64, mut tampered: impl FnMut(&[u8]) -> bool) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut copy = bytes.to_vec();
    let mut detected = 0;
    for _ in 0..flips {
        let bit = rng.gen_range(0..bytes.len() * 8);
        copy[bit / 8] ^= 1 << (bit % 8);
        detected += usize::from(tampered(&copy));
        copy[bit / 8] ^= 1 << (bit % 8);
    }
    detected
}

/// Desk-scale scenario with churn, streaming traffic and the per-step
/// conservation audit. Returns the number of audit failures over `steps`
/// and the number of joins and exits seen.
pub fn conservation_run(seed: u64, steps: u64) -> (usize, usize) {
    let mut cfg = EnvConfig::default();
    cfg.ledger.crypto = CryptoKind::Fast;
    cfg.ledger.churn.exit_probability = 0.05;
    cfg.ledger.churn.rejoin_probability = 0.3;
    cfg.ledger.churn.silent_probability = 0.02;
    cfg.steps_per_episode = steps;
    cfg.audit = true;
    let mut env = Env::new(cfg, seed).unwrap();
    env.reset(0).unwrap();
    let mut policy = RandomPolicy::new(seed);
    let mut violations = 0;
    let mut churn = 0;
    while !env.is_done() {
        let d = env.decide(&mut policy).unwrap();
        match env.step(&d) {
            Ok(r) => churn += r.joined.len() + r.departed.len(),
            Err(lain_core::Error::ConservationViolation { .. }) => violations += 1,
            Err(e) => panic!("step failed: {e}"),
        }
    }
    let m = env.metrics();
    if m.generated != m.delivered + m.dropped + m.expired + m.in_network {
        violations += 1;
    }
    (violations, churn)
}

/// Parameters `(seed, uavs, max demands, horizon)` of the `i`-th random
/// equivalence instance.
pub fn equivalence_case(i: u64) -> (u64, usize, usize, usize) {
    let uavs = 3 + (i % 4) as usize;
    let demands = 1 + (i / 4 % 2) as usize;
    let horizon = 5 + (i % 4) as usize;
    (1000 + i, uavs, demands, horizon)
}

pub const TINY: &str = include_str!("../../../../configs/tiny.toml");

/// Runs the tiny configuration into `out` and returns every metrics CSV it
/// wrote, by name.
pub fn run_tiny(out: &Path, episodes: u64) -> Vec<(String, Vec<u8>)> {
    let mut cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![3];
    cfg.train.episodes = episodes;
    let table = run_matrix(&cfg, 1).unwrap();
    emit_plot_data(&table, out).unwrap();
    ["training.csv", "evaluation.csv", "runs.csv"]
        .into_iter()
        .chain(PLOT_FILES.iter().copied())
        .map(|f| (f.to_string(), std::fs::read(out.join(f)).unwrap()))
        .collect()
}
