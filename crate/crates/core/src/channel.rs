//! Air-to-ground and air-to-air link model: LoS probability, path loss,
//! size-proportional bandwidth split, Shannon rate and transmission delay.
//!
//! Everything here is a pure function of its arguments.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{horizontal_distance, distance, NodeId, NodeKind, Topology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    pub carrier_frequency_hz: f64,
    pub light_speed_mps: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub excess_los_db: f64,
    pub excess_nlos_db: f64,
    pub noise_power_dbm: f64,
    /// Overrides `noise_power_dbm` on UAV-to-UAV links when set.
    pub air_noise_power_dbm: Option<f64>,
    pub tx_power_dbm: f64,
    /// Total bandwidth of each transmitting node (SDs and UAVs).
    pub node_bandwidth_hz: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            carrier_frequency_hz: 2.4e9,
            light_speed_mps: 3.0e8,
            rho1: 5.0188,
            rho2: 0.3511,
            excess_los_db: 0.1,
            excess_nlos_db: 21.0,
            noise_power_dbm: -110.0,
            air_noise_power_dbm: None,
            tx_power_dbm: 40.0,
            node_bandwidth_hz: 2.0e6,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_frequency_hz > 0.0 && self.light_speed_mps > 0.0) {
            return Err(Error::Config("channel: frequency and light speed must be positive".into()));
        }
        if !(self.excess_nlos_db >= self.excess_los_db && self.excess_los_db >= 0.0) {
            return Err(Error::Config("channel: need excess_nlos_db >= excess_los_db >= 0".into()));
        }
        if !(self.rho2 > 0.0) {
            return Err(Error::Config("channel: rho2 must be positive".into()));
        }
        if !(self.node_bandwidth_hz > 0.0) {
            return Err(Error::Config("channel: node bandwidth must be positive".into()));
        }
        Ok(())
    }

    fn noise_dbm(&self, kind: LinkKind) -> f64 {
        match (kind, self.air_noise_power_dbm) {
            (LinkKind::AirAir, Some(n)) => n,
            _ => self.noise_power_dbm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    GroundAir,
    AirAir,
}

/// Per-link, per-demand statistics for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub path_loss_db: f64,
    pub los_probability: f64,
    pub rate_bps: f64,
    pub delay_s: f64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Probability of a line-of-sight path for the given horizontal distance and
/// height difference. A zero horizontal distance is a 90 degree elevation.
pub fn los_probability(horizontal_dist_m: f64, height_diff_m: f64, p: &ChannelParams) -> f64 {
    let elevation_deg = if horizontal_dist_m <= 0.0 {
        90.0
    } else {
        (180.0 / PI) * (height_diff_m.abs() / horizontal_dist_m).atan()
    };
    1.0 / (1.0 + p.rho1 * (-p.rho2 * (elevation_deg - p.rho1)).exp())
}

/// Free-space loss `20 log10(4 pi f d / c)`.
pub fn free_space_loss_db(dist_m: f64, p: &ChannelParams) -> f64 {
    20.0 * (4.0 * PI * p.carrier_frequency_hz * dist_m / p.light_speed_mps).log10()
}

/// Path loss with the expected LoS/NLoS excess term on ground-air links.
pub fn path_loss_db(dist_m: f64, los_prob: f64, kind: LinkKind, p: &ChannelParams) -> Result<f64> {
    if !(dist_m > 0.0) {
        return Err(Error::DegenerateLink(dist_m));
    }
    let fs = free_space_loss_db(dist_m, p);
    Ok(match kind {
        LinkKind::AirAir => fs,
        LinkKind::GroundAir => {
            fs + los_prob * (p.excess_los_db - p.excess_nlos_db) + p.excess_nlos_db
        }
    })
}

/// Size-proportional split of `total_bw_hz` across queued demands, given as
/// `(demand id, size in bits)` pairs.
pub fn allocate_bandwidth(queued: &[(u64, f64)], total_bw_hz: f64) -> BTreeMap<u64, f64> {
    let total_bits: f64 = queued.iter().map(|&(_, s)| s).sum();
    queued
        .iter()
        .map(|&(id, size)| (id, size / total_bits * total_bw_hz))
        .collect()
}

/// Received SNR (linear) for a link with the given loss.
pub fn snr(path_loss_db: f64, kind: LinkKind, p: &ChannelParams) -> f64 {
    let rx_w = dbm_to_watts(p.tx_power_dbm) * 10f64.powf(-path_loss_db / 10.0);
    rx_w / dbm_to_watts(p.noise_dbm(kind))
}

pub fn spectral_efficiency(path_loss_db: f64, kind: LinkKind, p: &ChannelParams) -> f64 {
    (1.0 + snr(path_loss_db, kind, p)).log2()
}

/// Shannon capacity on a ground-air link with the default noise floor.
pub fn shannon_rate_bps(bw_hz: f64, path_loss_db: f64, p: &ChannelParams) -> f64 {
    shannon_rate_on(bw_hz, path_loss_db, LinkKind::GroundAir, p)
}

pub fn shannon_rate_on(bw_hz: f64, path_loss_db: f64, kind: LinkKind, p: &ChannelParams) -> f64 {
    bw_hz * spectral_efficiency(path_loss_db, kind, p)
}

/// Time to push `demand_bits` through a link at `rate_bps`.
pub fn hop_delay_s(demand_bits: f64, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::ZeroRate {
            from: NodeId(u32::MAX),
            to: NodeId(u32::MAX),
        });
    }
    Ok(demand_bits / rate_bps)
}

/// Parallel-transmission delay of a node for one step: the slowest of the
/// demands it forwarded, as `(bits, rate)` pairs.
pub fn parallel_step_delay(forwarded: &[(f64, f64)]) -> Result<f64> {
    forwarded
        .iter()
        .map(|&(bits, rate)| hop_delay_s(bits, rate))
        .try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
}

/// Loss and efficiency of one directed link, independent of bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkQuality {
    pub kind: LinkKind,
    pub path_loss_db: f64,
    pub los_probability: f64,
    /// `log2(1 + SNR)` in bit/s/Hz.
    pub spectral_efficiency: f64,
}

/// Evaluates the channel between two nodes of a topology.
pub fn link_quality(topo: &Topology, from: NodeId, to: NodeId, p: &ChannelParams) -> Result<LinkQuality> {
    let a = topo.position(from);
    let b = topo.position(to);
    let both_air = topo.nodes[from.index()].kind == NodeKind::Uav
        && topo.nodes[to.index()].kind == NodeKind::Uav;
    let kind = if both_air {
        LinkKind::AirAir
    } else {
        LinkKind::GroundAir
    };
    let los = match kind {
        LinkKind::AirAir => 1.0,
        LinkKind::GroundAir => los_probability(horizontal_distance(&a, &b), a[2] - b[2], p),
    };
    let loss = path_loss_db(distance(&a, &b), los, kind, p)?;
    Ok(LinkQuality {
        kind,
        path_loss_db: loss,
        los_probability: los,
        spectral_efficiency: spectral_efficiency(loss, kind, p),
    })
}
