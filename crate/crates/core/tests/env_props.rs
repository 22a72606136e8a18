mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use lain_core::channel::{
    allocate_bandwidth, free_space_loss_db, hop_delay_s, los_probability, path_loss_db, shannon_rate_bps,
    ChannelParams, LinkKind,
};
use lain_core::env::RewardMode;
use lain_core::instances::six_uav_snapshots;
use lain_core::oracle::{solve_exact, OraclePolicy, Snapshot, Solution};
use lain_core::topology::NodeId;
use lain_core::traffic::DemandId;

#[test]
fn conservation_holds_under_churn() {
    for seed in 0..20 {
        let (violations, churn) = common::conservation_run(seed, 500);
        assert_eq!(violations, 0, "seed {seed}");
        assert!(churn > 0, "seed {seed}: no joins or exits");
    }
}

/// Replays `plan` on `s` and returns the summed learner signal and the total
/// delivered delay.
fn replay(s: &Snapshot, plan: Vec<BTreeMap<DemandId, NodeId>>, mode: RewardMode) -> (f64, f64) {
    let sol = Solution {
        plan,
        paths: Vec::new(),
        delays: Vec::new(),
        total_delay_s: 0.0,
        search_delay_s: 0.0,
        states_explored: 0,
    };
    let mut env = s.env().unwrap();
    env.set_reward_mode(mode);
    env.reset(0).unwrap();
    let mut policy = OraclePolicy::new(&sol);
    let mut ret = 0.0;
    while !env.is_done() {
        let d = env.decide(&mut policy).unwrap();
        ret += env.step(&d).unwrap().outcomes.iter().map(|o| o.signal).sum::<f64>();
    }
    let m = env.metrics();
    assert_eq!(m.delivered, s.demands().len() as u64);
    (ret, m.total_delay_s)
}

/// With two demands, the delay-optimal plan splits them across the two rows
/// of the six-UAV instance, yet the shaped return prefers sending both along
/// the same row. The base return agrees with the delay ordering.
#[test]
fn shaped_return_prefers_the_shared_row_over_the_delay_optimum() {
    let s = &six_uav_snapshots().unwrap()[3];
    let opt = solve_exact(s).unwrap();
    let straight: Vec<BTreeMap<DemandId, NodeId>> = [1, 3, 5, 7]
        .iter()
        .map(|&n| BTreeMap::from([(0, NodeId(n)), (1, NodeId(n))]))
        .collect();
    assert_ne!(opt.paths[0], opt.paths[1]);
    let (shaped_opt, delay_opt) = replay(s, opt.plan.clone(), RewardMode::Sherb);
    let (shaped_straight, delay_straight) = replay(s, straight.clone(), RewardMode::Sherb);
    assert_eq!(delay_opt, opt.total_delay_s);
    assert!(delay_opt < delay_straight);
    assert!(shaped_straight > shaped_opt, "{shaped_straight} vs {shaped_opt}");
    let (base_opt, _) = replay(s, opt.plan, RewardMode::Base);
    let (base_straight, _) = replay(s, straight, RewardMode::Base);
    assert!(base_opt > base_straight);
}

proptest! {
    #[test]
    fn los_probability_is_a_probability_rising_with_elevation(
        h in 1.0f64..5_000.0, z1 in 0.0f64..1_000.0, dz in 0.0f64..1_000.0
    ) {
        let p = ChannelParams::default();
        let low = los_probability(h, z1, &p);
        let high = los_probability(h, z1 + dz, &p);
        prop_assert!((0.0..=1.0).contains(&low));
        prop_assert!(high >= low);
    }

    #[test]
    fn ground_air_loss_lies_between_los_and_nlos(d in 1.0f64..20_000.0, pr in 0.0f64..=1.0) {
        let p = ChannelParams::default();
        let fs = free_space_loss_db(d, &p);
        let l = path_loss_db(d, pr, LinkKind::GroundAir, &p).unwrap();
        prop_assert!(l >= fs + p.excess_los_db - 1e-9 && l <= fs + p.excess_nlos_db + 1e-9);
        prop_assert_eq!(path_loss_db(d, pr, LinkKind::AirAir, &p).unwrap(), fs);
    }

    #[test]
    fn bandwidth_shares_sum_to_the_total(sizes in prop::collection::vec(1.0f64..1e7, 1..20)) {
        let queued: Vec<(u64, f64)> = sizes.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
        let shares = allocate_bandwidth(&queued, 2e6);
        let total: f64 = shares.values().sum();
        prop_assert!(common::rel(total, 2e6) < 1e-12);
        for w in queued.windows(2) {
            prop_assert_eq!(w[0].1 < w[1].1, shares[&w[0].0] < shares[&w[1].0]);
        }
    }

    #[test]
    fn rate_falls_with_loss_and_delay_scales_with_size(l in 40.0f64..200.0, extra in 0.1f64..50.0, bits in 1.0f64..1e7) {
        let p = ChannelParams::default();
        let r = shannon_rate_bps(2e6, l, &p);
        prop_assert!(shannon_rate_bps(2e6, l + extra, &p) < r);
        let d = hop_delay_s(bits, r).unwrap();
        prop_assert!(common::rel(hop_delay_s(2.0 * bits, r).unwrap(), 2.0 * d) < 1e-12);
    }
}
