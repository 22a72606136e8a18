mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lain_core::learner::{argmax, ddqn_target, dqn_target, q_forward, soft_target_update, Transition, MASKED_Q};

#[test]
fn backprop_matches_central_differences() {
    for seed in 0..100 {
        let err = common::gradient_check(seed);
        assert!(err < 1e-4, "net {seed}: relative error {err:e}");
    }
}

#[test]
fn ddqn_equals_dqn_when_online_is_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let net = common::random_net(&mut rng);
        let batch = common::random_transitions(&mut rng, &net, 16);
        let refs: Vec<&Transition> = batch.iter().collect();
        let a = ddqn_target(&refs, &net, &net.clone(), 0.9).unwrap();
        let b = dqn_target(&refs, &net, 0.9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn terminal_samples_target_their_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = common::random_net(&mut rng);
    let batch = common::random_transitions(&mut rng, &net, 64);
    let refs: Vec<&Transition> = batch.iter().collect();
    let y = ddqn_target(&refs, &net, &net, 0.95).unwrap();
    for (t, y) in batch.iter().zip(y) {
        if t.done {
            assert_eq!(y, t.r);
        }
    }
}

proptest! {
    #[test]
    fn masked_argmax_is_valid(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = common::random_net(&mut rng);
        let t = &common::random_transitions(&mut rng, &net, 1)[0];
        let q = q_forward(&net, &t.o_next, &t.mask_next).unwrap();
        let a = argmax(&q).unwrap();
        prop_assert!(t.mask_next[a]);
        for (v, &ok) in q.iter().zip(&t.mask_next) {
            prop_assert_eq!(ok, *v != MASKED_Q);
        }
    }

    #[test]
    fn soft_update_interpolates(seed in 0u64..10_000, tau in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = common::random_net(&mut rng);
        let mut target = online.clone();
        let noise = common::random_vec(&mut rng, online.parameter_count());
        target.set_flat(&noise).unwrap();
        let before = target.flat();
        soft_target_update(&online, &mut target, tau).unwrap();
        for ((o, b), a) in online.flat().iter().zip(&before).zip(target.flat()) {
            prop_assert!((a - (tau * o + (1.0 - tau) * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_step_lowers_loss_for_small_rates(seed in 0u64..2_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = common::random_net(&mut rng);
        let x = common::random_vec(&mut rng, net.input_dim());
        let (loss, g) = net.loss_and_gradients(&[&x], &[0], &[1.0]).unwrap();
        net.apply_gradients(&g, 1e-4);
        let (after, _) = net.loss_and_gradients(&[&x], &[0], &[1.0]).unwrap();
        prop_assert!(after <= loss + 1e-15);
    }
}
