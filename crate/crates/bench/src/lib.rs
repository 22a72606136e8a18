//! Fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lain_core::env::{Env, EnvConfig, RandomPolicy};
use lain_core::learner::ValueNet;
use lain_core::ledger::{Block, Crypto, CryptoKind};

/// Desk-scale scenario with the ledger on and the given signature scheme.
pub fn desk_env(crypto: CryptoKind, seed: u64) -> Env {
    let mut cfg = EnvConfig::default();
    cfg.ledger.crypto = crypto;
    cfg.steps_per_episode = 1_000_000;
    let mut env = Env::new(cfg, seed).expect("default config is valid");
    env.reset(0).expect("reset");
    env
}

/// A network with the default hidden layers, sized for the desk scenario.
pub fn desk_net(seed: u64) -> ValueNet {
    let layout = EnvConfig::default().layout();
    let dims = [layout.input_dim(), 64, 64, layout.action_dim()];
    ValueNet::new(&dims, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid dims")
}

/// The first `blocks` blocks committed by the desk scenario under random
/// routing.
pub fn committed_chain(blocks: usize, crypto: CryptoKind) -> (Vec<Block>, Crypto) {
    let mut env = desk_env(crypto, 1);
    let mut policy = RandomPolicy::new(1);
    while env.ledger().expect("ledger on").chain().len() < blocks {
        let d = env.decide(&mut policy).expect("random policy is valid");
        env.step(&d).expect("step");
    }
    let ledger = env.ledger().expect("ledger on");
    (ledger.chain()[..blocks].to_vec(), ledger.crypto().clone())
}
