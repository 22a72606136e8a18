//! Value networks, replay buffers, Q-targets and the training loop.

pub mod net;
pub mod replay;
pub mod target;
pub mod train;

pub use net::{argmax, q_forward, soft_target_update, Gradients, Optimizer, ValueNet, MASKED_Q};
pub use replay::{BufferMode, ReplayBuffer, Transition};
pub use target::{ddqn_target, dqn_target, q_target_with, sgd_update, TargetKind};
pub use train::{
    train, write_metrics_csv, BootstrapMode, EpisodeRecord, Greedy, Selection, TrainConfig, TrainOutput,
    TrainedPolicies,
};
