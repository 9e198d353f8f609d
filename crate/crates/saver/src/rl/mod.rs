//! Model-free reactive-power control: the feeder wrapped as a decision
//! process, a replay buffer, small dense networks with hand-written
//! backpropagation, and the deterministic-policy-gradient learner on top.

pub mod agent;
pub mod buffer;
pub mod env;
pub mod nn;

pub use agent::{
    train, Agent, Checkpoint, CheckpointError, DdpgConfig, EpisodeLog, Policy, TrainConfig,
    TrainError,
};
pub use buffer::{ReplayBuffer, Transition};
pub use env::{Environment, State, StepOutcome, FAILURE_REWARD};
