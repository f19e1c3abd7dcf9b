//! Channel-aware GP-MPC for a leader–follower vehicle pair.
//!
//! The follower learns packet delivery time over the road with a Gaussian
//! process, keeps the kernel inverse of a reachable-set window up to date
//! recursively, and plans with a receding-horizon controller that trades
//! tracking against expected delay.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod channel;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod mpc;
pub mod plot;
pub mod reachable;
pub mod recinv;
pub mod sim;

pub use channel::{Bump, Channel, ChannelField, Mailbox, Packet, Step};
pub use dynamics::{Bounds, ControlInput, VehicleState};
pub use error::{Error, Result};
pub use gp::{AggregatedInput, HyperGrid, Hyperparameters, TrainingSample, TrainingSet};
pub use mpc::receding::{ClosedLoop, ControllerConfig, StepRecord};
pub use mpc::{MpcProblem, MpcSolution, MpcWeights, SolverOptions};
pub use reachable::{reach_n, IntervalBox, ReachTube};
pub use recinv::{KernelCache, PriorMean};
pub use sim::{ScenarioConfig, ScenarioSummary, ScenarioTrace};
