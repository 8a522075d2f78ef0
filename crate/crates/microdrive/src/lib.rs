//! Deterministic 2-D driving simulator.
//!
//! Towns are cell grids with right-hand two-lane roads. The ego vehicle is a
//! point with kinematic speed and heading, driven by nine discrete
//! steer x throttle actions at 10 Hz. Observations are ego-centric one-hot
//! semantic crops; route waypoints only ever feed rewards and termination.

mod action;
mod config;
pub mod map;
mod render;
mod reward;
pub mod route;
mod sim;
mod traffic;

pub use action::{Action, NUM_ACTIONS, STEER, THROTTLE};
pub use config::{density_vehicles, SimConfig};
pub use map::{Cell, Dir, Pose, TownId, TownMap};
pub use render::{Observation, CLASS_CHANNELS, EGO_CHANNEL, OBS_CHANNELS, VEHICLE_CHANNEL};
pub use reward::{lane_penalty, RewardComponents, RewardInputs, RewardWeights};
pub use route::{RouteId, RouteSpec, Turn};
pub use sim::{adjudicate, Cause, Checks, EgoState, Scenario, Simulator, StepResult};
pub use traffic::{Traffic, Vehicle};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed asset: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
