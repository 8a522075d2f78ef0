use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

/// Vehicle dynamics, termination thresholds and traffic settings.
///
/// Units: cells, seconds. One cell is treated as one metre, so the stall
/// threshold of 1 km/h is `1 / 3.6` cells/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub k_throttle: f64,
    pub k_drag: f64,
    pub k_steer: f64,
    pub v_max: f64,
    pub stall_speed: f64,
    pub stall_steps: usize,
    pub max_steps: usize,
    pub wrong_way_steps: usize,
    pub collision_distance: f64,
    pub traffic_speed: f64,
    pub traffic_radius: f64,
    /// Distance at which a waypoint counts as reached.
    pub waypoint_reach: f64,
    /// How many waypoints ahead of the current index are searched.
    pub waypoint_lookahead: usize,
    pub obs_size: usize,
    /// Maximum forward jitter of a route start, drawn from the spawn seed.
    pub start_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            k_throttle: 1.0,
            k_drag: 0.1,
            k_steer: 0.1,
            v_max: 4.0,
            stall_speed: 1.0 / 3.6,
            stall_steps: 600,
            max_steps: 1000,
            wrong_way_steps: 20,
            collision_distance: 1.0,
            traffic_speed: 2.0,
            traffic_radius: 15.0,
            waypoint_reach: 1.5,
            waypoint_lookahead: 4,
            obs_size: 16,
            start_jitter: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("k_throttle", self.k_throttle),
            ("v_max", self.v_max),
            ("collision_distance", self.collision_distance),
            ("waypoint_reach", self.waypoint_reach),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        if self.obs_size < 4 || self.max_steps == 0 || self.waypoint_lookahead == 0 {
            return Err(SimError::Config("obs_size >= 4, max_steps > 0 and waypoint_lookahead > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.start_jitter) {
            return Err(SimError::Config("start_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Traffic vehicles spawned for a density key. Keys keep their full-scale
/// names (vehicles within 150 m); the small towns hold proportionally fewer.
pub fn density_vehicles(density: u32) -> Result<usize> {
    match density {
        0 => Ok(0),
        5 => Ok(2),
        10 => Ok(4),
        20 => Ok(8),
        _ => Err(SimError::Config(format!("traffic density {density} is not one of 0, 5, 10, 20"))),
    }
}
