use serde::{Deserialize, Serialize};

/// Extrinsic reward weights. None of these magnitudes are pinned down by a
/// reference setting; they are tuned so one straight run scores positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub progress: f64,
    pub v_target: f64,
    pub speed_scale: f64,
    pub lane: f64,
    pub collision: f64,
    pub destination: f64,
    pub time: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::lane_following()
    }
}

impl RewardWeights {
    pub fn lane_following() -> Self {
        Self { progress: 1.0, v_target: 2.0, speed_scale: 0.1, lane: 1.0, collision: 1.0, destination: 10.0, time: 0.01 }
    }

    /// Slower target and a much heavier collision penalty.
    pub fn collision_avoidance() -> Self {
        Self { v_target: 1.5, collision: 5.0, ..Self::lane_following() }
    }
}

/// Per-step quantities the reward depends on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardInputs {
    pub waypoint_advanced: bool,
    pub speed: f64,
    pub lateral_speed: f64,
    /// Unsigned distance from the route centerline.
    pub offset: f64,
    pub lane_width: f64,
    pub collided: bool,
    pub reached_destination: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub progress: f64,
    pub speed: f64,
    pub lane: f64,
    pub collision: f64,
    pub destination: f64,
    pub time: f64,
}

impl RewardComponents {
    pub const NAMES: [&'static str; 6] = ["progress", "speed", "lane", "collision", "destination", "time"];

    pub fn compute(w: &RewardWeights, s: &RewardInputs) -> Self {
        Self {
            progress: if s.waypoint_advanced { w.progress } else { 0.0 },
            speed: -w.speed_scale * ((s.speed - w.v_target).abs() + 2.0 * s.lateral_speed.abs().min(0.5)),
            lane: lane_penalty(s.offset, s.lane_width, w.lane),
            collision: if s.collided { -w.collision * s.speed.abs() } else { 0.0 },
            destination: if s.reached_destination { w.destination } else { 0.0 },
            time: -w.time,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.progress, self.speed, self.lane, self.collision, self.destination, self.time]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::NAMES.into_iter().zip(self.values())
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Zero inside a band of 20% lane width, then quadratic, saturating at half
/// a lane width.
pub fn lane_penalty(offset: f64, lane_width: f64, weight: f64) -> f64 {
    let band = 0.2 * lane_width;
    let d = offset.abs();
    if d <= band {
        return 0.0;
    }
    let z = (d - band) / (0.5 * lane_width - band);
    -weight * (z * z).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: f64 = 3.0;

    fn inputs() -> RewardInputs {
        RewardInputs {
            waypoint_advanced: false,
            speed: 2.0,
            lateral_speed: 0.0,
            offset: 0.0,
            lane_width: W,
            collided: false,
            reached_destination: false,
        }
    }

    #[test]
    fn lane_band_and_saturation() {
        assert_eq!(lane_penalty(0.1 * W, W, 1.0), 0.0);
        assert_eq!(lane_penalty(0.2 * W, W, 1.0), 0.0);
        assert_eq!(lane_penalty(0.5 * W, W, 2.0), -2.0);
        assert_eq!(lane_penalty(0.9 * W, W, 2.0), -2.0);
        // Midway through the ramp: ((0.35 - 0.2) / 0.3)^2 = 0.25.
        assert!((lane_penalty(-0.35 * W, W, 1.0) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn speed_term() {
        let w = RewardWeights::lane_following();
        let r = RewardComponents::compute(&w, &RewardInputs { speed: 3.0, lateral_speed: -2.0, ..inputs() });
        // 0.1 * (|3 - 2| + 2 * 0.5)
        assert!((r.speed + 0.2).abs() < 1e-12);
        let r = RewardComponents::compute(&w, &inputs());
        assert_eq!(r.speed, 0.0);
    }

    #[test]
    fn event_terms() {
        let w = RewardWeights::collision_avoidance();
        let r = RewardComponents::compute(&w, &RewardInputs { waypoint_advanced: true, speed: 1.2, collided: true, ..inputs() });
        assert_eq!(r.progress, w.progress);
        assert!((r.collision + 5.0 * 1.2).abs() < 1e-12);
        assert_eq!(r.destination, 0.0);
        assert_eq!(r.time, -w.time);
        let r = RewardComponents::compute(&w, &RewardInputs { reached_destination: true, ..inputs() });
        assert_eq!(r.destination, w.destination);
        assert_eq!(r.progress, 0.0);
        assert_eq!(r.total(), r.iter().map(|(_, v)| v).sum::<f64>());
    }
}
