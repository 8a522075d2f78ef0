use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::config::{density_vehicles, SimConfig};
use crate::map::{Cell, TownId, TownMap};
use crate::render::Observation;
use crate::reward::{RewardComponents, RewardInputs, RewardWeights};
use crate::route::RouteSpec;
use crate::traffic::Traffic;
use crate::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cause {
    Collision,
    WrongDirection,
    OffRoad,
    Stall,
    Destination,
    TimeLimit,
    LaneViolation,
    None,
}

impl Cause {
    pub fn name(self) -> &'static str {
        match self {
            Cause::Collision => "collision",
            Cause::WrongDirection => "wrong-direction",
            Cause::OffRoad => "off-road",
            Cause::Stall => "stall",
            Cause::Destination => "destination",
            Cause::TimeLimit => "time-limit",
            Cause::LaneViolation => "lane-violation",
            Cause::None => "none",
        }
    }

    /// A terminal cause other than reaching the destination or running out of time.
    pub fn is_failure(self) -> bool {
        !matches!(self, Cause::Destination | Cause::TimeLimit | Cause::None)
    }
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Conditions evaluated on one step, before picking a cause.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Checks {
    pub collision: bool,
    pub wrong_direction: bool,
    pub off_road: bool,
    pub stall: bool,
    pub destination: bool,
    pub time_limit: bool,
    pub lane_violation: bool,
}

/// First satisfied condition in fixed priority order.
pub fn adjudicate(c: &Checks) -> Cause {
    let ordered = [
        (c.collision, Cause::Collision),
        (c.wrong_direction, Cause::WrongDirection),
        (c.off_road, Cause::OffRoad),
        (c.stall, Cause::Stall),
        (c.destination, Cause::Destination),
        (c.time_limit, Cause::TimeLimit),
        (c.lane_violation, Cause::LaneViolation),
    ];
    ordered.into_iter().find(|(hit, _)| *hit).map_or(Cause::None, |(_, cause)| cause)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub speed: f64,
    /// Speed across the route direction; zero without a route.
    pub lateral_speed: f64,
}

/// Everything that determines an episode besides the actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub town: TownId,
    pub route: Option<RouteSpec>,
    pub density: u32,
    pub tm_seed: u64,
    pub spawn_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// Present only when a route and reward weights are attached.
    pub rewards: Option<RewardComponents>,
    pub terminal: bool,
    pub cause: Cause,
    pub waypoint_index: usize,
}

impl StepResult {
    pub fn reward(&self) -> f64 {
        self.rewards.map_or(0.0, |r| r.total())
    }
}

#[derive(Clone, Debug)]
struct Episode {
    map: &'static TownMap,
    route: Option<RouteSpec>,
    ego: EgoState,
    traffic: Traffic,
    steps: usize,
    waypoint: usize,
    slow_steps: usize,
    wrong_way_steps: usize,
    done: bool,
}

pub struct Simulator {
    config: SimConfig,
    weights: Option<RewardWeights>,
    episode: Option<Episode>,
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, weights: None, episode: None })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Attaches extrinsic reward weights; `None` makes every step reward-free.
    pub fn set_reward_weights(&mut self, weights: Option<RewardWeights>) {
        self.weights = weights;
    }

    pub fn ego(&self) -> Option<EgoState> {
        self.episode.as_ref().map(|e| e.ego)
    }

    pub fn traffic(&self) -> Option<&Traffic> {
        self.episode.as_ref().map(|e| &e.traffic)
    }

    pub fn steps(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.steps)
    }

    pub fn reset(&mut self, sc: &Scenario) -> Result<Observation> {
        let map = TownMap::builtin(sc.town);
        let count = density_vehicles(sc.density)?;
        let mut spawn_rng = ChaCha8Rng::seed_from_u64(sc.spawn_seed);
        let (x, y, heading) = match &sc.route {
            Some(route) => {
                if route.town != sc.town {
                    return Err(SimError::Config(format!("route {} belongs to {}, not {}", route.id, route.town, sc.town)));
                }
                let h = route.start_heading();
                let (x0, y0) = route.waypoints[0];
                let j = if self.config.start_jitter > 0.0 { spawn_rng.gen_range(0.0..self.config.start_jitter) } else { 0.0 };
                (x0 + j * h.cos(), y0 + j * h.sin(), h)
            }
            None => {
                let p = map.spawns[spawn_rng.gen_range(0..map.spawns.len())];
                (p.x, p.y, p.heading)
            }
        };
        let traffic = Traffic::spawn(map, (x, y), count, self.config.traffic_radius, self.config.traffic_speed, sc.tm_seed);
        let mut ep = Episode {
            map,
            route: sc.route.clone(),
            ego: EgoState { x, y, heading: wrap_angle(heading), speed: 0.0, lateral_speed: 0.0 },
            traffic,
            steps: 0,
            waypoint: 0,
            slow_steps: 0,
            wrong_way_steps: 0,
            done: false,
        };
        if let Some(route) = &ep.route {
            ep.waypoint = self.reachable_waypoint(route, 0, x, y);
        }
        let obs = self.render(&ep);
        self.episode = Some(ep);
        Ok(obs)
    }

    fn reachable_waypoint(&self, route: &RouteSpec, from: usize, x: f64, y: f64) -> usize {
        let last = route.waypoints.len() - 1;
        let r2 = self.config.waypoint_reach * self.config.waypoint_reach;
        (from + 1..=(from + self.config.waypoint_lookahead).min(last))
            .rev()
            .find(|&j| {
                let (wx, wy) = route.waypoints[j];
                (wx - x).powi(2) + (wy - y).powi(2) <= r2
            })
            .unwrap_or(from)
    }

    fn render(&self, ep: &Episode) -> Observation {
        Observation::render(ep.map, ep.ego.x, ep.ego.y, ep.ego.heading, &ep.traffic.vehicles, self.config.obs_size)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let cfg = self.config.clone();
        let mut ep = self.episode.take().ok_or_else(|| SimError::Contract("step before reset".into()))?;
        if ep.done {
            self.episode = Some(ep);
            return Err(SimError::Contract("step after terminal".into()));
        }
        ep.steps += 1;

        let ego = &mut ep.ego;
        ego.speed = (ego.speed + cfg.k_throttle * action.throttle() - cfg.k_drag * ego.speed).clamp(0.0, cfg.v_max);
        ego.heading = wrap_angle(ego.heading + cfg.k_steer * action.steer() * ego.speed);
        ego.x += ego.speed * cfg.dt * ego.heading.cos();
        ego.y += ego.speed * cfg.dt * ego.heading.sin();
        let (x, y) = (ego.x, ego.y);
        ep.traffic.step(ep.map, (x, y), cfg.dt);

        let mut advanced = false;
        let mut offset = 0.0;
        if let Some(route) = &ep.route {
            let next = self.reachable_waypoint(route, ep.waypoint, x, y);
            advanced = next > ep.waypoint;
            ep.waypoint = next;
            let psi = route.segment_heading(ep.waypoint);
            ep.ego.lateral_speed = ep.ego.speed * (ep.ego.heading - psi).sin();
            offset = route.centerline_offset(ep.waypoint, x, y);
        }

        let cell = ep.map.cell_at(x, y);
        if ep.ego.speed < cfg.stall_speed {
            ep.slow_steps += 1;
        } else {
            ep.slow_steps = 0;
        }
        if let Cell::Lane(d) = cell {
            let (dx, dy) = d.unit();
            if dx * ep.ego.heading.cos() + dy * ep.ego.heading.sin() < 0.0 {
                ep.wrong_way_steps += 1;
            } else {
                ep.wrong_way_steps = 0;
            }
        }
        let hit_vehicle = ep
            .traffic
            .vehicles
            .iter()
            .any(|v| (v.x - x).powi(2) + (v.y - y).powi(2) < cfg.collision_distance * cfg.collision_distance);
        let destination = ep.route.as_ref().is_some_and(|r| ep.waypoint == r.waypoints.len() - 1);
        let checks = Checks {
            collision: hit_vehicle || cell == Cell::Building,
            wrong_direction: ep.wrong_way_steps >= cfg.wrong_way_steps,
            off_road: cell == Cell::OffRoad || !ep.map.in_bounds(x, y),
            stall: ep.slow_steps >= cfg.stall_steps,
            destination,
            time_limit: ep.steps >= cfg.max_steps,
            lane_violation: cell == Cell::Marking,
        };
        let cause = adjudicate(&checks);
        let terminal = cause != Cause::None;
        ep.done = terminal;

        let rewards = match (&self.weights, &ep.route) {
            (Some(w), Some(_)) => Some(RewardComponents::compute(
                w,
                &RewardInputs {
                    waypoint_advanced: advanced,
                    speed: ep.ego.speed,
                    lateral_speed: ep.ego.lateral_speed,
                    offset: offset.abs(),
                    lane_width: ep.map.lane_width as f64,
                    collided: cause == Cause::Collision,
                    reached_destination: cause == Cause::Destination,
                },
            )),
            _ => None,
        };
        let result = StepResult { observation: self.render(&ep), rewards, terminal, cause, waypoint_index: ep.waypoint };
        self.episode = Some(ep);
        Ok(result)
    }

    /// Moves the ego directly, for scripted scenarios and tests.
    pub fn place_ego(&mut self, state: EgoState) -> Result<()> {
        let ep = self.episode.as_mut().ok_or_else(|| SimError::Contract("place before reset".into()))?;
        ep.ego = EgoState { heading: wrap_angle(state.heading), ..state };
        Ok(())
    }

    /// Adds a stationary obstacle vehicle, for scripted scenarios and tests.
    pub fn park_vehicle(&mut self, x: f64, y: f64, dir: crate::Dir) -> Result<()> {
        let ep = self.episode.as_mut().ok_or_else(|| SimError::Contract("park before reset".into()))?;
        ep.traffic.park(x, y, dir);
        Ok(())
    }
}
