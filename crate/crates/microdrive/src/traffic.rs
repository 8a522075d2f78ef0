//! Scripted traffic: constant-speed lane following, a seeded maneuver at
//! every intersection, and a full stop whenever something is close ahead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::map::{Cell, Dir, Intersection, TownMap};

const AHEAD: f64 = 2.0;
const SIDE: f64 = 1.0;
const MIN_EGO_GAP: f64 = 5.0;
const MIN_GAP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub x: f64,
    pub y: f64,
    pub dir: Dir,
    pub stopped: bool,
    /// Never moves; used for scripted obstacles.
    pub parked: bool,
    /// Next direction and the coordinate along the current travel axis where the turn happens.
    turn: Option<(Dir, f64)>,
    block: Option<Intersection>,
}

impl Vehicle {
    pub fn parked(x: f64, y: f64, dir: Dir) -> Self {
        Self { x, y, dir, stopped: true, parked: true, turn: None, block: None }
    }

    fn along(&self) -> f64 {
        if self.dir.is_horizontal() {
            self.x
        } else {
            self.y
        }
    }

    /// Whether a point sits in this vehicle's path within `AHEAD` cells.
    fn is_blocked_by(&self, px: f64, py: f64) -> bool {
        let (ux, uy) = self.dir.unit();
        let (dx, dy) = (px - self.x, py - self.y);
        let ahead = dx * ux + dy * uy;
        let side = (dx * uy - dy * ux).abs();
        ahead > 0.0 && ahead <= AHEAD && side < SIDE
    }
}

#[derive(Clone, Debug)]
pub struct Traffic {
    pub vehicles: Vec<Vehicle>,
    speed: f64,
    rng: ChaCha8Rng,
}

impl Traffic {
    pub fn empty() -> Self {
        Self { vehicles: Vec::new(), speed: 0.0, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Places `count` vehicles on lane centers within `radius` of the ego.
    pub fn spawn(map: &TownMap, ego: (f64, f64), count: usize, radius: f64, speed: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates: Vec<(f64, f64, Dir)> = Vec::new();
        for row in 0..map.height as i64 {
            for col in 0..map.width as i64 {
                let Cell::Lane(dir) = map.cell(col, row) else { continue };
                let (rx, ry) = dir.right().unit();
                let same = |k: f64| map.cell(col + (rx * k) as i64, row + (ry * k) as i64) == Cell::Lane(dir);
                if !(same(1.0) && same(-1.0)) {
                    continue;
                }
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let d = ((x - ego.0).powi(2) + (y - ego.1).powi(2)).sqrt();
                if d <= radius && d >= MIN_EGO_GAP {
                    candidates.push((x, y, dir));
                }
            }
        }
        candidates.shuffle(&mut rng);
        let mut vehicles: Vec<Vehicle> = Vec::with_capacity(count);
        for (x, y, dir) in candidates {
            if vehicles.len() == count {
                break;
            }
            if vehicles.iter().all(|v| (v.x - x).powi(2) + (v.y - y).powi(2) >= MIN_GAP * MIN_GAP) {
                vehicles.push(Vehicle { x, y, dir, stopped: false, parked: false, turn: None, block: None });
            }
        }
        Self { vehicles, speed, rng }
    }

    pub fn park(&mut self, x: f64, y: f64, dir: Dir) {
        self.vehicles.push(Vehicle::parked(x, y, dir));
    }

    /// Advances every vehicle by one tick. Blocking is judged on positions
    /// from the start of the tick so update order does not matter.
    pub fn step(&mut self, map: &TownMap, ego: (f64, f64), dt: f64) {
        let snapshot: Vec<(f64, f64)> = self.vehicles.iter().map(|v| (v.x, v.y)).collect();
        for i in 0..self.vehicles.len() {
            let blocked = {
                let v = &self.vehicles[i];
                v.is_blocked_by(ego.0, ego.1) || snapshot.iter().enumerate().any(|(j, &(x, y))| j != i && v.is_blocked_by(x, y))
            };
            let v = &mut self.vehicles[i];
            if v.parked {
                continue;
            }
            v.stopped = blocked;
            if blocked {
                continue;
            }
            advance(v, self.speed * dt);
            let here = map.intersection_at(v.x, v.y);
            if here != v.block {
                v.block = here;
                if let Some(i) = here {
                    v.turn = choose_maneuver(map, i, v.dir, &mut self.rng).map(|d| (d, map.lane_center(i, d)));
                }
            }
        }
    }
}

fn advance(v: &mut Vehicle, dist: f64) {
    let mut left = dist;
    if let Some((next, at)) = v.turn {
        let (ux, uy) = v.dir.unit();
        let sign = ux + uy;
        let to_turn = (at - v.along()) * sign;
        if to_turn >= 0.0 && to_turn <= left {
            if v.dir.is_horizontal() {
                v.x = at;
            } else {
                v.y = at;
            }
            left -= to_turn;
            v.dir = next;
            v.turn = None;
        }
    }
    let (ux, uy) = v.dir.unit();
    v.x += ux * left;
    v.y += uy * left;
}

/// Uniform choice among straight, left and right exits that lead onto a lane.
fn choose_maneuver(map: &TownMap, i: Intersection, dir: Dir, rng: &mut impl Rng) -> Option<Dir> {
    let reach = map.lane_width as f64 + 1.5;
    let exits: Vec<Option<Dir>> = [None, Some(dir.left()), Some(dir.right())]
        .into_iter()
        .filter(|m| {
            let d = m.unwrap_or(dir);
            let (ux, uy) = d.unit();
            let (cx, cy) = (i.col as f64 + 0.5, i.row as f64 + 0.5);
            let lane = map.lane_center(i, d);
            let (x, y) = if d.is_horizontal() { (cx + ux * reach, lane) } else { (lane, cy + uy * reach) };
            map.cell_at(x, y) == Cell::Lane(d)
        })
        .collect();
    if exits.is_empty() {
        return None;
    }
    exits[rng.gen_range(0..exits.len())]
}
