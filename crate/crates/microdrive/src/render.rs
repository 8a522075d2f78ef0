use crate::map::{Cell, TownMap};
use crate::traffic::Vehicle;

/// Mutually exclusive class channels: lane agreeing with the ego heading,
/// opposing lane, lane marking, off-road, building.
pub const CLASS_CHANNELS: usize = 5;
pub const EGO_CHANNEL: usize = 5;
pub const VEHICLE_CHANNEL: usize = 6;
pub const OBS_CHANNELS: usize = 7;

const VEHICLE_RADIUS: f64 = 0.75;

/// Ego-centric semantic crop, channel-major `[C, H, W]` with 0/1 entries.
/// Forward is up; the ego sits three rows above the bottom edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub size: usize,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn channels(&self) -> usize {
        OBS_CHANNELS
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.data[(c * self.size + row) * self.size + col]
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Class index per pixel, `[H * W]`.
    pub fn class_labels(&self) -> Vec<usize> {
        let n = self.size * self.size;
        (0..n).map(|p| (0..CLASS_CHANNELS).find(|&c| self.data[c * n + p] == 1).expect("one class per pixel")).collect()
    }

    pub fn ego_row(size: usize) -> usize {
        size - 3
    }

    pub fn render(map: &TownMap, x: f64, y: f64, heading: f64, vehicles: &[Vehicle], size: usize) -> Observation {
        let n = size * size;
        let mut data = vec![0u8; OBS_CHANNELS * n];
        let (hx, hy) = (heading.cos(), heading.sin());
        // Right of the heading with y pointing down.
        let (rx, ry) = (-hy, hx);
        let ego_row = Self::ego_row(size) as f64;
        let half = size as f64 / 2.0;
        for row in 0..size {
            let fwd = ego_row - row as f64;
            for col in 0..size {
                let lat = col as f64 + 0.5 - half;
                let px = x + fwd * hx + lat * rx;
                let py = y + fwd * hy + lat * ry;
                let class = match map.cell_at(px, py) {
                    Cell::Lane(d) => {
                        let (dx, dy) = d.unit();
                        if dx * hx + dy * hy >= 0.0 {
                            0
                        } else {
                            1
                        }
                    }
                    Cell::Intersection => 0,
                    Cell::Marking => 2,
                    Cell::OffRoad => 3,
                    Cell::Building => 4,
                };
                let p = row * size + col;
                data[class * n + p] = 1;
                if fwd.abs() <= 0.5 && lat.abs() <= 0.5 {
                    data[EGO_CHANNEL * n + p] = 1;
                }
                let near = vehicles.iter().any(|v| (v.x - px).powi(2) + (v.y - py).powi(2) <= VEHICLE_RADIUS * VEHICLE_RADIUS);
                if near {
                    data[VEHICLE_CHANNEL * n + p] = 1;
                }
            }
        }
        Observation { size, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Dir, TownId};

    fn class_sum_is_one(o: &Observation) -> bool {
        let n = o.size * o.size;
        (0..n).all(|p| (0..CLASS_CHANNELS).map(|c| o.data[c * n + p] as u32).sum::<u32>() == 1)
    }

    #[test]
    fn one_hot_classes_and_empty_vehicle_channel() {
        let map = TownMap::builtin(TownId::A);
        let o = Observation::render(map, 12.5, 22.5, 0.0, &[], 16);
        assert!(class_sum_is_one(&o));
        assert!(o.channel(VEHICLE_CHANNEL).iter().all(|&v| v == 0));
        assert_eq!(o.channel(EGO_CHANNEL).iter().map(|&v| v as u32).sum::<u32>(), 2);
        // The ego stands on a lane that agrees with its heading.
        assert_eq!(o.get(0, 13, 7), 1);
    }

    #[test]
    fn forward_translation_shifts_rows() {
        let map = TownMap::builtin(TownId::A);
        for (x, y, d) in [(10.5, 22.5, Dir::East), (18.5, 30.5, Dir::South), (30.5, 18.5, Dir::West), (22.5, 10.5, Dir::North)] {
            let (ux, uy) = d.unit();
            let a = Observation::render(map, x, y, d.heading(), &[], 16);
            let b = Observation::render(map, x + ux, y + uy, d.heading(), &[], 16);
            for c in 0..CLASS_CHANNELS {
                for row in 1..16 {
                    for col in 0..16 {
                        assert_eq!(b.get(c, row, col), a.get(c, row - 1, col), "{d:?} c{c} r{row} c{col}");
                    }
                }
            }
        }
    }

    #[test]
    fn vehicle_channel_marks_traffic() {
        let map = TownMap::builtin(TownId::A);
        let v = Vehicle::parked(12.5, 17.5, Dir::East);
        let o = Observation::render(map, 12.5, 22.5, 0.0, &[v], 16);
        assert!(o.channel(VEHICLE_CHANNEL).contains(&1));
        assert!(class_sum_is_one(&o));
    }
}
