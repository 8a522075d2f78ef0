//! Evaluation routes.
//!
//! Route files list polyline vertices in cell units:
//!
//! ```text
//! microdrive-routes 1
//! town Town-A
//! route <id> <open|closed> <forward|clockwise|counterclockwise>
//! <x> <y>
//! ...
//! end
//! ```
//!
//! A closed route returns to its first vertex; the closing vertex is implied.
//! Vertices are densified to one waypoint per cell of travel.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::map::{TownId, TownMap};
use crate::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteId {
    Straight,
    LeftLoop,
    RightLoop,
    TwoTurn,
}

impl RouteId {
    pub const ALL: [RouteId; 4] = [RouteId::Straight, RouteId::LeftLoop, RouteId::RightLoop, RouteId::TwoTurn];

    pub fn name(self) -> &'static str {
        match self {
            RouteId::Straight => "straight",
            RouteId::LeftLoop => "left-loop",
            RouteId::RightLoop => "right-loop",
            RouteId::TwoTurn => "two-turn",
        }
    }
}

impl fmt::Display for RouteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouteId {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        RouteId::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| SimError::Config(format!("unknown route `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Travel {
    Forward,
    Clockwise,
    Counterclockwise,
}

impl Travel {
    fn name(self) -> &'static str {
        match self {
            Travel::Forward => "forward",
            Travel::Clockwise => "clockwise",
            Travel::Counterclockwise => "counterclockwise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Turn {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteSpec {
    pub id: RouteId,
    pub town: TownId,
    pub closed: bool,
    pub travel: Travel,
    pub vertices: Vec<(f64, f64)>,
    /// Dense waypoints; closed routes end where they start.
    pub waypoints: Vec<(f64, f64)>,
}

impl RouteSpec {
    pub fn new(id: RouteId, town: TownId, closed: bool, travel: Travel, vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(SimError::Format(format!("route {id} needs two vertices")));
        }
        let mut path = vertices.clone();
        if closed {
            path.push(vertices[0]);
        }
        let mut waypoints = vec![path[0]];
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            if len == 0.0 {
                return Err(SimError::Format(format!("route {id} repeats a vertex")));
            }
            let n = len.ceil() as usize;
            for k in 1..=n {
                let t = k as f64 / n as f64;
                waypoints.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            }
        }
        Ok(Self { id, town, closed, travel, vertices, waypoints })
    }

    /// Built-in route for a town, parsed once from the bundled assets.
    pub fn builtin(town: TownId, id: RouteId) -> &'static RouteSpec {
        static A: OnceLock<Vec<RouteSpec>> = OnceLock::new();
        static B: OnceLock<Vec<RouteSpec>> = OnceLock::new();
        let (cell, src) = match town {
            TownId::A => (&A, include_str!("../assets/routes_a.txt")),
            TownId::B => (&B, include_str!("../assets/routes_b.txt")),
        };
        let all = cell.get_or_init(|| parse_routes(src).expect("bundled route asset is valid"));
        all.iter().find(|r| r.id == id).expect("every town defines every route")
    }

    /// Heading of waypoint segment `i -> i+1` (the last segment for the final index).
    pub fn segment_heading(&self, i: usize) -> f64 {
        let i = i.min(self.waypoints.len() - 2);
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        (b.1 - a.1).atan2(b.0 - a.0)
    }

    /// Signed distance from the line through segment `i -> i+1`; positive to the right.
    pub fn lateral_offset(&self, i: usize, x: f64, y: f64) -> f64 {
        let i = i.min(self.waypoints.len() - 2);
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        (dx * (y - a.1) - dy * (x - a.0)) / len
    }

    /// Distance to the polyline around waypoint `i`: the segment starting at
    /// `i` and the two before it.
    pub fn centerline_offset(&self, i: usize, x: f64, y: f64) -> f64 {
        let hi = i.min(self.waypoints.len() - 2);
        (hi.saturating_sub(2)..=hi)
            .map(|k| {
                let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let t = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                ((a.0 + t * dx - x).powi(2) + (a.1 + t * dy - y).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Turns at each vertex, in travel order.
    pub fn turns(&self) -> Vec<Turn> {
        let mut path = self.vertices.clone();
        if self.closed {
            path.push(self.vertices[0]);
            path.push(self.vertices[1]);
        }
        path.windows(3)
            .filter_map(|w| {
                let d1 = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                let d2 = (w[2].0 - w[1].0, w[2].1 - w[1].1);
                let cross = d1.0 * d2.1 - d1.1 * d2.0;
                // y grows downward, so a positive cross product turns right.
                if cross > 1e-9 {
                    Some(Turn::Right)
                } else if cross < -1e-9 {
                    Some(Turn::Left)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn start_heading(&self) -> f64 {
        self.segment_heading(0)
    }

    pub fn check_on_road(&self, map: &TownMap) -> Result<()> {
        for &(x, y) in &self.waypoints {
            if !map.cell_at(x, y).is_road() {
                return Err(SimError::Config(format!("route {} waypoint ({x}, {y}) is off road in {}", self.id, map.id)));
            }
        }
        Ok(())
    }
}

pub fn parse_routes(src: &str) -> Result<Vec<RouteSpec>> {
    let bad = |msg: String| SimError::Format(msg);
    let mut lines = src.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with(';'));
    match lines.next() {
        Some("microdrive-routes 1") => {}
        other => return Err(bad(format!("unsupported header {other:?}"))),
    }
    let town: TownId = match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
        Some(v) if v.len() == 2 && v[0] == "town" => v[1].parse()?,
        _ => return Err(bad("missing town line".into())),
    };
    let mut out = Vec::new();
    while let Some(line) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ["route", id, kind, travel] = parts[..] else {
            return Err(bad(format!("expected route header, got `{line}`")));
        };
        let closed = match kind {
            "open" => false,
            "closed" => true,
            _ => return Err(bad(format!("bad route kind `{kind}`"))),
        };
        let travel = match travel {
            "forward" => Travel::Forward,
            "clockwise" => Travel::Clockwise,
            "counterclockwise" => Travel::Counterclockwise,
            _ => return Err(bad(format!("bad travel `{travel}`"))),
        };
        let mut vertices = Vec::new();
        loop {
            let l = lines.next().ok_or_else(|| bad(format!("route {id} is not terminated")))?;
            if l == "end" {
                break;
            }
            let xy: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad coordinate `{s}`"))))
                .collect::<Result<_>>()?;
            let [x, y] = xy[..] else { return Err(bad(format!("bad vertex `{l}`"))) };
            vertices.push((x, y));
        }
        out.push(RouteSpec::new(id.parse()?, town, closed, travel, vertices)?);
    }
    Ok(out)
}

pub fn routes_to_text(town: TownId, routes: &[RouteSpec]) -> String {
    let mut out = format!("microdrive-routes 1\ntown {town}\n");
    for r in routes {
        let kind = if r.closed { "closed" } else { "open" };
        let _ = writeln!(out, "route {} {kind} {}", r.id, r.travel.name());
        for (x, y) in &r.vertices {
            let _ = writeln!(out, "{x} {y}");
        }
        out.push_str("end\n");
    }
    out
}
