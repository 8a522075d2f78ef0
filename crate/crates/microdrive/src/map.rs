//! Town grids and their text format.
//!
//! A town file is line oriented:
//!
//! ```text
//! microdrive-town 1
//! town Town-A
//! size <width> <height>
//! lane_width <cells>
//! intersection <marking_row> <marking_col>     (zero or more)
//! spawn <x> <y> <heading_radians>             (one or more)
//! grid
//! <height lines of width characters>
//! ```
//!
//! Grid characters: `.` off-road, `#` building, `=` lane marking, `>` `<`
//! `^` `v` lane cells carrying their travel direction, `+` intersection.
//! Blank lines and lines starting with `;` are ignored outside the grid.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TownId {
    #[serde(rename = "Town-A")]
    A,
    #[serde(rename = "Town-B")]
    B,
}

impl TownId {
    pub const ALL: [TownId; 2] = [TownId::A, TownId::B];

    pub fn name(self) -> &'static str {
        match self {
            TownId::A => "Town-A",
            TownId::B => "Town-B",
        }
    }
}

impl fmt::Display for TownId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TownId {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Town-A" | "A" | "a" => Ok(TownId::A),
            "Town-B" | "B" | "b" => Ok(TownId::B),
            _ => Err(SimError::Config(format!("unknown town `{s}`"))),
        }
    }
}

/// Travel direction of a lane cell. Screen convention: x grows east, y grows south.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    East,
    South,
    West,
    North,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::East, Dir::South, Dir::West, Dir::North];

    pub fn unit(self) -> (f64, f64) {
        match self {
            Dir::East => (1.0, 0.0),
            Dir::South => (0.0, 1.0),
            Dir::West => (-1.0, 0.0),
            Dir::North => (0.0, -1.0),
        }
    }

    pub fn heading(self) -> f64 {
        let (x, y) = self.unit();
        y.atan2(x)
    }

    /// Clockwise on screen.
    pub fn right(self) -> Dir {
        match self {
            Dir::East => Dir::South,
            Dir::South => Dir::West,
            Dir::West => Dir::North,
            Dir::North => Dir::East,
        }
    }

    pub fn left(self) -> Dir {
        self.right().right().right()
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, Dir::East | Dir::West)
    }

    fn glyph(self) -> char {
        match self {
            Dir::East => '>',
            Dir::South => 'v',
            Dir::West => '<',
            Dir::North => '^',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    OffRoad,
    Building,
    Marking,
    Lane(Dir),
    Intersection,
}

impl Cell {
    pub fn is_road(self) -> bool {
        matches!(self, Cell::Lane(_) | Cell::Intersection)
    }

    fn glyph(self) -> char {
        match self {
            Cell::OffRoad => '.',
            Cell::Building => '#',
            Cell::Marking => '=',
            Cell::Lane(d) => d.glyph(),
            Cell::Intersection => '+',
        }
    }

    fn from_glyph(c: char) -> Option<Cell> {
        Some(match c {
            '.' => Cell::OffRoad,
            '#' => Cell::Building,
            '=' => Cell::Marking,
            '>' => Cell::Lane(Dir::East),
            'v' => Cell::Lane(Dir::South),
            '<' => Cell::Lane(Dir::West),
            '^' => Cell::Lane(Dir::North),
            '+' => Cell::Intersection,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Crossing of a horizontal and a vertical road, named by the marking
/// row and column through its center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Intersection {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TownMap {
    pub id: TownId,
    pub width: usize,
    pub height: usize,
    pub lane_width: usize,
    cells: Vec<Cell>,
    pub intersections: Vec<Intersection>,
    pub spawns: Vec<Pose>,
}

impl TownMap {
    /// Built-in towns, parsed once from the bundled assets.
    pub fn builtin(id: TownId) -> &'static TownMap {
        static A: OnceLock<TownMap> = OnceLock::new();
        static B: OnceLock<TownMap> = OnceLock::new();
        let (cell, src) = match id {
            TownId::A => (&A, include_str!("../assets/town_a.txt")),
            TownId::B => (&B, include_str!("../assets/town_b.txt")),
        };
        cell.get_or_init(|| TownMap::parse(src).expect("bundled town asset is valid"))
    }

    /// Cell at integer coordinates; anything outside the grid is off-road.
    pub fn cell(&self, col: i64, row: i64) -> Cell {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            return Cell::OffRoad;
        }
        self.cells[row as usize * self.width + col as usize]
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Cell {
        self.cell(x.floor() as i64, y.floor() as i64)
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Intersection whose block contains the point, if any.
    pub fn intersection_at(&self, x: f64, y: f64) -> Option<Intersection> {
        let w = self.lane_width as f64;
        self.intersections.iter().copied().find(|i| {
            let (cx, cy) = (i.col as f64 + 0.5, i.row as f64 + 0.5);
            (x - cx).abs() < w + 0.5 && (y - cy).abs() < w + 0.5
        })
    }

    /// Center-line coordinate of the lane travelling `dir` through an
    /// intersection: x for vertical travel, y for horizontal travel.
    pub fn lane_center(&self, i: Intersection, dir: Dir) -> f64 {
        let half = self.lane_width as f64 / 2.0;
        match dir {
            Dir::East => i.row as f64 + 1.0 + half,
            Dir::West => i.row as f64 - half,
            Dir::North => i.col as f64 + 1.0 + half,
            Dir::South => i.col as f64 - half,
        }
    }

    pub fn parse(src: &str) -> Result<TownMap> {
        let bad = |msg: String| SimError::Format(msg);
        let mut lines = src.lines();
        let mut header = lines.by_ref().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with(';'));
        let magic = header.next().ok_or_else(|| bad("empty town file".into()))?;
        match magic.split_whitespace().collect::<Vec<_>>()[..] {
            ["microdrive-town", v] if v == FORMAT_VERSION.to_string() => {}
            _ => return Err(bad(format!("unsupported header `{magic}`"))),
        }
        let mut id = None;
        let mut size = None;
        let mut lane_width = None;
        let mut intersections = Vec::new();
        let mut spawns = Vec::new();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
        for line in header.by_ref() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[..] {
                ["town", name] => id = Some(name.parse::<TownId>()?),
                ["size", w, h] => size = Some((int(w)?, int(h)?)),
                ["lane_width", w] => lane_width = Some(int(w)?),
                ["intersection", r, c] => intersections.push(Intersection { row: int(r)?, col: int(c)? }),
                ["spawn", x, y, h] => spawns.push(Pose { x: num(x)?, y: num(y)?, heading: num(h)? }),
                ["grid"] => break,
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        let id = id.ok_or_else(|| bad("missing town".into()))?;
        let (width, height) = size.ok_or_else(|| bad("missing size".into()))?;
        let lane_width = lane_width.ok_or_else(|| bad("missing lane_width".into()))?;
        let mut cells = Vec::with_capacity(width * height);
        let rows: Vec<&str> = lines.map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if rows.len() != height {
            return Err(bad(format!("expected {height} grid rows, got {}", rows.len())));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(bad(format!("grid row {r} is not {width} wide")));
            }
            for c in row.chars() {
                cells.push(Cell::from_glyph(c).ok_or_else(|| bad(format!("unknown glyph `{c}` in row {r}")))?);
            }
        }
        if spawns.is_empty() {
            return Err(bad("town has no spawn points".into()));
        }
        Ok(TownMap { id, width, height, lane_width, cells, intersections, spawns })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "microdrive-town {FORMAT_VERSION}");
        let _ = writeln!(out, "town {}", self.id);
        let _ = writeln!(out, "size {} {}", self.width, self.height);
        let _ = writeln!(out, "lane_width {}", self.lane_width);
        for i in &self.intersections {
            let _ = writeln!(out, "intersection {} {}", i.row, i.col);
        }
        for s in &self.spawns {
            let _ = writeln!(out, "spawn {} {} {}", s.x, s.y, s.heading);
        }
        out.push_str("grid\n");
        for row in self.cells.chunks(self.width) {
            out.extend(row.iter().map(|c| c.glyph()));
            out.push('\n');
        }
        out
    }
}

/// Straight road segment. `line` is the marking row (horizontal) or column
/// (vertical); the road spans `from..=to` along its length.
#[derive(Clone, Copy, Debug)]
struct Road {
    horizontal: bool,
    line: usize,
    from: usize,
    to: usize,
}

const SIZE: usize = 41;
const LANE: usize = 3;

fn layout(id: TownId) -> Vec<Road> {
    let h = |line, from, to| Road { horizontal: true, line, from, to };
    let v = |line, from, to| Road { horizontal: false, line, from, to };
    match id {
        // Full 3x3 grid: corners, T-junctions and one four-way crossing.
        TownId::A => vec![h(4, 1, 39), h(20, 1, 39), h(36, 1, 39), v(4, 1, 39), v(20, 1, 39), v(36, 1, 39)],
        // Offset connectors: only corners and T-junctions.
        TownId::B => vec![h(4, 1, 39), h(16, 1, 39), h(36, 1, 39), v(4, 1, 39), v(36, 1, 39), v(26, 1, 19), v(14, 13, 39)],
    }
}

/// Builds a town from its road layout. The bundled assets are the output
/// of this function.
pub fn generate(id: TownId) -> TownMap {
    let roads = layout(id);
    let mut cells = vec![Cell::OffRoad; SIZE * SIZE];
    let lane = LANE as i64;
    let mut on_h = vec![None; SIZE * SIZE];
    let mut on_v = vec![None; SIZE * SIZE];
    for (k, road) in roads.iter().enumerate() {
        for along in road.from..=road.to {
            for off in -lane..=lane {
                let across = (road.line as i64 + off) as usize;
                let (col, row) = if road.horizontal { (along, across) } else { (across, along) };
                let idx = row * SIZE + col;
                let cell = match (road.horizontal, off.signum()) {
                    (_, 0) => Cell::Marking,
                    (true, -1) => Cell::Lane(Dir::West),
                    (true, _) => Cell::Lane(Dir::East),
                    (false, -1) => Cell::Lane(Dir::South),
                    (false, _) => Cell::Lane(Dir::North),
                };
                if road.horizontal {
                    on_h[idx] = Some(k);
                } else {
                    on_v[idx] = Some(k);
                }
                cells[idx] = cell;
            }
        }
    }
    let mut intersections = Vec::new();
    for hr in roads.iter().filter(|r| r.horizontal) {
        for vr in roads.iter().filter(|r| !r.horizontal) {
            let crosses = vr.line >= hr.from && vr.line <= hr.to && hr.line >= vr.from && hr.line <= vr.to;
            if crosses {
                intersections.push(Intersection { row: hr.line, col: vr.line });
            }
        }
    }
    for idx in 0..cells.len() {
        if on_h[idx].is_some() && on_v[idx].is_some() {
            cells[idx] = Cell::Intersection;
        }
    }
    // Buildings fill block interiors, leaving a one-cell verge beside roads
    // and the outer border.
    for row in 0..SIZE {
        for col in 0..SIZE {
            if cells[row * SIZE + col] != Cell::OffRoad || row < 1 || col < 1 || row >= SIZE - 1 || col >= SIZE - 1 {
                continue;
            }
            let mut near_road = false;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || c < 0 || r as usize >= SIZE || c as usize >= SIZE {
                        continue;
                    }
                    let n = cells[r as usize * SIZE + c as usize];
                    near_road |= n.is_road() || n == Cell::Marking;
                }
            }
            if !near_road {
                cells[row * SIZE + col] = Cell::Building;
            }
        }
    }
    intersections.sort();
    let mut map = TownMap { id, width: SIZE, height: SIZE, lane_width: LANE, cells, intersections, spawns: Vec::new() };
    map.spawns = spawn_points(&map);
    map
}

/// Lane-center poses every four cells along straight lane stretches.
fn spawn_points(map: &TownMap) -> Vec<Pose> {
    let mut out = Vec::new();
    for row in 0..map.height {
        for col in 0..map.width {
            let Cell::Lane(dir) = map.cell(col as i64, row as i64) else { continue };
            // Only the middle cell of each lane, away from intersections.
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let (ux, uy) = dir.unit();
            let (rx, ry) = dir.right().unit();
            let left = map.cell((x - rx).floor() as i64, (y - ry).floor() as i64);
            let right = map.cell((x + rx).floor() as i64, (y + ry).floor() as i64);
            if left != Cell::Lane(dir) || right != Cell::Lane(dir) {
                continue;
            }
            let along = if dir.is_horizontal() { col } else { row };
            if along % 4 != 2 {
                continue;
            }
            let clear = (-2..=2).all(|k| {
                let k = k as f64;
                map.cell_at(x + ux * k, y + uy * k) == Cell::Lane(dir)
            });
            if clear {
                out.push(Pose { x, y, heading: dir.heading() });
            }
        }
    }
    out
}
