//! Hierarchical Hilbert-curve quadtree cells over a planar lon/lat box.
//!
//! A level-`l` cell is addressed by `l` base-4 digits, coarse to fine. Each
//! digit is the child's position along the Hilbert curve inside its parent,
//! so containment is a prefix test and the digits read as a base-4 integer
//! give the cell's curve index at that level.
//!
//! Orientation: the level-1 curve visits `(min_lon, min_lat)` first, then
//! `(min_lon, max_lat)`, `(max_lon, max_lat)`, `(max_lon, min_lat)`. Finer
//! levels follow the classic rotate/reflect recursion. Token values depend
//! on this convention and are stable across versions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Deepest supported level; 30 levels of 2 bits fit in a `u64` index.
pub const MAX_LEVEL: u8 = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("point ({lon}, {lat}) lies outside the domain")]
    OutOfDomain { lon: f64, lat: f64 },
    #[error("level {level} out of range 0..={max}")]
    LevelOutOfRange { level: u32, max: u8 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid cell token string {0:?}")]
    InvalidToken(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }
}

/// Axis-aligned lon/lat rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Rect {
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    pub fn centroid(&self) -> GeoPoint {
        GeoPoint::new(
            0.5 * (self.min_lon + self.max_lon),
            0.5 * (self.min_lat + self.max_lat),
        )
    }

    /// True when the two rectangles share a region of positive area.
    pub fn overlaps_interior(&self, other: &Rect) -> bool {
        self.min_lon < other.max_lon
            && other.min_lon < self.max_lon
            && self.min_lat < other.max_lat
            && other.min_lat < self.max_lat
    }

    fn corners(&self) -> [GeoPoint; 4] {
        [
            GeoPoint::new(self.min_lon, self.min_lat),
            GeoPoint::new(self.max_lon, self.min_lat),
            GeoPoint::new(self.max_lon, self.max_lat),
            GeoPoint::new(self.min_lon, self.max_lat),
        ]
    }
}

/// The bounding box that level 0 covers, plus the deepest level in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
    pub max_level: u8,
}

impl Domain {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64, max_level: u8) -> Result<Self, GeoError> {
        let d = Self {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
            max_level,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let coords = [self.min_lon, self.min_lat, self.max_lon, self.max_lat];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeoError::InvalidDomain("non-finite bound".into()));
        }
        if !(self.min_lon < self.max_lon && self.min_lat < self.max_lat) {
            return Err(GeoError::InvalidDomain("min must be below max on both axes".into()));
        }
        if self.max_level == 0 || self.max_level > MAX_LEVEL {
            return Err(GeoError::InvalidDomain(format!(
                "max_level {} outside 1..={MAX_LEVEL}",
                self.max_level
            )));
        }
        Ok(())
    }

    pub fn rect(&self) -> Rect {
        Rect {
            min_lon: self.min_lon,
            min_lat: self.min_lat,
            max_lon: self.max_lon,
            max_lat: self.max_lat,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon.is_finite() && p.lat.is_finite() && self.rect().contains(p)
    }

    fn check_level(&self, level: u8) -> Result<(), GeoError> {
        if level > self.max_level {
            return Err(GeoError::LevelOutOfRange {
                level: level as u32,
                max: self.max_level,
            });
        }
        Ok(())
    }

    /// Grid coordinates of `p` at [`MAX_LEVEL`]; coarser levels shift these down
    /// so every level sees the same quantization.
    fn quantize(&self, p: GeoPoint) -> (u64, u64) {
        let n = 1u64 << MAX_LEVEL;
        let q = |v: f64, lo: f64, hi: f64| -> u64 {
            let f = (v - lo) / (hi - lo) * n as f64;
            (f.floor().max(0.0) as u64).min(n - 1)
        };
        (
            q(p.lon, self.min_lon, self.max_lon),
            q(p.lat, self.min_lat, self.max_lat),
        )
    }
}

/// A quadtree node: `level` digits packed into `index` (2 bits per level,
/// coarsest digit in the most significant position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    level: u8,
    index: u64,
}

impl Cell {
    pub const ROOT: Cell = Cell { level: 0, index: 0 };

    pub fn from_tokens(tokens: &[u8]) -> Result<Self, GeoError> {
        if tokens.len() > MAX_LEVEL as usize {
            return Err(GeoError::LevelOutOfRange {
                level: tokens.len() as u32,
                max: MAX_LEVEL,
            });
        }
        let mut index = 0u64;
        for &t in tokens {
            if t > 3 {
                return Err(GeoError::InvalidToken(format!("{tokens:?}")));
            }
            index = (index << 2) | t as u64;
        }
        Ok(Self {
            level: tokens.len() as u8,
            index,
        })
    }

    /// Builds a cell from its curve index at `level`.
    pub fn from_index(level: u8, index: u64) -> Result<Self, GeoError> {
        if level > MAX_LEVEL {
            return Err(GeoError::LevelOutOfRange {
                level: level as u32,
                max: MAX_LEVEL,
            });
        }
        if index >= 1u64 << (2 * level as u32) {
            return Err(GeoError::InvalidToken(format!("index {index} at level {level}")));
        }
        Ok(Self { level, index })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// Position along the Hilbert curve among all cells of this level.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Digit at 1-based `level` (1 = coarsest).
    pub fn digit(&self, level: u8) -> u8 {
        debug_assert!(level >= 1 && level <= self.level);
        ((self.index >> (2 * (self.level - level) as u32)) & 3) as u8
    }

    pub fn tokens(&self) -> Vec<u8> {
        (1..=self.level).map(|l| self.digit(l)).collect()
    }

    /// The ancestor at `level` (or `self` when `level >= self.level`).
    pub fn truncate(&self, level: u8) -> Cell {
        if level >= self.level {
            return *self;
        }
        Cell {
            level,
            index: self.index >> (2 * (self.level - level) as u32),
        }
    }

    pub fn contains(&self, candidate: &Cell) -> bool {
        contains(self, candidate)
    }

    pub fn children(&self) -> Result<[Cell; 4], GeoError> {
        if self.level >= MAX_LEVEL {
            return Err(GeoError::LevelOutOfRange {
                level: self.level as u32 + 1,
                max: MAX_LEVEL,
            });
        }
        let base = self.index << 2;
        let level = self.level + 1;
        Ok([0, 1, 2, 3].map(|d| Cell { level, index: base | d }))
    }

    pub fn parent(&self) -> Result<Cell, GeoError> {
        if self.level == 0 {
            return Err(GeoError::LevelOutOfRange { level: 0, max: MAX_LEVEL });
        }
        Ok(self.truncate(self.level - 1))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.tokens() {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Cell {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = s
            .bytes()
            .map(|b| match b {
                b'0'..=b'3' => Ok(b - b'0'),
                _ => Err(GeoError::InvalidToken(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Cell::from_tokens(&tokens)
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn rotate(n: u64, x: &mut u64, y: &mut u64, rx: u64, ry: u64) {
    if ry == 0 {
        if rx == 1 {
            *x = n - 1 - *x;
            *y = n - 1 - *y;
        }
        std::mem::swap(x, y);
    }
}

/// Curve index of grid cell `(x, y)` on the `2^level` grid.
pub fn xy_to_index(level: u8, mut x: u64, mut y: u64) -> u64 {
    let n = 1u64 << level;
    let mut d = 0u64;
    let mut s = n >> 1;
    while s > 0 {
        let rx = u64::from(x & s != 0);
        let ry = u64::from(y & s != 0);
        d += s * s * ((3 * rx) ^ ry);
        rotate(n, &mut x, &mut y, rx, ry);
        s >>= 1;
    }
    d
}

/// Inverse of [`xy_to_index`].
pub fn index_to_xy(level: u8, index: u64) -> (u64, u64) {
    let n = 1u64 << level;
    let (mut x, mut y) = (0u64, 0u64);
    let mut t = index;
    let mut s = 1u64;
    while s < n {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        rotate(s, &mut x, &mut y, rx, ry);
        x += s * rx;
        y += s * ry;
        t /= 4;
        s *= 2;
    }
    (x, y)
}

pub fn encode(point: GeoPoint, level: u8, domain: &Domain) -> Result<Cell, GeoError> {
    domain.check_level(level)?;
    if !domain.contains(point) {
        return Err(GeoError::OutOfDomain {
            lon: point.lon,
            lat: point.lat,
        });
    }
    let (x, y) = domain.quantize(point);
    let shift = (MAX_LEVEL - level) as u32;
    Ok(Cell {
        level,
        index: xy_to_index(level, x >> shift, y >> shift),
    })
}

pub fn contains(ancestor: &Cell, candidate: &Cell) -> bool {
    ancestor.level <= candidate.level && candidate.truncate(ancestor.level).index == ancestor.index
}

pub fn cell_bounds(cell: &Cell, domain: &Domain) -> Rect {
    let (x, y) = index_to_xy(cell.level, cell.index);
    let n = (1u64 << cell.level) as f64;
    let w = (domain.max_lon - domain.min_lon) / n;
    let h = (domain.max_lat - domain.min_lat) / n;
    Rect {
        min_lon: domain.min_lon + x as f64 * w,
        min_lat: domain.min_lat + y as f64 * h,
        max_lon: domain.min_lon + (x + 1) as f64 * w,
        max_lat: domain.min_lat + (y + 1) as f64 * h,
    }
}

/// A simple polygon given as a ring of vertices. A repeated closing vertex
/// is accepted and dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<GeoPoint>,
}

impl Polygon {
    pub fn new(ring: &[GeoPoint]) -> Result<Self, GeoError> {
        let mut vertices: Vec<GeoPoint> = Vec::with_capacity(ring.len());
        for &p in ring {
            if !(p.lon.is_finite() && p.lat.is_finite()) {
                return Err(GeoError::DegeneratePolygon("non-finite vertex".into()));
            }
            if vertices.last() != Some(&p) {
                vertices.push(p);
            }
        }
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        let mut distinct = vertices.clone();
        distinct.sort_by(|a, b| a.lon.total_cmp(&b.lon).then(a.lat.total_cmp(&b.lat)));
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(GeoError::DegeneratePolygon(format!(
                "{} distinct vertices, need at least 3",
                distinct.len()
            )));
        }
        Ok(Self { vertices })
    }

    pub fn from_rect(r: &Rect) -> Self {
        Self {
            vertices: r.corners().to_vec(),
        }
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = (GeoPoint, GeoPoint)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Even-odd point-in-polygon test (boundary behaviour unspecified;
    /// callers pair it with an edge-intersection test).
    pub fn contains_point(&self, p: GeoPoint) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let t = (p.lat - a.lat) / (b.lat - a.lat);
                if p.lon < a.lon + t * (b.lon - a.lon) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Closed intersection test between the polygon region and a rectangle.
    pub fn intersects_rect(&self, r: &Rect) -> bool {
        if self.vertices.iter().any(|&v| r.contains(v)) {
            return true;
        }
        let corners = r.corners();
        if corners.iter().any(|&c| self.contains_point(c)) {
            return true;
        }
        for (a, b) in self.edges() {
            for i in 0..4 {
                if segments_intersect(a, b, corners[i], corners[(i + 1) % 4]) {
                    return true;
                }
            }
        }
        false
    }
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon) && p.lon <= a.lon.max(b.lon) && p.lat >= a.lat.min(b.lat) && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(p1: GeoPoint, p2: GeoPoint, q1: GeoPoint, q2: GeoPoint) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// All level-`level` cells whose closed bounds intersect the polygon,
/// ordered by curve index.
pub fn cover_polygon(polygon: &Polygon, level: u8, domain: &Domain) -> Result<Vec<Cell>, GeoError> {
    domain.check_level(level)?;
    let mut out = Vec::new();
    descend(Cell::ROOT, level, domain, &mut |r| polygon.intersects_rect(r), &mut out);
    Ok(out)
}

/// All level-`level` cells sharing positive area with `rect`, ordered by
/// curve index.
pub fn cover_rect(rect: &Rect, level: u8, domain: &Domain) -> Result<Vec<Cell>, GeoError> {
    domain.check_level(level)?;
    let mut out = Vec::new();
    descend(Cell::ROOT, level, domain, &mut |r| r.overlaps_interior(rect), &mut out);
    Ok(out)
}

fn descend(cell: Cell, level: u8, domain: &Domain, hit: &mut impl FnMut(&Rect) -> bool, out: &mut Vec<Cell>) {
    if !hit(&cell_bounds(&cell, domain)) {
        return;
    }
    if cell.level == level {
        out.push(cell);
        return;
    }
    // Digits 0..3 visit children in curve order, so `out` stays sorted.
    for child in cell.children().expect("level below MAX_LEVEL") {
        descend(child, level, domain, hit, out);
    }
}
