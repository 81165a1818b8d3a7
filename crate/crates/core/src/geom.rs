//! Grid primitives shared by the simulator, the mapper and the planners.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

/// A 2D grid cell. `y` grows to the north.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    /// 4-neighbors in N, E, S, W order.
    pub fn neighbors4(self) -> [Cell; 4] {
        Heading::ALL.map(|h| self.step(h))
    }

    pub fn step(self, heading: Heading) -> Self {
        let (dx, dy) = heading.delta();
        self.offset(dx, dy)
    }

    pub fn euclid(self, other: Cell) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        dx.hypot(dy)
    }

    pub fn euclid_to(self, x: f64, y: f64) -> f64 {
        (f64::from(self.x) - x).hypot(f64::from(self.y) - y)
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// A voxel: a grid column plus a height layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Voxel {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Voxel {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn column(self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

/// Sorted, duplicate-free set of voxels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VoxelSet(BTreeSet<Voxel>);

impl VoxelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, v: Voxel) -> bool {
        self.0.insert(v)
    }

    pub fn contains(&self, v: &Voxel) -> bool {
        self.0.contains(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Voxel> + '_ {
        self.0.iter()
    }

    pub fn intersection_count(&self, other: &VoxelSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter(|v| large.0.contains(v)).count()
    }

    pub fn union_with(&mut self, other: &VoxelSet) {
        self.0.extend(other.0.iter().copied());
    }

    pub fn is_subset(&self, other: &VoxelSet) -> bool {
        self.0.is_subset(&other.0)
    }

    /// Arithmetic mean of voxel coordinates, or `None` for an empty set.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.0.is_empty() {
            return None;
        }
        let n = self.0.len() as f64;
        let mut acc = [0.0; 3];
        for v in &self.0 {
            acc[0] += f64::from(v.x);
            acc[1] += f64::from(v.y);
            acc[2] += f64::from(v.z);
        }
        Some(acc.map(|a| a / n))
    }

    /// Distinct (x, y) columns covered by the set.
    pub fn columns(&self) -> BTreeSet<Cell> {
        self.0.iter().map(|v| v.column()).collect()
    }

    pub fn bbox(&self) -> Option<CellRect> {
        CellRect::bounding(self.0.iter().map(|v| v.column()))
    }
}

impl FromIterator<Voxel> for VoxelSet {
    fn from_iter<I: IntoIterator<Item = Voxel>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a VoxelSet {
    type Item = &'a Voxel;
    type IntoIter = std::collections::btree_set::Iter<'a, Voxel>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Inclusive axis-aligned cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl CellRect {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x <= self.x1 && c.y >= self.y0 && c.y <= self.y1
    }

    pub fn overlaps(&self, other: &CellRect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.y0..=self.y1).flat_map(move |y| (self.x0..=self.x1).map(move |x| Cell::new(x, y)))
    }

    pub fn bounding(cells: impl IntoIterator<Item = Cell>) -> Option<Self> {
        let mut it = cells.into_iter();
        let first = it.next()?;
        let mut r = CellRect::new(first.x, first.y, first.x, first.y);
        for c in it {
            r.x0 = r.x0.min(c.x);
            r.y0 = r.y0.min(c.y);
            r.x1 = r.x1.max(c.x);
            r.y1 = r.y1.max(c.y);
        }
        Some(r)
    }
}

/// One of the four grid headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, 1),
            Heading::E => (1, 0),
            Heading::S => (0, -1),
            Heading::W => (-1, 0),
        }
    }

    /// Counter-clockwise quarter turn.
    pub fn left(self) -> Self {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn right(self) -> Self {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }

    pub fn angle(self) -> f64 {
        let (dx, dy) = self.delta();
        f64::from(dy).atan2(f64::from(dx))
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N" => Some(Heading::N),
            "E" => Some(Heading::E),
            "S" => Some(Heading::S),
            "W" => Some(Heading::W),
            _ => None,
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Heading::N => "N",
            Heading::E => "E",
            Heading::S => "S",
            Heading::W => "W",
        };
        f.write_str(s)
    }
}

/// Breadth-first 4-connected distance from `from` to the nearest cell of `targets`.
///
/// `passable` decides which cells may be entered; target cells must also be passable.
/// Returns `None` when no target is reachable.
pub fn bfs_distance(
    width: i32,
    height: i32,
    passable: impl Fn(Cell) -> bool,
    from: Cell,
    targets: &BTreeSet<Cell>,
) -> Option<u32> {
    if targets.is_empty() || !in_bounds(width, height, from) {
        return None;
    }
    if targets.contains(&from) {
        return Some(0);
    }
    let idx = |c: Cell| (c.y * width + c.x) as usize;
    let mut dist = vec![u32::MAX; (width * height) as usize];
    dist[idx(from)] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)];
        for n in c.neighbors4() {
            if !in_bounds(width, height, n) || dist[idx(n)] != u32::MAX || !passable(n) {
                continue;
            }
            if targets.contains(&n) {
                return Some(d + 1);
            }
            dist[idx(n)] = d + 1;
            queue.push_back(n);
        }
    }
    None
}

pub fn in_bounds(width: i32, height: i32, c: Cell) -> bool {
    c.x >= 0 && c.y >= 0 && c.x < width && c.y < height
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headings_rotate() {
        for h in Heading::ALL {
            assert_eq!(h.left().right(), h);
            assert_eq!(h.left().left().left().left(), h);
        }
        assert_eq!(Heading::N.left(), Heading::W);
    }

    #[test]
    fn voxel_set_centroid() {
        let s: VoxelSet = [Voxel::new(0, 0, 0), Voxel::new(2, 0, 2)].into_iter().collect();
        assert_eq!(s.centroid(), Some([1.0, 0.0, 1.0]));
        assert_eq!(VoxelSet::new().centroid(), None);
    }

    #[test]
    fn bfs_corridor() {
        let targets = BTreeSet::from([Cell::new(6, 0)]);
        assert_eq!(bfs_distance(7, 1, |_| true, Cell::new(0, 0), &targets), Some(6));
        assert_eq!(
            bfs_distance(7, 1, |c| c.x != 3, Cell::new(0, 0), &targets),
            None
        );
    }
}
