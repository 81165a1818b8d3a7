//! Execution layer: episodic occupancy map, frontiers, goal maps, a fast
//! marching arrival-time field and greedy descent over it.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{bfs_distance, in_bounds, Cell, Heading};
use crate::planner::Action;
use crate::scenegraph::{GraphSnapshot, NodeId};
use crate::world::{MovePrimitive, Observation, Pose};

pub const DEFAULT_GOAL_RADIUS: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NavError {
    #[error("stuck: {0}")]
    Stuck(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Unknown,
    Free,
    Obstacle,
}

impl CellState {
    pub fn code(self) -> char {
        match self {
            CellState::Unknown => '?',
            CellState::Free => '.',
            CellState::Obstacle => '#',
        }
    }
}

/// Agent-side knowledge of the floor. Cells only ever leave `Unknown`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodicMap {
    pub width: i32,
    pub height: i32,
    cells: Vec<CellState>,
}

impl EpisodicMap {
    pub fn new(width: i32, height: i32) -> Self {
        Self {
            width,
            height,
            cells: vec![CellState::Unknown; (width * height).max(0) as usize],
        }
    }

    /// Builds a map from rows of `?`, `.` and `#`, first row northmost.
    pub fn from_rows(rows: &[&str]) -> Self {
        let height = rows.len() as i32;
        let width = rows.first().map_or(0, |r| r.len()) as i32;
        let mut m = Self::new(width, height);
        for (row, line) in rows.iter().enumerate() {
            let y = height - 1 - row as i32;
            for (x, ch) in line.chars().enumerate() {
                let s = match ch {
                    '.' => CellState::Free,
                    '#' => CellState::Obstacle,
                    _ => CellState::Unknown,
                };
                m.cells[(y * width + x as i32) as usize] = s;
            }
        }
        m
    }

    fn idx(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        in_bounds(self.width, self.height, c)
    }

    /// Out-of-bounds cells read as obstacles.
    pub fn get(&self, c: Cell) -> CellState {
        if self.in_bounds(c) {
            self.cells[self.idx(c)]
        } else {
            CellState::Obstacle
        }
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.get(c) == CellState::Free
    }

    /// Sets a cell that is still unknown; returns whether it changed.
    pub fn reveal(&mut self, c: Cell, state: CellState) -> bool {
        if !self.in_bounds(c) || state == CellState::Unknown {
            return false;
        }
        let i = self.idx(c);
        if self.cells[i] == CellState::Unknown {
            self.cells[i] = state;
            true
        } else {
            false
        }
    }

    /// Integrates an observation; returns the number of newly known cells.
    pub fn update(&mut self, obs: &Observation) -> usize {
        let mut n = usize::from(self.reveal(obs.pose.cell, CellState::Free));
        for v in &obs.visible_cells {
            let s = if v.occupied { CellState::Obstacle } else { CellState::Free };
            n += usize::from(self.reveal(v.cell, s));
        }
        n
    }

    pub fn cells(&self) -> impl Iterator<Item = (Cell, CellState)> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| {
            let c = Cell::new(x, y);
            (c, self.get(c))
        }))
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&s| s == state).count()
    }

    /// Free cells with at least one unknown 4-neighbour.
    pub fn frontiers(&self) -> BTreeSet<Cell> {
        self.cells()
            .filter(|&(c, s)| {
                s == CellState::Free
                    && c.neighbors4()
                        .iter()
                        .any(|&n| self.in_bounds(n) && self.get(n) == CellState::Unknown)
            })
            .map(|(c, _)| c)
            .collect()
    }

    /// Free cells reachable from `from` through known-free space.
    pub fn reachable(&self, from: Cell) -> BTreeSet<Cell> {
        let mut seen = BTreeSet::new();
        if !self.is_free(from) {
            return seen;
        }
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(c) = queue.pop_front() {
            for n in c.neighbors4() {
                if self.is_free(n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    pub fn path_length(&self, from: Cell, goals: &BTreeSet<Cell>) -> Option<u32> {
        bfs_distance(self.width, self.height, |c| self.is_free(c), from, goals)
    }

    /// Known-free cells within `r_goal` of a floor-plane point.
    pub fn cells_near(&self, x: f64, y: f64, r_goal: f64) -> BTreeSet<Cell> {
        self.cells()
            .filter(|&(c, s)| s == CellState::Free && c.euclid_to(x, y) <= r_goal + 1e-9)
            .map(|(c, _)| c)
            .collect()
    }

    /// Row-major run-length encoding starting at the southwest corner.
    pub fn rle(&self) -> Vec<(CellState, u32)> {
        let mut out: Vec<(CellState, u32)> = Vec::new();
        for &s in &self.cells {
            match out.last_mut() {
                Some((prev, n)) if *prev == s => *n += 1,
                _ => out.push((s, 1)),
            }
        }
        out
    }

    /// ASCII dump, first line northmost.
    pub fn render(&self, agent: Option<Pose>) -> String {
        let mut s = String::new();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = match agent {
                    Some(p) if p.cell == c => '@',
                    _ => self.get(c).code(),
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    Frontier,
    Object(NodeId),
    /// Object target whose surroundings are still unknown; heading for the nearest frontier.
    ObjectFrontier(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalMap {
    pub cells: BTreeSet<Cell>,
    pub mode: GoalMode,
}

/// Goal cells for the current high-level action, restricted to cells the
/// agent can reach through known-free space.
pub fn build_goal_map(
    action: &Action,
    snapshot: &GraphSnapshot,
    map: &EpisodicMap,
    agent: Cell,
    r_goal: f64,
) -> Result<GoalMap, NavError> {
    let reachable = map.reachable(agent);
    let frontiers: BTreeSet<Cell> = map.frontiers().intersection(&reachable).copied().collect();
    match action {
        Action::ExploreObj(id) => {
            let node = snapshot
                .get(*id)
                .ok_or_else(|| NavError::Stuck(format!("node {id} is not in the graph")))?;
            let [cx, cy, _] = node.centroid;
            let ring: BTreeSet<Cell> = map
                .cells_near(cx, cy, r_goal)
                .intersection(&reachable)
                .copied()
                .collect();
            if !ring.is_empty() {
                return Ok(GoalMap {
                    cells: ring,
                    mode: GoalMode::Object(*id),
                });
            }
            let nearest = frontiers
                .iter()
                .min_by(|a, b| a.euclid_to(cx, cy).total_cmp(&b.euclid_to(cx, cy)).then(a.cmp(b)))
                .copied()
                .ok_or_else(|| NavError::Stuck(format!("no reachable goal near node {id}")))?;
            Ok(GoalMap {
                cells: BTreeSet::from([nearest]),
                mode: GoalMode::ObjectFrontier(*id),
            })
        }
        _ => {
            if frontiers.is_empty() {
                return Err(NavError::Stuck("no reachable frontier".into()));
            }
            Ok(GoalMap {
                cells: frontiers,
                mode: GoalMode::Frontier,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Trial(f64, Cell);

impl Eq for Trial {}

impl Ord for Trial {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Arrival times from the goal set; `+inf` off the known-free region.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeField {
    pub width: i32,
    pub height: i32,
    values: Vec<f64>,
    goals: BTreeSet<Cell>,
    /// Values in the order cells were accepted.
    pub acceptance: Vec<f64>,
}

impl TimeField {
    pub fn get(&self, c: Cell) -> f64 {
        if in_bounds(self.width, self.height, c) {
            self.values[(c.y * self.width + c.x) as usize]
        } else {
            f64::INFINITY
        }
    }

    pub fn is_goal(&self, c: Cell) -> bool {
        self.goals.contains(&c)
    }

    pub fn goals(&self) -> &BTreeSet<Cell> {
        &self.goals
    }

    /// Text grid of arrival times, first line northmost; `inf` for unreachable cells.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for y in (0..self.height).rev() {
            let row: Vec<String> = (0..self.width)
                .map(|x| {
                    let t = self.get(Cell::new(x, y));
                    if t.is_finite() {
                        format!("{t:.3}")
                    } else {
                        "inf".into()
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// First-order fast marching with unit speed and unit spacing.
///
/// Each cell remembers which goal cell its value descends from; the two-sided
/// quadratic update only combines neighbours that share that origin. Where
/// fronts from different goals meet, the one-sided update is used instead, which
/// keeps arrival times from dipping below the straight-line distance there.
pub fn fmm(map: &EpisodicMap, goal: &GoalMap) -> TimeField {
    const H: f64 = 1.0;
    let (w, h) = (map.width, map.height);
    let idx = |c: Cell| (c.y * w + c.x) as usize;
    let mut values = vec![f64::INFINITY; (w * h).max(0) as usize];
    let mut origin = vec![usize::MAX; values.len()];
    let mut accepted = vec![false; values.len()];
    let mut heap = BinaryHeap::new();
    let goals: BTreeSet<Cell> = goal.cells.iter().copied().filter(|&c| map.is_free(c)).collect();
    for &g in &goals {
        values[idx(g)] = 0.0;
        origin[idx(g)] = idx(g);
        heap.push(Trial(0.0, g));
    }
    let mut acceptance = Vec::new();
    while let Some(Trial(t, c)) = heap.pop() {
        if accepted[idx(c)] || t > values[idx(c)] {
            continue;
        }
        accepted[idx(c)] = true;
        acceptance.push(t);
        for n in c.neighbors4() {
            if !map.is_free(n) || accepted[idx(n)] {
                continue;
            }
            // Smallest accepted neighbour along one axis, with its origin.
            let upwind = |p: Cell, q: Cell| {
                [p, q]
                    .into_iter()
                    .filter(|&m| map.in_bounds(m) && accepted[idx(m)])
                    .map(|m| (values[idx(m)], origin[idx(m)]))
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .unwrap_or((f64::INFINITY, usize::MAX))
            };
            let (a, oa) = upwind(n.offset(-1, 0), n.offset(1, 0));
            let (b, ob) = upwind(n.offset(0, -1), n.offset(0, 1));
            let (cand, src) = if oa != ob || (a - b).abs() >= H || !a.is_finite() || !b.is_finite() {
                if a <= b {
                    (a + H, oa)
                } else {
                    (b + H, ob)
                }
            } else {
                ((a + b + (2.0 * H * H - (a - b) * (a - b)).sqrt()) / 2.0, oa)
            };
            if cand < values[idx(n)] {
                values[idx(n)] = cand;
                origin[idx(n)] = src;
                heap.push(Trial(cand, n));
            }
        }
    }
    TimeField {
        width: w,
        height: h,
        values,
        goals,
        acceptance,
    }
}

/// Greedy descent: face the lowest-valued neighbour (ties N, E, S, W), then step.
pub fn next_primitive(field: &TimeField, pose: Pose) -> Result<MovePrimitive, NavError> {
    if field.is_goal(pose.cell) {
        return Ok(MovePrimitive::Stop);
    }
    if !field.get(pose.cell).is_finite() {
        return Err(NavError::Stuck(format!("no finite arrival time at {}", pose.cell)));
    }
    let mut best: Option<(f64, Heading)> = None;
    for h in Heading::ALL {
        let t = field.get(pose.cell.step(h));
        if t.is_finite() && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, h));
        }
    }
    let (_, dir) = best.ok_or_else(|| NavError::Stuck(format!("all neighbours of {} unreachable", pose.cell)))?;
    Ok(turn_toward(pose.heading, dir))
}

/// Primitive that makes progress towards facing `dir` (or moves if already facing it).
pub fn turn_toward(current: Heading, dir: Heading) -> MovePrimitive {
    if current == dir {
        MovePrimitive::Forward
    } else if current.right() == dir {
        MovePrimitive::TurnRight
    } else {
        MovePrimitive::TurnLeft
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{GridScene, SensorConfig};

    fn open(n: i32) -> EpisodicMap {
        let row = ".".repeat(n as usize);
        let rows: Vec<&str> = (0..n).map(|_| row.as_str()).collect();
        EpisodicMap::from_rows(&rows)
    }

    fn single_goal(c: Cell) -> GoalMap {
        GoalMap {
            cells: BTreeSet::from([c]),
            mode: GoalMode::Frontier,
        }
    }

    #[test]
    fn fmm_reference_values() {
        let f = fmm(&open(5), &single_goal(Cell::new(2, 2)));
        assert_eq!(f.get(Cell::new(2, 2)), 0.0);
        assert_eq!(f.get(Cell::new(2, 3)), 1.0);
        assert!((f.get(Cell::new(3, 3)) - (1.0 + 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!(f.acceptance.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn obstacles_and_unknown_are_infinite() {
        let m = EpisodicMap::from_rows(&["..#?", "...."]);
        let f = fmm(&m, &single_goal(Cell::new(0, 0)));
        assert!(f.get(Cell::new(2, 1)).is_infinite());
        assert!(f.get(Cell::new(3, 1)).is_infinite());
        assert_eq!(f.get(Cell::new(3, 0)), 3.0);
    }

    #[test]
    fn frontier_cases() {
        assert!(EpisodicMap::new(4, 4).frontiers().is_empty());
        let m = EpisodicMap::from_rows(&["???", "?.?", "???"]);
        assert_eq!(m.frontiers(), BTreeSet::from([Cell::new(1, 1)]));
        assert!(open(4).frontiers().is_empty());
    }

    #[test]
    fn update_is_monotone() {
        let scene = GridScene::from_toml_str(
            "name = \"t\"\nmap = \"\"\"\n.....\n..#..\n.....\n\"\"\"\n",
        )
        .unwrap();
        let mut m = EpisodicMap::new(scene.width, scene.height);
        let obs = scene.observe(0, Pose::new(2, 0, Heading::N), &SensorConfig::default());
        let n = m.update(&obs);
        assert_eq!(n, obs.visible_cells.len() + 1);
        assert_eq!(m.get(Cell::new(2, 1)), CellState::Obstacle);
        assert_eq!(m.get(Cell::new(2, 2)), CellState::Unknown);
        let before = m.clone();
        m.update(&obs);
        assert_eq!(m, before);
    }

    #[test]
    fn stop_forward_and_turns() {
        let f = fmm(&open(5), &single_goal(Cell::new(2, 2)));
        assert_eq!(next_primitive(&f, Pose::new(2, 2, Heading::E)).unwrap(), MovePrimitive::Stop);
        assert_eq!(next_primitive(&f, Pose::new(2, 1, Heading::N)).unwrap(), MovePrimitive::Forward);
        assert_eq!(next_primitive(&f, Pose::new(2, 1, Heading::W)).unwrap(), MovePrimitive::TurnRight);
        assert_eq!(next_primitive(&f, Pose::new(2, 1, Heading::S)).unwrap(), MovePrimitive::TurnLeft);
        assert_eq!(next_primitive(&f, Pose::new(2, 1, Heading::E)).unwrap(), MovePrimitive::TurnLeft);
    }

    #[test]
    fn stuck_when_unreachable() {
        let m = EpisodicMap::from_rows(&[".#."]);
        let f = fmm(&m, &single_goal(Cell::new(2, 0)));
        assert!(next_primitive(&f, Pose::new(0, 0, Heading::E)).is_err());
    }

    #[test]
    fn goal_maps() {
        let m = EpisodicMap::from_rows(&["?????", ".....", "....."]);
        let snap = GraphSnapshot::default();
        let g = build_goal_map(&Action::ExploreScene, &snap, &m, Cell::new(0, 0), 2.0).unwrap();
        assert_eq!(g.cells, m.frontiers());
        assert!(build_goal_map(&Action::ExploreScene, &snap, &open(3), Cell::new(0, 0), 2.0).is_err());
        assert!(build_goal_map(&Action::ExploreObj(NodeId(3)), &snap, &m, Cell::new(0, 0), 2.0).is_err());
    }

    #[test]
    fn rle_roundtrip_counts() {
        let m = EpisodicMap::from_rows(&["??#", "..."]);
        let rle = m.rle();
        assert_eq!(rle, vec![(CellState::Free, 3), (CellState::Unknown, 2), (CellState::Obstacle, 1)]);
        assert_eq!(rle.iter().map(|r| r.1 as usize).sum::<usize>(), 6);
    }
}
