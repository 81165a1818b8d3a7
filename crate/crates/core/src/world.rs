//! Deterministic multi-room grid world.
//!
//! Scenes are authored as TOML documents: an ASCII occupancy map (first line is
//! the northmost row, `#` wall, `.` free), room rectangles and an object list.
//! Objects occupy a footprint of cells and a band of height layers; small
//! articles rest on receptacles by sharing footprint cells above the
//! receptacle's height band.
//!
//! The simulator uses 4-heading, one-cell kinematics. Observations are a
//! 90 degree raycast cone: a cell is visible when no wall lies on the rounded
//! line between the agent and the cell.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{bfs_distance, in_bounds, Cell, CellRect, Heading, Voxel, VoxelSet};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("episode finished: {0}")]
    EpisodeFinished(&'static str),
    #[error("step budget exhausted: {needed} steps needed, {remaining} remaining")]
    BudgetExhausted { needed: u32, remaining: u32 },
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "obj{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub name: String,
    pub rect: CellRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub label: String,
    pub footprint: Vec<Cell>,
    /// Inclusive height layers `(z_min, z_max)`.
    pub height_band: (i32, i32),
    pub attributes: Vec<String>,
    pub on_receptacle: Option<ObjectId>,
}

impl ObjectInstance {
    pub fn voxels(&self) -> VoxelSet {
        let (z0, z1) = self.height_band;
        self.footprint
            .iter()
            .flat_map(|c| (z0..=z1).map(move |z| Voxel::new(c.x, c.y, z)))
            .collect()
    }

    /// Articles tagged `small` are only resolvable at short range.
    pub fn is_small(&self) -> bool {
        self.attributes.iter().any(|a| a == "small")
    }

    /// Attributes that describe appearance (size-class tags excluded).
    pub fn appearance(&self) -> Vec<String> {
        self.attributes
            .iter()
            .filter(|a| !matches!(a.as_str(), "small" | "large"))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub cell: Cell,
    pub heading: Heading,
}

impl Pose {
    pub fn new(x: i32, y: i32, heading: Heading) -> Self {
        Self {
            cell: Cell::new(x, y),
            heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovePrimitive {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl MovePrimitive {
    pub fn code(self) -> char {
        match self {
            MovePrimitive::Forward => 'F',
            MovePrimitive::TurnLeft => 'L',
            MovePrimitive::TurnRight => 'R',
            MovePrimitive::Stop => 'S',
        }
    }

    /// Parses a compact script such as `"FFLFR"`; whitespace is ignored.
    pub fn parse_script(script: &str) -> Result<Vec<MovePrimitive>, WorldError> {
        script
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c.to_ascii_uppercase() {
                'F' => Ok(MovePrimitive::Forward),
                'L' => Ok(MovePrimitive::TurnLeft),
                'R' => Ok(MovePrimitive::TurnRight),
                'S' => Ok(MovePrimitive::Stop),
                other => Err(WorldError::Parse(format!("unknown primitive '{other}'"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibleCell {
    pub cell: Cell,
    /// Distance from the agent in cells (depth surrogate).
    pub range: f64,
    /// Wall or object footprint.
    pub occupied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub id: ObjectId,
    /// Ground-truth label, consumed only by the simulated detector.
    pub label: String,
    pub voxels: VoxelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: u32,
    pub pose: Pose,
    pub visible_cells: Vec<VisibleCell>,
    pub visible_objects: Vec<VisibleObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub fov_deg: f64,
    pub range: f64,
    /// Objects tagged `small` are reported only when a visible column lies within this range.
    pub small_object_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            fov_deg: 90.0,
            range: 12.0,
            small_object_range: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub name: String,
    pub scene: PathBuf,
    pub start: Pose,
    pub target_label: String,
    pub step_budget: u32,
    pub success_radius: i32,
    /// Optional fixed primitive script for scripted probes.
    pub script: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridScene {
    pub name: String,
    pub width: i32,
    pub height: i32,
    pub cell_size: f64,
    walls: Vec<bool>,
    occupied: Vec<bool>,
    pub rooms: Vec<Room>,
    pub objects: Vec<ObjectInstance>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    name: String,
    #[serde(default = "default_cell_size")]
    cell_size: f64,
    map: String,
    #[serde(default)]
    rooms: Vec<RoomDoc>,
    #[serde(default)]
    objects: Vec<ObjectDoc>,
}

fn default_cell_size() -> f64 {
    0.25
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomDoc {
    name: String,
    rect: [i32; 4],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: u32,
    label: String,
    #[serde(default)]
    rect: Option<[i32; 4]>,
    #[serde(default)]
    cells: Vec<[i32; 2]>,
    z: [i32; 2],
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    on: Option<u32>,
}

impl GridScene {
    pub fn from_toml_str(text: &str) -> Result<Self, WorldError> {
        let doc: SceneDoc = toml::from_str(text).map_err(|e| WorldError::Parse(e.to_string()))?;
        let rows: Vec<&str> = doc
            .map
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(WorldError::Parse("empty map".into()));
        }
        let width = rows[0].chars().count();
        if rows.iter().any(|r| r.chars().count() != width) {
            return Err(WorldError::Parse("map rows differ in length".into()));
        }
        let height = rows.len() as i32;
        let width = width as i32;
        let mut walls = vec![false; (width * height) as usize];
        for (row, line) in rows.iter().enumerate() {
            let y = height - 1 - row as i32;
            for (x, ch) in line.chars().enumerate() {
                let wall = match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(WorldError::Parse(format!(
                            "unknown map character '{other}' at row {row}"
                        )))
                    }
                };
                walls[(y * width + x as i32) as usize] = wall;
            }
        }
        let rooms = doc
            .rooms
            .into_iter()
            .map(|r| Room {
                name: r.name,
                rect: CellRect::new(r.rect[0], r.rect[1], r.rect[2], r.rect[3]),
            })
            .collect();
        let mut objects = Vec::with_capacity(doc.objects.len());
        for o in doc.objects {
            let mut footprint: Vec<Cell> = o.cells.iter().map(|c| Cell::new(c[0], c[1])).collect();
            if let Some(r) = o.rect {
                footprint.extend(CellRect::new(r[0], r[1], r[2], r[3]).cells());
            }
            footprint.sort();
            footprint.dedup();
            objects.push(ObjectInstance {
                id: ObjectId(o.id),
                label: o.label,
                footprint,
                height_band: (o.z[0], o.z[1]),
                attributes: o.attributes,
                on_receptacle: o.on.map(ObjectId),
            });
        }
        let mut scene = GridScene {
            name: doc.name,
            width,
            height,
            cell_size: doc.cell_size,
            occupied: vec![false; walls.len()],
            walls,
            rooms,
            objects,
        };
        for o in &scene.objects {
            for c in &o.footprint {
                if scene.in_bounds(*c) {
                    let i = scene.idx(*c);
                    scene.occupied[i] = true;
                }
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<(), WorldError> {
        let invalid = |m: String| Err(WorldError::Invalid(m));
        for (i, r) in self.rooms.iter().enumerate() {
            for c in r.rect.cells() {
                if !self.in_bounds(c) || self.is_wall(c) {
                    return invalid(format!("room '{}' covers wall or out-of-bounds cell {c}", r.name));
                }
            }
            for other in &self.rooms[i + 1..] {
                if r.rect.overlaps(&other.rect) {
                    return invalid(format!("rooms '{}' and '{}' overlap", r.name, other.name));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return invalid(format!("duplicate object id {}", o.id));
            }
            if o.footprint.is_empty() {
                return invalid(format!("object {} has an empty footprint", o.id));
            }
            if o.height_band.0 < 0 || o.height_band.0 > o.height_band.1 {
                return invalid(format!("object {} has an invalid height band", o.id));
            }
            if !footprint_connected(&o.footprint) {
                return invalid(format!("object {} footprint is not connected", o.id));
            }
            let mut room = None;
            for c in &o.footprint {
                if !self.in_bounds(*c) || self.is_wall(*c) {
                    return invalid(format!("object {} lies on a wall at {c}", o.id));
                }
                let r = self.room_index(*c);
                if r.is_none() || (room.is_some() && room != r) {
                    return invalid(format!("object {} is not inside exactly one room", o.id));
                }
                room = r;
            }
        }
        // Shared footprint cells are only allowed for an article resting on its receptacle.
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let shared = a.footprint.iter().any(|c| b.footprint.contains(c));
                if !shared {
                    continue;
                }
                let stacked = |top: &ObjectInstance, base: &ObjectInstance| {
                    top.on_receptacle == Some(base.id) && top.height_band.0 > base.height_band.1
                };
                if !(stacked(a, b) || stacked(b, a)) {
                    return invalid(format!("objects {} and {} overlap", a.id, b.id));
                }
            }
        }
        Ok(())
    }

    pub fn idx(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        in_bounds(self.width, self.height, c)
    }

    /// Out-of-bounds cells count as walls.
    pub fn is_wall(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.walls[self.idx(c)]
    }

    pub fn is_object(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.occupied[self.idx(c)]
    }

    /// Free space the agent can stand on.
    pub fn is_passable(&self, c: Cell) -> bool {
        !self.is_wall(c) && !self.is_object(c)
    }

    fn room_index(&self, c: Cell) -> Option<usize> {
        self.rooms.iter().position(|r| r.rect.contains(c))
    }

    pub fn room_at(&self, c: Cell) -> Option<&Room> {
        self.room_index(c).map(|i| &self.rooms[i])
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn objects_labeled<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a ObjectInstance> + 'a {
        self.objects.iter().filter(move |o| o.label == label)
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }

    /// Passable cells within Chebyshev distance `radius` of any instance of `label`.
    pub fn success_region(&self, label: &str, radius: i32) -> BTreeSet<Cell> {
        let mut region = BTreeSet::new();
        for o in self.objects_labeled(label) {
            for c in &o.footprint {
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let n = c.offset(dx, dy);
                        if self.is_passable(n) {
                            region.insert(n);
                        }
                    }
                }
            }
        }
        region
    }

    pub fn within_success(&self, cell: Cell, label: &str, radius: i32) -> bool {
        self.objects_labeled(label)
            .any(|o| o.footprint.iter().any(|c| c.chebyshev(cell) <= radius))
    }

    /// Cells on the rounded line from `from` to `to`, excluding both endpoints.
    pub fn line_between(from: Cell, to: Cell) -> impl Iterator<Item = Cell> {
        let dx = to.x - from.x;
        let dy = to.y - from.y;
        let n = dx.abs().max(dy.abs());
        (1..n.max(1)).filter(move |_| n > 1).map(move |i| {
            let t = f64::from(i) / f64::from(n);
            Cell::new(
                from.x + (t * f64::from(dx)).round() as i32,
                from.y + (t * f64::from(dy)).round() as i32,
            )
        })
    }

    /// Raycast visibility cone for a pose. Cells are returned in row-major order.
    pub fn visible_cells(&self, pose: Pose, sensor: &SensorConfig) -> Vec<VisibleCell> {
        let r = sensor.range.ceil() as i32;
        let half = (sensor.fov_deg / 2.0).to_radians();
        let cos_half = half.cos() - 1e-9;
        let (hx, hy) = pose.heading.delta();
        let origin = pose.cell;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let c = origin.offset(dx, dy);
                if !self.in_bounds(c) {
                    continue;
                }
                let dist = f64::from(dx).hypot(f64::from(dy));
                if dist > sensor.range + 1e-9 {
                    continue;
                }
                let cos = f64::from(dx * hx + dy * hy) / dist;
                if cos < cos_half {
                    continue;
                }
                if Self::line_between(origin, c).any(|m| self.is_wall(m)) {
                    continue;
                }
                out.push(VisibleCell {
                    cell: c,
                    range: dist,
                    occupied: self.is_wall(c) || self.is_object(c),
                });
            }
        }
        out
    }

    pub fn observe(&self, step: u32, pose: Pose, sensor: &SensorConfig) -> Observation {
        let visible_cells = self.visible_cells(pose, sensor);
        let columns: BTreeMap<Cell, f64> = visible_cells.iter().map(|v| (v.cell, v.range)).collect();
        let mut visible_objects = Vec::new();
        for o in &self.objects {
            let seen: Vec<Cell> = o
                .footprint
                .iter()
                .copied()
                .filter(|c| columns.contains_key(c))
                .collect();
            if seen.is_empty() {
                continue;
            }
            if o.is_small() {
                let nearest = seen.iter().map(|c| columns[c]).fold(f64::INFINITY, f64::min);
                if nearest > sensor.small_object_range + 1e-9 {
                    continue;
                }
            }
            let (z0, z1) = o.height_band;
            let voxels = seen
                .iter()
                .flat_map(|c| (z0..=z1).map(move |z| Voxel::new(c.x, c.y, z)))
                .collect();
            visible_objects.push(VisibleObject {
                id: o.id,
                label: o.label.clone(),
                voxels,
            });
        }
        Observation {
            step,
            pose,
            visible_cells,
            visible_objects,
        }
    }

    /// Length of the shortest 4-connected obstacle-free path from `from` to any cell of `region`.
    pub fn shortest_path_length(&self, from: Cell, region: &BTreeSet<Cell>) -> Option<u32> {
        bfs_distance(self.width, self.height, |c| self.is_passable(c), from, region)
    }

    /// ASCII rendering with the first line as the northmost row.
    pub fn render(&self, agent: Option<Pose>) -> String {
        let mut s = String::new();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if agent.map(|p| p.cell) == Some(c) {
                    match agent.map(|p| p.heading) {
                        Some(Heading::N) => '^',
                        Some(Heading::E) => '>',
                        Some(Heading::S) => 'v',
                        _ => '<',
                    }
                } else if self.is_wall(c) {
                    '#'
                } else if self.is_object(c) {
                    'o'
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

fn footprint_connected(cells: &[Cell]) -> bool {
    let set: BTreeSet<Cell> = cells.iter().copied().collect();
    let mut seen = BTreeSet::from([cells[0]]);
    let mut stack = vec![cells[0]];
    while let Some(c) = stack.pop() {
        for n in c.neighbors4() {
            if set.contains(&n) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == set.len()
}

/// Episode-scoped simulator state. The scene is shared and immutable.
#[derive(Debug, Clone)]
pub struct Simulator {
    scene: Arc<GridScene>,
    sensor: SensorConfig,
    pose: Pose,
    steps: u32,
    budget: u32,
    stopped: bool,
    path_length: u32,
}

impl Simulator {
    pub fn new(scene: Arc<GridScene>, start: Pose, budget: u32, sensor: SensorConfig) -> Result<Self, WorldError> {
        if !scene.is_passable(start.cell) {
            return Err(WorldError::Invalid(format!("start cell {} is not free", start.cell)));
        }
        Ok(Self {
            scene,
            sensor,
            pose: start,
            steps: 0,
            budget,
            stopped: false,
            path_length: 0,
        })
    }

    pub fn scene(&self) -> &Arc<GridScene> {
        &self.scene
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps
    }

    pub fn remaining(&self) -> u32 {
        self.budget.saturating_sub(self.steps)
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Cells travelled by successful forward moves.
    pub fn path_length(&self) -> u32 {
        self.path_length
    }

    /// Observation at the current pose without consuming a step.
    pub fn observe(&self) -> Observation {
        self.scene.observe(self.steps, self.pose, &self.sensor)
    }

    pub fn step(&mut self, action: MovePrimitive) -> Result<Observation, WorldError> {
        if self.stopped {
            return Err(WorldError::EpisodeFinished("stop already issued"));
        }
        if self.steps >= self.budget {
            return Err(WorldError::EpisodeFinished("step budget exhausted"));
        }
        match action {
            MovePrimitive::Forward => {
                let next = self.pose.cell.step(self.pose.heading);
                if self.scene.is_passable(next) {
                    self.pose.cell = next;
                    self.path_length += 1;
                }
            }
            MovePrimitive::TurnLeft => self.pose.heading = self.pose.heading.left(),
            MovePrimitive::TurnRight => self.pose.heading = self.pose.heading.right(),
            MovePrimitive::Stop => self.stopped = true,
        }
        self.steps += 1;
        Ok(self.observe())
    }

    /// Four left turns, returning the observation after each.
    pub fn pan_around(&mut self) -> Result<Vec<Observation>, WorldError> {
        if self.stopped {
            return Err(WorldError::EpisodeFinished("stop already issued"));
        }
        if self.remaining() < 4 {
            return Err(WorldError::BudgetExhausted {
                needed: 4,
                remaining: self.remaining(),
            });
        }
        (0..4).map(|_| self.step(MovePrimitive::TurnLeft)).collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteDoc {
    episodes: Vec<EpisodeDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeDoc {
    name: String,
    scene: PathBuf,
    start: [i32; 2],
    heading: String,
    target: String,
    #[serde(default = "default_budget")]
    step_budget: u32,
    #[serde(default = "default_success_radius")]
    success_radius: i32,
    #[serde(default)]
    script: Option<String>,
}

fn default_budget() -> u32 {
    500
}

fn default_success_radius() -> i32 {
    2
}

/// A list of episodes with their scenes loaded.
#[derive(Debug, Clone)]
pub struct EpisodeSuite {
    pub episodes: Vec<(EpisodeSpec, Arc<GridScene>)>,
}

impl EpisodeSuite {
    /// Parses an episode file; scene paths are resolved by `resolve_scene`.
    pub fn from_toml_str(
        text: &str,
        mut resolve_scene: impl FnMut(&Path) -> Result<GridScene, WorldError>,
    ) -> Result<Self, WorldError> {
        let doc: SuiteDoc = toml::from_str(text).map_err(|e| WorldError::Parse(e.to_string()))?;
        let mut cache: BTreeMap<PathBuf, Arc<GridScene>> = BTreeMap::new();
        let mut episodes = Vec::new();
        for e in doc.episodes {
            let scene = match cache.get(&e.scene) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(resolve_scene(&e.scene)?);
                    cache.insert(e.scene.clone(), s.clone());
                    s
                }
            };
            let heading = Heading::parse(&e.heading)
                .ok_or_else(|| WorldError::Parse(format!("bad heading '{}'", e.heading)))?;
            let spec = EpisodeSpec {
                name: e.name,
                scene: e.scene,
                start: Pose::new(e.start[0], e.start[1], heading),
                target_label: e.target,
                step_budget: e.step_budget,
                success_radius: e.success_radius,
                script: e.script,
            };
            validate_episode(&spec, &scene)?;
            episodes.push((spec, scene));
        }
        Ok(Self { episodes })
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, |p| GridScene::load(&base.join(p)))
    }

    pub fn get(&self, name: &str) -> Option<&(EpisodeSpec, Arc<GridScene>)> {
        self.episodes.iter().find(|(e, _)| e.name == name)
    }
}

/// The 16-episode suite shipped with this crate.
pub fn bundled_suite_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/suite.toml")
}

pub fn validate_episode(spec: &EpisodeSpec, scene: &GridScene) -> Result<(), WorldError> {
    if scene.objects_labeled(&spec.target_label).next().is_none() {
        return Err(WorldError::Invalid(format!(
            "episode '{}': no instance of target '{}'",
            spec.name, spec.target_label
        )));
    }
    if !scene.is_passable(spec.start.cell) {
        return Err(WorldError::Invalid(format!(
            "episode '{}': start {} is not free",
            spec.name, spec.start.cell
        )));
    }
    Ok(())
}
