//! Synthetic driving scenes.
//!
//! A scene is rendered from a procedurally generated world (a lane-following
//! road with piecewise-constant curvature, other vehicles, and an ego drive)
//! at one instant, in the ego frame: ego at the origin heading along +x.

mod corpus;
mod distance;
mod world;

pub use corpus::{read_corpus, write_corpus, CorpusHeader, SceneRecord, CORPUS_FORMAT, CORPUS_VERSION};
pub use distance::{dac_cost_field, outside_distance, outside_distance_brute_force, CostField};
pub use world::{generate_clip, Clip, World};

use serde::{Deserialize, Serialize};

use crate::codec::{Trajectory, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::rng::SeedTree;

/// Ego footprint, meters.
pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;

/// Binary drivable-area raster. Row `r` spans `y_min + r*res .. y_min + (r+1)*res`,
/// column `c` spans `x_min + c*res ..`; storage is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub drivable: Vec<bool>,
}

impl BevGrid {
    pub fn new(height: usize, width: usize, resolution: f64, x_min: f64, y_min: f64, drivable: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || drivable.len() != height * width {
            return Err(Error::Config(format!("grid {height}x{width} with {} cells", drivable.len())));
        }
        if !(resolution > 0.0) {
            return Err(Error::Config(format!("grid resolution must be positive, got {resolution}")));
        }
        if !drivable.iter().any(|&b| b) {
            return Err(Error::Config("grid has no drivable cell".into()));
        }
        Ok(Self { height, width, resolution, x_min, y_min, drivable })
    }

    /// Grid sharing the coordinate lattice of `vocab` (one cell per bin pair).
    pub fn empty_for(vocab: &Vocabulary) -> (usize, usize, f64) {
        (vocab.bins_y, vocab.bins_x, vocab.width_x())
    }

    pub fn is_aligned_with(&self, vocab: &Vocabulary) -> bool {
        self.width == vocab.bins_x
            && self.height == vocab.bins_y
            && (self.x_min - vocab.x_min).abs() < 1e-9
            && (self.y_min - vocab.y_min).abs() < 1e-9
            && (self.resolution - vocab.width_x()).abs() < 1e-12
            && (self.resolution - vocab.width_y()).abs() < 1e-12
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.drivable[self.index(row, col)]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.resolution).floor();
        let r = ((y - self.y_min) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 || !c.is_finite() || !r.is_finite() {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [self.x_min + (col as f64 + 0.5) * self.resolution, self.y_min + (row as f64 + 0.5) * self.resolution]
    }

    /// Points outside the raster count as not drivable.
    pub fn is_drivable_at(&self, p: [f64; 2]) -> bool {
        self.cell_of(p[0], p[1]).is_some_and(|(r, c)| self.get(r, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub length: f64,
    pub width: f64,
    /// Poses at `t = k * timestep` for `k = 0..=K`.
    pub states: Vec<Pose>,
}

impl Agent {
    pub fn velocity(&self, k: usize, timestep: f64) -> [f64; 2] {
        let (a, b) = if k + 1 < self.states.len() { (k, k + 1) } else { (k - 1, k) };
        [(self.states[b].x - self.states[a].x) / timestep, (self.states[b].y - self.states[a].y) / timestep]
    }

    /// Constant-velocity back-extrapolation one timestep into the past.
    pub fn previous_state(&self) -> Pose {
        let s0 = self.states[0];
        let s1 = self.states[1];
        Pose::new(2.0 * s0.x - s1.x, 2.0 * s0.y - s1.y, s0.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Instruction {
    KeepLane,
    TurnLeft,
    TurnRight,
    Straight,
}

impl Instruction {
    pub const COUNT: usize = 4;

    pub fn id(self) -> usize {
        match self {
            Instruction::KeepLane => 0,
            Instruction::TurnLeft => 1,
            Instruction::TurnRight => 2,
            Instruction::Straight => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: BevGrid,
    pub agents: Vec<Agent>,
    pub instruction: Instruction,
    pub ego: EgoState,
    pub expert: Trajectory,
    pub seed: u64,
    /// Frame index within a clip; 0 for standalone scenes.
    #[serde(default)]
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub agents_min: usize,
    pub agents_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub speed_cap: f64,
    pub accel_max: f64,
    pub max_curvature: f64,
    pub max_lateral_accel: f64,
    pub straight_prob: f64,
    pub segment_min: f64,
    pub segment_max: f64,
    pub lane_width: f64,
    pub extra_left_prob: f64,
    pub extra_right_prob: f64,
    pub agent_margin: f64,
    pub ttc_threshold: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            agents_min: 0,
            agents_max: 3,
            speed_min: 3.0,
            speed_max: 12.0,
            speed_cap: 16.0,
            accel_max: 1.5,
            max_curvature: 0.04,
            max_lateral_accel: 1.5,
            straight_prob: 0.3,
            segment_min: 10.0,
            segment_max: 50.0,
            lane_width: 3.5,
            extra_left_prob: 0.5,
            extra_right_prob: 0.3,
            agent_margin: 0.5,
            ttc_threshold: 1.0,
            max_attempts: 20,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.agents_min <= self.agents_max
            && self.speed_min >= 0.0
            && self.speed_min <= self.speed_max
            && self.speed_max <= self.speed_cap
            && self.accel_max >= 0.0
            && self.max_curvature >= 0.0
            && self.max_lateral_accel > 0.0
            && self.segment_min > 0.0
            && self.segment_min <= self.segment_max
            && self.max_attempts >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid scene config: {self:?}")));
        }
        if !(self.lane_width > 2.0 * crate::codec::Vocabulary::default().width_y()) {
            return Err(Error::Config(format!("lane width {} leaves no drivable corridor", self.lane_width)));
        }
        Ok(())
    }
}

/// Deterministic scene for `seed`, retrying with derived substreams when a
/// sampled world violates the scene invariants.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, vocab: &Vocabulary) -> Result<Scene> {
    generate_scene_counted(seed, cfg, vocab).map(|(scene, _)| scene)
}

/// Like [`generate_scene`], also returning how many attempts were needed.
pub fn generate_scene_counted(seed: u64, cfg: &SceneConfig, vocab: &Vocabulary) -> Result<(Scene, usize)> {
    cfg.validate()?;
    let root = SeedTree::new(seed).child("scene");
    let mut reason = String::new();
    for attempt in 0..cfg.max_attempts {
        let mut rng = root.indexed("attempt", attempt as u64).rng();
        let world = match World::sample(&mut rng, cfg, 0) {
            Ok(w) => w,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let scene = world.scene_at(0, seed, vocab);
        match validate_scene(&scene, vocab) {
            Ok(()) => return Ok((scene, attempt + 1)),
            Err(e) => reason = e.to_string(),
        }
    }
    Err(Error::Generation { seed, attempts: cfg.max_attempts, reason })
}

/// Scene invariants: drivable origin cell, expert inside the vocabulary range
/// and on drivable cells, and no expert/agent overlap at matched timestamps.
pub fn validate_scene(scene: &Scene, vocab: &Vocabulary) -> Result<()> {
    if !scene.grid.is_drivable_at([0.0, 0.0]) {
        return Err(Error::Contract("ego origin cell is not drivable".into()));
    }
    for (k, p) in scene.expert.waypoints.iter().enumerate() {
        if p[0] < vocab.x_min || p[0] >= vocab.x_max || p[1] < vocab.y_min || p[1] >= vocab.y_max {
            return Err(Error::Contract(format!("expert waypoint {k} {p:?} outside the vocabulary range")));
        }
        if !scene.grid.is_drivable_at(*p) {
            return Err(Error::Contract(format!("expert waypoint {k} {p:?} off the drivable area")));
        }
    }
    if !crate::reward::collision_free(&scene.expert, scene) {
        return Err(Error::Contract("expert collides with an agent".into()));
    }
    for a in &scene.agents {
        if a.states.len() <= scene.expert.waypoints.len() {
            return Err(Error::Contract("agent has fewer states than the horizon".into()));
        }
    }
    Ok(())
}
