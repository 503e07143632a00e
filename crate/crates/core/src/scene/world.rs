use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Agent, BevGrid, EgoState, Instruction, Scene, SceneConfig, EGO_LENGTH, EGO_WIDTH};
use crate::codec::{Trajectory, Vocabulary, DEFAULT_TIMESTEP, WAYPOINTS};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pose};
use crate::rng::{Rng, SeedTree};

const ROAD_BEHIND: f64 = 30.0;
const ROAD_AHEAD: f64 = 90.0;
const SAMPLE_STEP: f64 = 0.5;
const COARSE_STRIDE: usize = 8;
const MAX_ROAD_HEADING: f64 = 1.2;
const TURN_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Segment {
    length: f64,
    curvature: f64,
}

/// Lane centerline starting at the world origin heading along +x, straight
/// behind the origin, piecewise-constant curvature ahead of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    segments: Vec<Segment>,
    starts: Vec<Pose>,
    pub lane_width: f64,
    pub left_lanes: u8,
    pub right_lanes: u8,
    samples: Vec<(f64, Pose)>,
}

fn advance(p: Pose, d: f64, k: f64) -> Pose {
    if k.abs() < 1e-12 {
        let (s, c) = p.heading.sin_cos();
        Pose::new(p.x + d * c, p.y + d * s, p.heading)
    } else {
        let h1 = p.heading + k * d;
        Pose::new(p.x + (h1.sin() - p.heading.sin()) / k, p.y - (h1.cos() - p.heading.cos()) / k, h1)
    }
}

impl Road {
    fn new(segments: Vec<Segment>, lane_width: f64, left_lanes: u8, right_lanes: u8) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut p = Pose::new(0.0, 0.0, 0.0);
        for seg in &segments {
            starts.push(p);
            p = advance(p, seg.length, seg.curvature);
        }
        let mut road = Road { segments, starts, lane_width, left_lanes, right_lanes, samples: Vec::new() };
        let end = road.length();
        let n = ((end + ROAD_BEHIND) / SAMPLE_STEP).floor() as usize;
        road.samples = (0..=n)
            .map(|i| {
                let s = -ROAD_BEHIND + i as f64 * SAMPLE_STEP;
                (s, road.pose_at(s))
            })
            .collect();
        road
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for seg in &self.segments {
            if s < acc + seg.length {
                return if s < 0.0 { 0.0 } else { seg.curvature };
            }
            acc += seg.length;
        }
        self.segments.last().map_or(0.0, |s| s.curvature)
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        if s <= 0.0 {
            return Pose::new(s, 0.0, 0.0);
        }
        let mut acc = 0.0;
        for (seg, start) in self.segments.iter().zip(&self.starts) {
            if s <= acc + seg.length {
                return advance(*start, s - acc, seg.curvature);
            }
            acc += seg.length;
        }
        let last = self.segments.len() - 1;
        advance(self.starts[last], s - (acc - self.segments[last].length), self.segments[last].curvature)
    }

    /// Pose offset laterally (positive to the left) from the centerline.
    pub fn offset_pose(&self, s: f64, lateral: f64) -> Pose {
        let p = self.pose_at(s);
        let (sn, cs) = p.heading.sin_cos();
        Pose::new(p.x - lateral * sn, p.y + lateral * cs, p.heading)
    }

    /// Signed lateral offset of a world point from the centerline, `None`
    /// when the nearest centerline point is at either end of the sampled road.
    fn lateral_offset(&self, p: [f64; 2]) -> Option<f64> {
        let d2 = |i: usize| {
            let q = self.samples[i].1;
            (q.x - p[0]).powi(2) + (q.y - p[1]).powi(2)
        };
        let n = self.samples.len();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in (0..n).step_by(COARSE_STRIDE) {
            let d = d2(i);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let lo = best.saturating_sub(COARSE_STRIDE);
        let hi = (best + COARSE_STRIDE).min(n - 1);
        for i in lo..=hi {
            let d = d2(i);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if best == 0 || best == n - 1 {
            return None;
        }
        let q = self.samples[best].1;
        let (s, c) = q.heading.sin_cos();
        Some(-s * (p[0] - q.x) + c * (p[1] - q.y))
    }

    fn is_drivable(&self, p: [f64; 2]) -> bool {
        let half = self.lane_width / 2.0;
        self.lateral_offset(p).is_some_and(|off| {
            off >= -(half + self.right_lanes as f64 * self.lane_width) && off <= half + self.left_lanes as f64 * self.lane_width
        })
    }

    fn max_abs_heading(&self) -> f64 {
        let mut h = 0.0f64;
        let mut p = Pose::new(0.0, 0.0, 0.0);
        for seg in &self.segments {
            p = advance(p, seg.length, seg.curvature);
            h = h.max(p.heading.abs());
        }
        h
    }
}

/// Ego speed profile: constant acceleration, speed clamped to `[0, cap]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Drive {
    v0: f64,
    accel: f64,
    cap: f64,
}

impl Drive {
    fn speed(&self, t: f64) -> f64 {
        (self.v0 + self.accel * t).clamp(0.0, self.cap)
    }

    fn accel_at(&self, t: f64) -> f64 {
        let v = self.v0 + self.accel * t;
        if v <= 0.0 || v >= self.cap {
            0.0
        } else {
            self.accel
        }
    }

    fn distance(&self, t: f64) -> f64 {
        // time until the clamp engages
        let t_clamp = if self.accel > 0.0 {
            ((self.cap - self.v0) / self.accel).max(0.0)
        } else if self.accel < 0.0 {
            (self.v0 / -self.accel).max(0.0)
        } else {
            f64::INFINITY
        };
        let tc = t.min(t_clamp);
        let mut d = self.v0 * tc + 0.5 * self.accel * tc * tc;
        if t > tc {
            d += self.speed(t_clamp) * (t - tc);
        }
        d
    }

    fn max_speed(&self, duration: f64) -> f64 {
        self.speed(0.0).max(self.speed(duration))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct WorldAgent {
    lateral: f64,
    direction: f64,
    s0: f64,
    speed: f64,
    length: f64,
    width: f64,
}

impl WorldAgent {
    fn pose(&self, road: &Road, t: f64) -> Pose {
        let mut p = road.offset_pose(self.s0 + self.direction * self.speed * t, self.lateral);
        if self.direction < 0.0 {
            p.heading += std::f64::consts::PI;
        }
        p
    }

    fn footprint(&self, road: &Road, t: f64) -> OrientedBox {
        let p = self.pose(road, t);
        OrientedBox::new([p.x, p.y], p.heading, self.length, self.width)
    }
}

/// A sampled world: road, ego drive, and other agents, all in world
/// coordinates. Scenes are snapshots of it at frame times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    road: Road,
    drive: Drive,
    agents: Vec<WorldAgent>,
    timestep: f64,
}

impl World {
    /// Samples a world covering `frames` extra frames beyond the first
    /// planning horizon.
    pub fn sample(rng: &mut Rng, cfg: &SceneConfig, frames: usize) -> Result<World> {
        let timestep = DEFAULT_TIMESTEP;
        let duration = (frames + WAYPOINTS) as f64 * timestep;
        let drive = Drive {
            v0: rng.gen_range(cfg.speed_min..=cfg.speed_max),
            accel: rng.gen_range(-cfg.accel_max..=cfg.accel_max),
            cap: cfg.speed_cap,
        };
        let v_max = drive.max_speed(duration).max(1.0);
        let k_max = cfg.max_curvature.min(cfg.max_lateral_accel / (v_max * v_max));
        let needed = drive.distance(duration) + ROAD_AHEAD;

        let mut road = None;
        for _ in 0..50 {
            let mut segments = Vec::new();
            let mut total = 0.0;
            while total < needed {
                let length = rng.gen_range(cfg.segment_min..=cfg.segment_max);
                let curvature = if rng.gen_bool(cfg.straight_prob.clamp(0.0, 1.0)) || k_max == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-k_max..=k_max)
                };
                segments.push(Segment { length, curvature });
                total += length;
            }
            let left = rng.gen_bool(cfg.extra_left_prob.clamp(0.0, 1.0)) as u8;
            let right = rng.gen_bool(cfg.extra_right_prob.clamp(0.0, 1.0)) as u8;
            let candidate = Road::new(segments, cfg.lane_width, left, right);
            if candidate.max_abs_heading() <= MAX_ROAD_HEADING {
                road = Some(candidate);
                break;
            }
        }
        let road = road.ok_or_else(|| Error::Generation { seed: 0, attempts: 50, reason: "road heading bound".into() })?;

        let mut world = World { road, drive, agents: Vec::new(), timestep };
        let n_agents = rng.gen_range(cfg.agents_min..=cfg.agents_max);
        for _ in 0..n_agents {
            for _ in 0..10 {
                let agent = world.sample_agent(rng, cfg, duration);
                if world.agent_is_compatible(&agent, cfg, frames) {
                    world.agents.push(agent);
                    break;
                }
            }
        }
        Ok(world)
    }

    fn sample_agent(&self, rng: &mut Rng, cfg: &SceneConfig, duration: f64) -> WorldAgent {
        let mut lanes = vec![0i32];
        if self.road.left_lanes > 0 {
            lanes.push(1);
        }
        if self.road.right_lanes > 0 {
            lanes.push(-1);
        }
        let lane = lanes[rng.gen_range(0..lanes.len())];
        let length = rng.gen_range(4.0..=5.0);
        let width = rng.gen_range(1.8..=2.1);
        let ego_far = self.drive.distance(duration);
        match lane {
            0 => WorldAgent {
                lateral: 0.0,
                direction: 1.0,
                s0: rng.gen_range(12.0..=60.0),
                speed: self.drive.max_speed(duration) + rng.gen_range(0.5..=3.0),
                length,
                width,
            },
            l => {
                let direction = if l > 0 && rng.gen_bool(0.5) { -1.0 } else { 1.0 };
                WorldAgent {
                    lateral: l as f64 * cfg.lane_width,
                    direction,
                    s0: rng.gen_range(-10.0..=(ego_far + 40.0)),
                    speed: rng.gen_range(0.0..=12.0),
                    length,
                    width,
                }
            }
        }
    }

    fn ego_pose(&self, t: f64) -> Pose {
        self.road.pose_at(self.drive.distance(t))
    }

    /// Agents must keep clear of the ego drive (with margin) and must not
    /// trigger the time-to-collision check against it, over every frame.
    fn agent_is_compatible(&self, agent: &WorldAgent, cfg: &SceneConfig, frames: usize) -> bool {
        let steps = frames + WAYPOINTS;
        for k in 0..=steps {
            let t = k as f64 * self.timestep;
            let ego = self.ego_pose(t);
            let ego_box = OrientedBox::new([ego.x, ego.y], ego.heading, EGO_LENGTH + 2.0 * cfg.agent_margin, EGO_WIDTH + 2.0 * cfg.agent_margin);
            let other = agent.footprint(&self.road, t);
            if ego_box.overlaps(&other) {
                return false;
            }
            if k > 0 {
                let prev = self.ego_pose(t - self.timestep);
                let ev = [(ego.x - prev.x) / self.timestep, (ego.y - prev.y) / self.timestep];
                let next = agent.footprint(&self.road, t + self.timestep);
                let av = [(next.center[0] - other.center[0]) / self.timestep, (next.center[1] - other.center[1]) / self.timestep];
                let rel = [ev[0] - av[0], ev[1] - av[1]];
                let plain = OrientedBox::new([ego.x, ego.y], ego.heading, EGO_LENGTH, EGO_WIDTH);
                if crate::geometry::first_contact(&plain, rel, &other, cfg.ttc_threshold + 0.5).is_some() {
                    return false;
                }
            }
        }
        true
    }

    pub fn timestep(&self) -> f64 {
        self.timestep
    }

    /// Ego motion between two frames, expressed in the earlier frame.
    pub fn ego_motion(&self, from_frame: usize, to_frame: usize) -> Pose {
        let a = self.ego_pose(from_frame as f64 * self.timestep);
        let b = self.ego_pose(to_frame as f64 * self.timestep);
        a.pose_to_local(&b)
    }

    /// Ego-frame snapshot at `frame`.
    pub fn scene_at(&self, frame: usize, seed: u64, vocab: &Vocabulary) -> Scene {
        let t0 = frame as f64 * self.timestep;
        let s0 = self.drive.distance(t0);
        let ego = self.road.pose_at(s0);

        let (height, width, res) = BevGrid::empty_for(vocab);
        let mut drivable = vec![false; height * width];
        for r in 0..height {
            for c in 0..width {
                let local = [vocab.x_min + (c as f64 + 0.5) * res, vocab.y_min + (r as f64 + 0.5) * res];
                drivable[r * width + c] = self.road.is_drivable(ego.to_world(local));
            }
        }
        // The ego always sits on its own lane; guarantee the origin cell even
        // when the lane centre falls on a cell edge.
        let origin = ((0.0 - vocab.y_min) / res).floor() as usize * width + ((0.0 - vocab.x_min) / res).floor() as usize;
        if origin < drivable.len() {
            drivable[origin] = true;
        }
        let grid = BevGrid { height, width, resolution: res, x_min: vocab.x_min, y_min: vocab.y_min, drivable };

        let waypoints: Vec<[f64; 2]> = (1..=WAYPOINTS)
            .map(|k| {
                let p = self.ego_pose(t0 + k as f64 * self.timestep);
                ego.to_local([p.x, p.y])
            })
            .collect();
        let expert = Trajectory::with_timestep(waypoints, self.timestep).expect("finite expert");

        let agents = self
            .agents
            .iter()
            .map(|a| Agent {
                length: a.length,
                width: a.width,
                states: (0..=WAYPOINTS).map(|k| ego.pose_to_local(&a.pose(&self.road, t0 + k as f64 * self.timestep))).collect(),
            })
            .collect();

        let speed = self.drive.speed(t0);
        let ego_state = EgoState { speed, accel: self.drive.accel_at(t0), yaw_rate: speed * self.road.curvature_at(s0) };

        let s_end = self.drive.distance(t0 + WAYPOINTS as f64 * self.timestep);
        let turn = crate::geometry::wrap_angle(self.road.pose_at(s_end).heading - ego.heading);
        let curved = (0..=16).any(|i| self.road.curvature_at(s0 + (s_end - s0) * i as f64 / 16.0).abs() > 1e-12);
        let instruction = if turn > TURN_THRESHOLD {
            Instruction::TurnLeft
        } else if turn < -TURN_THRESHOLD {
            Instruction::TurnRight
        } else if !curved {
            Instruction::Straight
        } else {
            Instruction::KeepLane
        };

        Scene { grid, agents, instruction, ego: ego_state, expert, seed, frame }
    }
}

/// Consecutive ego-frame snapshots of one world, `dt` apart.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Scene>,
    /// `motions[f]` is the ego motion from frame `f - 1` to frame `f`
    /// (identity for `f = 0`).
    pub motions: Vec<Pose>,
}

pub fn generate_clip(seed: u64, frames: usize, cfg: &SceneConfig, vocab: &Vocabulary) -> Result<Clip> {
    cfg.validate()?;
    let root = SeedTree::new(seed).child("clip");
    let mut reason = String::new();
    'attempts: for attempt in 0..cfg.max_attempts {
        let mut rng = root.indexed("attempt", attempt as u64).rng();
        let world = match World::sample(&mut rng, cfg, frames) {
            Ok(w) => w,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let mut scenes = Vec::with_capacity(frames);
        for f in 0..frames {
            let scene = world.scene_at(f, seed, vocab);
            if let Err(e) = super::validate_scene(&scene, vocab) {
                reason = format!("frame {f}: {e}");
                continue 'attempts;
            }
            scenes.push(scene);
        }
        let motions = (0..frames)
            .map(|f| if f == 0 { Pose::new(0.0, 0.0, 0.0) } else { world.ego_motion(f - 1, f) })
            .collect();
        return Ok(Clip { frames: scenes, motions });
    }
    Err(Error::Generation { seed, attempts: cfg.max_attempts, reason })
}
