//! Closed-loop style trajectory score with five subscores.
//!
//! `aggregate = 100 * nc * dac * (w_ttc*ttc + w_comfort*comfort + w_ep*ep) / (w_ttc + w_comfort + w_ep)`
//!
//! No-collision and drivable-area compliance gate the score multiplicatively;
//! the remaining three are averaged with config-visible weights.

use serde::{Deserialize, Serialize};

use crate::codec::{Trajectory, WAYPOINTS};
use crate::error::{Error, Result};
use crate::geometry::{first_contact, OrientedBox};
use crate::scene::{Scene, EGO_LENGTH, EGO_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub w_ttc: f64,
    pub w_comfort: f64,
    pub w_ep: f64,
    /// Seconds.
    pub ttc_threshold: f64,
    /// m/s^2, magnitude of the fitted acceleration vector.
    pub max_accel: f64,
    /// m/s^3.
    pub max_jerk: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_ttc: 5.0, w_comfort: 2.0, w_ep: 5.0, ttc_threshold: 1.0, max_accel: 3.0, max_jerk: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub aggregate: f64,
}

impl RewardBreakdown {
    pub fn from_subscores(nc: f64, dac: f64, ttc: f64, comfort: f64, ep: f64, cfg: &RewardConfig) -> Self {
        let wsum = cfg.w_ttc + cfg.w_comfort + cfg.w_ep;
        let mixed = (cfg.w_ttc * ttc + cfg.w_comfort * comfort + cfg.w_ep * ep) / wsum;
        RewardBreakdown { nc, dac, ttc, comfort, ep, aggregate: 100.0 * nc * dac * mixed }
    }
}

/// Heading of each waypoint from its incoming segment; stationary segments
/// keep the previous heading.
fn headings(traj: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(WAYPOINTS);
    let mut prev = [0.0, 0.0];
    let mut h = 0.0;
    for p in &traj.waypoints {
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        if dx.hypot(dy) > 1e-3 {
            h = dy.atan2(dx);
        }
        out.push(h);
        prev = *p;
    }
    out
}

fn ego_boxes(traj: &Trajectory) -> Vec<OrientedBox> {
    traj.waypoints.iter().zip(headings(traj)).map(|(p, h)| OrientedBox::new(*p, h, EGO_LENGTH, EGO_WIDTH)).collect()
}

fn agent_box(agent: &crate::scene::Agent, k: usize) -> OrientedBox {
    let s = agent.states[k];
    OrientedBox::new([s.x, s.y], s.heading, agent.length, agent.width)
}

fn check_contract(traj: &Trajectory, scene: &Scene) -> Result<()> {
    if traj.waypoints.len() != WAYPOINTS {
        return Err(Error::Contract(format!("trajectory has {} waypoints", traj.waypoints.len())));
    }
    if (traj.timestep - scene.expert.timestep).abs() > 1e-12 {
        return Err(Error::Contract(format!("timestep {} does not match scene timestep {}", traj.timestep, scene.expert.timestep)));
    }
    if let Some(a) = scene.agents.iter().find(|a| a.states.len() <= WAYPOINTS) {
        return Err(Error::Contract(format!("agent has {} states, need {}", a.states.len(), WAYPOINTS + 1)));
    }
    Ok(())
}

/// True when the ego footprint overlaps no agent at any matched timestamp.
pub fn collision_free(traj: &Trajectory, scene: &Scene) -> bool {
    let boxes = ego_boxes(traj);
    scene.agents.iter().all(|a| boxes.iter().enumerate().all(|(i, b)| !b.overlaps(&agent_box(a, i + 1))))
}

pub fn dac_subscore(traj: &Trajectory, scene: &Scene) -> f64 {
    if traj.waypoints.iter().all(|p| scene.grid.is_drivable_at(*p)) {
        1.0
    } else {
        0.0
    }
}

/// 1 when no constant-velocity projection from any waypoint reaches an agent
/// footprint within `threshold` seconds.
pub fn ttc_subscore(traj: &Trajectory, scene: &Scene, threshold: f64) -> f64 {
    let dt = traj.timestep;
    let boxes = ego_boxes(traj);
    let mut prev = [0.0, 0.0];
    for (i, (p, ego)) in traj.waypoints.iter().zip(&boxes).enumerate() {
        let k = i + 1;
        let ev = [(p[0] - prev[0]) / dt, (p[1] - prev[1]) / dt];
        prev = *p;
        for a in &scene.agents {
            let av = a.velocity(k, dt);
            let rel = [ev[0] - av[0], ev[1] - av[1]];
            if first_contact(ego, rel, &agent_box(a, k), threshold).is_some() {
                return 0.0;
            }
        }
    }
    1.0
}

/// Least-squares cubic fit of one coordinate over `t = 0, dt, ..., K dt`
/// (the origin included), returning `[c0, c1, c2, c3]`.
fn cubic_fit(values: &[f64], dt: f64) -> [f64; 4] {
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (k, &v) in values.iter().enumerate() {
        let t = k as f64 * dt;
        let row = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            atb[i] += row[i] * v;
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting on the 4x4 normal equations.
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
        ata.swap(col, piv);
        atb.swap(col, piv);
        for r in col + 1..4 {
            let f = ata[r][col] / ata[col][col];
            for c in col..4 {
                ata[r][c] -= f * ata[col][c];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| ata[r][c] * x[c]).sum();
        x[r] = (atb[r] - s) / ata[r][r];
    }
    x
}

/// Peak acceleration magnitude over the waypoint times and the jerk magnitude,
/// from a least-squares cubic fit (a nine-point Savitzky-Golay style
/// derivative stencil).
pub fn accel_and_jerk(traj: &Trajectory) -> (f64, f64) {
    let dt = traj.timestep;
    let xs: Vec<f64> = std::iter::once(0.0).chain(traj.waypoints.iter().map(|p| p[0])).collect();
    let ys: Vec<f64> = std::iter::once(0.0).chain(traj.waypoints.iter().map(|p| p[1])).collect();
    let cx = cubic_fit(&xs, dt);
    let cy = cubic_fit(&ys, dt);
    let accel = (0..=WAYPOINTS)
        .map(|k| {
            let t = k as f64 * dt;
            (2.0 * cx[2] + 6.0 * cx[3] * t).hypot(2.0 * cy[2] + 6.0 * cy[3] * t)
        })
        .fold(0.0, f64::max);
    (accel, (6.0 * cx[3]).hypot(6.0 * cy[3]))
}

pub fn comfort_subscore(traj: &Trajectory, cfg: &RewardConfig) -> f64 {
    let (a, j) = accel_and_jerk(traj);
    if a <= cfg.max_accel && j <= cfg.max_jerk {
        1.0
    } else {
        0.0
    }
}

/// Arc length along `route` (a polyline starting at the origin) of the point
/// nearest to `p`.
fn project_progress(route: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    let mut prev = [0.0, 0.0];
    for q in route {
        let seg = [q[0] - prev[0], q[1] - prev[1]];
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        let u = if len2 > 0.0 { (((p[0] - prev[0]) * seg[0] + (p[1] - prev[1]) * seg[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let c = [prev[0] + u * seg[0], prev[1] + u * seg[1]];
        let d = (p[0] - c[0]).hypot(p[1] - c[1]);
        let len = len2.sqrt();
        if d < best.0 {
            best = (d, acc + u * len);
        }
        acc += len;
        prev = *q;
    }
    best.1
}

/// Progress of the final waypoint along the expert route, as a fraction of
/// the expert's own progress.
pub fn ep_subscore(traj: &Trajectory, scene: &Scene) -> f64 {
    let total = scene.expert.arc_length();
    if total < 1e-6 {
        return 1.0;
    }
    (project_progress(&scene.expert.waypoints, traj.endpoint()) / total).clamp(0.0, 1.0)
}

pub fn score(traj: &Trajectory, scene: &Scene, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    check_contract(traj, scene)?;
    let nc = if collision_free(traj, scene) { 1.0 } else { 0.0 };
    Ok(RewardBreakdown::from_subscores(
        nc,
        dac_subscore(traj, scene),
        ttc_subscore(traj, scene, cfg.ttc_threshold),
        comfort_subscore(traj, cfg),
        ep_subscore(traj, scene),
        cfg,
    ))
}
