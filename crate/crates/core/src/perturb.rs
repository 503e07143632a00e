//! Structure-aware trajectory perturbations: progress rescaling along the
//! arc and rigid rotation about the ego origin. Both act on continuous
//! waypoints before tokenization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::Trajectory;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Radians.
    pub alpha_max: f64,
    /// Relative weights of the (longitudinal, lateral) families.
    pub mix: [f64; 2],
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { beta_min: 0.7, beta_max: 1.3, alpha_max: 0.15, mix: [1.0, 1.0] }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < beta_min <= beta_max, got [{}, {}]", self.beta_min, self.beta_max)));
        }
        if !(self.alpha_max >= 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!("alpha_max must be finite and non-negative, got {}", self.alpha_max)));
        }
        if self.mix.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid family weights {:?}", self.mix)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Longitudinal,
    Lateral,
}

/// A drawn perturbation: the family and its parameter (beta or alpha).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub family: Family,
    pub param: f64,
}

impl Perturbation {
    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory> {
        match self.family {
            Family::Longitudinal => perturb_longitudinal(traj, self.param),
            Family::Lateral => Ok(perturb_lateral(traj, self.param)),
        }
    }
}

/// Moves waypoint `i` to arc length `beta * d_i` along the polyline that
/// starts at the ego origin. Targets past the end continue along the last
/// non-degenerate segment.
pub fn perturb_longitudinal(traj: &Trajectory, beta: f64) -> Result<Trajectory> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Range(format!("beta must be positive, got {beta}")));
    }
    let mut pts = Vec::with_capacity(traj.waypoints.len() + 1);
    pts.push([0.0, 0.0]);
    pts.extend_from_slice(&traj.waypoints);
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + crate::codec::dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::Degenerate("trajectory has zero arc length".into()));
    }
    if beta == 1.0 {
        return Ok(traj.clone());
    }
    let last_seg = (1..pts.len()).rev().find(|&j| cum[j] > cum[j - 1]).unwrap();
    let out = cum[1..]
        .iter()
        .map(|&d| interp(&pts, &cum, last_seg, beta * d))
        .collect();
    Trajectory::with_timestep(out, traj.timestep)
}

fn interp(pts: &[[f64; 2]], cum: &[f64], last_seg: usize, s: f64) -> [f64; 2] {
    let j = if s >= cum[last_seg] {
        last_seg
    } else {
        // first segment whose end reaches s
        (1..=last_seg).find(|&j| cum[j] >= s && cum[j] > cum[j - 1]).unwrap()
    };
    if s == cum[j] {
        return pts[j];
    }
    let (a, b) = (pts[j - 1], pts[j]);
    let u = (s - cum[j - 1]) / (cum[j] - cum[j - 1]);
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
}

/// Rotates every waypoint about the ego origin by `alpha` radians.
pub fn perturb_lateral(traj: &Trajectory, alpha: f64) -> Trajectory {
    let (s, c) = alpha.sin_cos();
    let waypoints = traj.waypoints.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
    Trajectory { waypoints, timestep: traj.timestep }
}

pub fn sample_perturbation(rng: &mut Rng, cfg: &PerturbationConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let p_long = cfg.mix[0] / (cfg.mix[0] + cfg.mix[1]);
    let family = if rng.gen::<f64>() < p_long { Family::Longitudinal } else { Family::Lateral };
    let param = match family {
        Family::Longitudinal if cfg.beta_min == cfg.beta_max => cfg.beta_min,
        Family::Longitudinal => rng.gen_range(cfg.beta_min..cfg.beta_max),
        Family::Lateral if cfg.alpha_max == 0.0 => 0.0,
        Family::Lateral => rng.gen_range(-cfg.alpha_max..cfg.alpha_max),
    };
    Ok(Perturbation { family, param })
}
