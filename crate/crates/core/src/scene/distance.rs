//! Distance to the drivable area and the compliance cost derived from it.

use serde::{Deserialize, Serialize};

use super::BevGrid;
use crate::error::{Error, Result};

/// Non-negative per-cell penalty, row-major like the grid it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostField {
    pub height: usize,
    pub width: usize,
    pub cost: Vec<f64>,
    pub r_dac: f64,
    pub eps_safe: f64,
}

impl CostField {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.width + col]
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, cost: vec![0.0; height * width], r_dac: 0.0, eps_safe: 0.0 }
    }
}

const INF: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). Exact for integer-valued inputs.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// `r_dac` times the exact Euclidean distance (in cells) from each cell to
/// the nearest drivable cell; zero on drivable cells.
pub fn outside_distance(grid: &BevGrid, r_dac: f64) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut stage = vec![0.0; h * w];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = if grid.get(r, c) { 0.0 } else { INF };
        }
        dt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for r in 0..h {
            stage[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        dt_1d(&stage[r * w..(r + 1) * w], &mut row_out, &mut v, &mut z);
        for c in 0..w {
            out[r * w + c] = if grid.get(r, c) { 0.0 } else { r_dac * row_out[c].sqrt() };
        }
    }
    out
}

/// Quadratic-time reference: minimum over all drivable cells.
pub fn outside_distance_brute_force(grid: &BevGrid, r_dac: f64) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let drivable: Vec<(i64, i64)> =
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| grid.get(r, c)).map(|(r, c)| (r as i64, c as i64)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if grid.get(r, c) {
                continue;
            }
            let best = drivable
                .iter()
                .map(|&(u, v)| (r as i64 - u).pow(2) + (c as i64 - v).pow(2))
                .min()
                .expect("grid has a drivable cell");
            out[r * w + c] = r_dac * (best as f64).sqrt();
        }
    }
    out
}

/// `max(0, d_out - eps_safe)` per cell.
pub fn dac_cost_field(grid: &BevGrid, r_dac: f64, eps_safe: f64) -> Result<CostField> {
    if !(eps_safe >= 0.0) || !eps_safe.is_finite() {
        return Err(Error::Config(format!("eps_safe must be finite and non-negative, got {eps_safe}")));
    }
    if !(r_dac >= 0.0) || !r_dac.is_finite() {
        return Err(Error::Config(format!("r_dac must be finite and non-negative, got {r_dac}")));
    }
    let cost = outside_distance(grid, r_dac).into_iter().map(|d| (d - eps_safe).max(0.0)).collect();
    Ok(CostField { height: grid.height, width: grid.width, cost, r_dac, eps_safe })
}
