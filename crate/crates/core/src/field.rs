//! Waypoint spatial distributions and the drivable-area field loss.
//!
//! For waypoint `t`, the x and y marginals of positions `2t` and `2t+1` give
//! `p_xy[r][c] = p_y[r] * p_x[c]` on the BEV lattice (row = y bin, column =
//! x bin). The loss sums `-ln(1 - p_xy) * C` over cells and waypoints.

use ndarray::Array2;

use crate::codec::WAYPOINTS;
use crate::error::{Error, Result};
use crate::model::{softmax, ActionLogits};
use crate::scene::CostField;

/// Ceiling applied to cell probabilities before the log barrier.
pub const P_MAX: f64 = 1.0 - 1e-6;

/// `-ln(1 - p)`, with the series form where `p` is tiny.
fn barrier(p: f64) -> f64 {
    if p < 1e-8 {
        p + 0.5 * p * p
    } else {
        -(-p).ln_1p()
    }
}

/// `H x W` probability grid of one waypoint.
pub fn waypoint_distribution(logits: &ActionLogits, t: usize) -> Result<Array2<f64>> {
    if t >= WAYPOINTS {
        return Err(Error::Range(format!("waypoint index {t} >= {WAYPOINTS}")));
    }
    let px = softmax(logits.x.row(t));
    let py = softmax(logits.y.row(t));
    Ok(Array2::from_shape_fn((py.len(), px.len()), |(r, c)| py[r] * px[c]))
}

fn check_aligned(logits: &ActionLogits, field: &CostField) -> Result<()> {
    if field.width != logits.x.ncols() || field.height != logits.y.ncols() {
        return Err(Error::Config(format!(
            "cost field {}x{} does not match the {}x{} coordinate lattice",
            field.height,
            field.width,
            logits.y.ncols(),
            logits.x.ncols()
        )));
    }
    Ok(())
}

/// Loss of a single waypoint grid.
pub fn field_loss(dist: &Array2<f64>, field: &CostField) -> Result<f64> {
    if dist.dim() != (field.height, field.width) {
        return Err(Error::Config(format!("distribution {:?} vs cost field {}x{}", dist.dim(), field.height, field.width)));
    }
    Ok(dist.iter().zip(&field.cost).map(|(&p, &c)| if c > 0.0 { barrier(p.min(P_MAX)) * c } else { 0.0 }).sum())
}

/// Field loss summed over all waypoints, with its gradient with respect to
/// the action logits.
pub fn field_loss_and_grad(logits: &ActionLogits, field: &CostField) -> Result<(f64, ActionLogits)> {
    check_aligned(logits, field)?;
    let (h, w) = (field.height, field.width);
    let mut grad = ActionLogits::zeros(w, h);
    let mut total = 0.0;
    let mut dpx = vec![0.0; w];
    let mut dpy = vec![0.0; h];
    for t in 0..WAYPOINTS {
        let px = softmax(logits.x.row(t));
        let py = softmax(logits.y.row(t));
        dpx.fill(0.0);
        dpy.fill(0.0);
        for r in 0..h {
            let row = &field.cost[r * w..(r + 1) * w];
            for c in 0..w {
                let cost = row[c];
                if cost <= 0.0 {
                    continue;
                }
                let p = py[r] * px[c];
                if p >= P_MAX {
                    total += barrier(P_MAX) * cost;
                    continue;
                }
                total += barrier(p) * cost;
                let g = cost / (1.0 - p);
                dpx[c] += g * py[r];
                dpy[r] += g * px[c];
            }
        }
        for (probs, dp, mut out) in [(&px, &dpx, grad.x.row_mut(t)), (&py, &dpy, grad.y.row_mut(t))] {
            let inner: f64 = probs.iter().zip(dp.iter()).map(|(p, d)| p * d).sum();
            for i in 0..probs.len() {
                out[i] = probs[i] * (dp[i] - inner);
            }
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random_logits(rng: &mut crate::rng::Rng, w: usize, h: usize, scale: f64) -> ActionLogits {
        let mut l = ActionLogits::zeros(w, h);
        l.x.mapv_inplace(|_| rng.gen_range(-scale..scale));
        l.y.mapv_inplace(|_| rng.gen_range(-scale..scale));
        l
    }

    fn random_field(rng: &mut crate::rng::Rng, w: usize, h: usize) -> CostField {
        CostField { height: h, width: w, cost: (0..h * w).map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.0..3.0) }).collect(), r_dac: 0.5, eps_safe: 0.5 }
    }

    #[test]
    fn distribution_cases() {
        let mut l = ActionLogits::zeros(8, 8);
        let u = waypoint_distribution(&l, 0).unwrap();
        assert!(u.iter().all(|&p| (p - 1.0 / 64.0).abs() < 1e-15));
        l.x[[2, 5]] = 800.0;
        l.y[[2, 1]] = 800.0;
        let one = waypoint_distribution(&l, 2).unwrap();
        assert_eq!(one[[1, 5]], 1.0);
        assert_eq!(one.sum(), 1.0);
        let mut rng = SeedTree::new(8).rng();
        let r = random_logits(&mut rng, 8, 8, 5.0);
        for t in 0..WAYPOINTS {
            assert!((waypoint_distribution(&r, t).unwrap().sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_and_masked_costs() {
        let mut rng = SeedTree::new(2).rng();
        let l = random_logits(&mut rng, 8, 8, 3.0);
        assert_eq!(field_loss_and_grad(&l, &CostField::zeros(8, 8)).unwrap().0, 0.0);
        let mut l2 = ActionLogits::zeros(8, 8);
        l2.x.column_mut(0).fill(900.0);
        l2.y.column_mut(0).fill(900.0);
        let mut f = random_field(&mut rng, 8, 8);
        f.cost[0] = 0.0;
        assert_eq!(field_loss_and_grad(&l2, &f).unwrap().0, 0.0);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = SeedTree::new(3).rng();
        for _ in 0..20 {
            let l = random_logits(&mut rng, 8, 8, 4.0);
            let f = random_field(&mut rng, 8, 8);
            let mut naive = 0.0;
            for t in 0..WAYPOINTS {
                let px = softmax(l.x.row(t));
                let py = softmax(l.y.row(t));
                for i in 0..8 {
                    for j in 0..8 {
                        naive += -(1.0 - py[i] * px[j]).ln() * f.cost[i * 8 + j];
                    }
                }
            }
            let (fast, _) = field_loss_and_grad(&l, &f).unwrap();
            assert!((fast - naive).abs() < 1e-9);
            let per: f64 = (0..WAYPOINTS).map(|t| field_loss(&waypoint_distribution(&l, t).unwrap(), &f).unwrap()).sum();
            assert!((per - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeedTree::new(4).rng();
        let l = random_logits(&mut rng, 8, 8, 2.0);
        let f = random_field(&mut rng, 8, 8);
        let (_, g) = field_loss_and_grad(&l, &f).unwrap();
        let h = 1e-5;
        for t in 0..WAYPOINTS {
            for i in 0..8 {
                for axis in 0..2 {
                    let mut lp = l.clone();
                    let mut lm = l.clone();
                    let (a, b, an) = if axis == 0 { (&mut lp.x, &mut lm.x, g.x[[t, i]]) } else { (&mut lp.y, &mut lm.y, g.y[[t, i]]) };
                    a[[t, i]] += h;
                    b[[t, i]] -= h;
                    let fd = (field_loss_and_grad(&lp, &f).unwrap().0 - field_loss_and_grad(&lm, &f).unwrap().0) / (2.0 * h);
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn barrier_slope_grows_with_probability() {
        // d/dp of -ln(1-p) * c is c/(1-p)
        let c = 1.7;
        let slope = |p: f64| c / (1.0 - p);
        let mut prev = 0.0;
        for k in 0..100 {
            let p = k as f64 / 101.0;
            let h = 1e-7;
            let fd = (-(1.0 - (p + h)).ln() * c + (1.0 - p).ln() * c) / h;
            assert!((fd - slope(p)).abs() < 1e-4 * slope(p));
            assert!(slope(p) > prev);
            prev = slope(p);
        }
    }

    #[test]
    fn moving_mass_to_cost_never_decreases_loss() {
        let mut rng = SeedTree::new(6).rng();
        let f = random_field(&mut rng, 8, 8);
        let zero_cells: Vec<usize> = (0..64).filter(|&i| f.cost[i] == 0.0).collect();
        let pos_cells: Vec<usize> = (0..64).filter(|&i| f.cost[i] > 0.0).collect();
        for _ in 0..50 {
            let mut p: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let a = zero_cells[rng.gen_range(0..zero_cells.len())];
            let b = pos_cells[rng.gen_range(0..pos_cells.len())];
            let before = field_loss(&Array2::from_shape_vec((8, 8), p.clone()).unwrap(), &f).unwrap();
            let moved = p[a] * rng.gen::<f64>();
            p[a] -= moved;
            p[b] += moved;
            let after = field_loss(&Array2::from_shape_vec((8, 8), p).unwrap(), &f).unwrap();
            assert!(after >= before);
        }
    }

    #[test]
    fn misaligned_field_is_config_error() {
        let l = ActionLogits::zeros(8, 8);
        assert!(matches!(field_loss_and_grad(&l, &CostField::zeros(8, 9)), Err(Error::Config(_))));
    }
}
