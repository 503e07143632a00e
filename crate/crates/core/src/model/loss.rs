//! Supervised losses and their logit gradients.

use ndarray::{Array1, ArrayView1};

use super::forward::{ActionLogits, GoalLogits};
use crate::codec::{Axis, TokenSequence, Vocabulary, BLOCK_LEN, GOAL_POSITIONS};
use crate::error::{Error, Result};

pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.mapv(|v| (v - m).exp()).sum().ln();
    z.mapv(|v| v - lse)
}

/// Log-probabilities at block position `pos`.
pub fn axis_log_softmax(logits: &ActionLogits, pos: usize) -> Array1<f64> {
    log_softmax(logits.row(pos))
}

fn target_bin(vocab: &Vocabulary, x0: &TokenSequence, pos: usize) -> Result<usize> {
    vocab
        .bin_of(Axis::of_position(pos), x0.0[pos])
        .ok_or_else(|| Error::Contract(format!("target token {} at position {pos} is not a coordinate token", x0.0[pos])))
}

/// Mean NLL of `target` over the given positions, normalized by `denom`.
fn nll(logits: &ActionLogits, target: &TokenSequence, vocab: &Vocabulary, positions: &[usize], denom: f64) -> Result<(f64, ActionLogits)> {
    let mut grad = ActionLogits::zeros(logits.x.ncols(), logits.y.ncols());
    let mut loss = 0.0;
    for &pos in positions {
        let b = target_bin(vocab, target, pos)?;
        let lp = log_softmax(logits.row(pos));
        loss -= lp[b];
        let mut g = grad.row_mut(pos);
        g.assign(&lp.mapv(f64::exp));
        g[b] -= 1.0;
        g /= denom;
    }
    Ok((loss / denom, grad))
}

/// Mean negative log-likelihood of the clean tokens over all block
/// positions, masked or not.
pub fn dlm_loss(logits: &ActionLogits, x0: &TokenSequence, vocab: &Vocabulary) -> Result<(f64, ActionLogits)> {
    let all: Vec<usize> = (0..BLOCK_LEN).collect();
    nll(logits, x0, vocab, &all, BLOCK_LEN as f64)
}

/// Variant supervising masked positions only (mean over masked positions).
pub fn masked_only_dlm_loss(logits: &ActionLogits, xt: &TokenSequence, x0: &TokenSequence, vocab: &Vocabulary) -> Result<(f64, ActionLogits)> {
    let masked: Vec<usize> = (0..BLOCK_LEN).filter(|&p| xt.is_masked(p, vocab)).collect();
    if masked.is_empty() {
        return Ok((0.0, ActionLogits::zeros(logits.x.ncols(), logits.y.ncols())));
    }
    let n = masked.len() as f64;
    nll(logits, x0, vocab, &masked, n)
}

/// Mean NLL of the clean tokens given a perturbed, fully concrete input.
pub fn sap_loss(logits: &ActionLogits, perturbed: &TokenSequence, clean: &TokenSequence, vocab: &Vocabulary) -> Result<(f64, ActionLogits)> {
    if let Some(p) = (0..BLOCK_LEN).find(|&p| perturbed.is_masked(p, vocab)) {
        return Err(Error::Contract(format!("corrective input has a mask at position {p}")));
    }
    dlm_loss(logits, clean, vocab)
}

/// NLL of the expert endpoint cell under the joint goal posterior.
pub fn goal_loss(goal: &GoalLogits, x0: &TokenSequence, vocab: &Vocabulary) -> Result<(f64, GoalLogits)> {
    let bx = target_bin(vocab, x0, GOAL_POSITIONS[0])?;
    let by = target_bin(vocab, x0, GOAL_POSITIONS[1])?;
    let lx = log_softmax(goal.x.view());
    let ly = log_softmax(goal.y.view());
    let mut gx = lx.mapv(f64::exp);
    gx[bx] -= 1.0;
    let mut gy = ly.mapv(f64::exp);
    gy[by] -= 1.0;
    Ok((-lx[bx] - ly[by], GoalLogits { x: gx, y: gy }))
}

/// All-position loss under uniform logits: the mean per-axis log vocabulary size.
pub fn uniform_dlm_loss(vocab: &Vocabulary) -> f64 {
    ((vocab.bins_x as f64).ln() + (vocab.bins_y as f64).ln()) / 2.0
}
