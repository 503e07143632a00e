//! Scene to prompt features, and the forward masking process.

use ndarray::Array2;
use rand::Rng as _;

use super::ModelConfig;
use crate::codec::{TokenSequence, Vocabulary, BLOCK_LEN};
use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::rng::Rng;
use crate::scene::{Agent, BevGrid, Scene};

/// Drivable area, agents now, agents one step ago.
pub const PROMPT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptInput {
    /// One row per patch token, `PROMPT_CHANNELS * patch^2` features.
    pub patches: Array2<f64>,
    pub instruction: usize,
    /// Speed / 10, acceleration / 2, yaw rate * 5.
    pub ego: [f64; 3],
}

fn rasterize(grid: &BevGrid, boxes: impl Iterator<Item = OrientedBox>, out: &mut [bool]) {
    for b in boxes {
        let (lo, hi) = b.bounds();
        let c0 = ((lo[0] - grid.x_min) / grid.resolution).floor().max(0.0) as usize;
        let r0 = ((lo[1] - grid.y_min) / grid.resolution).floor().max(0.0) as usize;
        let c1 = (((hi[0] - grid.x_min) / grid.resolution).ceil().max(0.0) as usize).min(grid.width);
        let r1 = (((hi[1] - grid.y_min) / grid.resolution).ceil().max(0.0) as usize).min(grid.height);
        for r in r0..r1 {
            for c in c0..c1 {
                if b.contains(grid.cell_center(r, c)) {
                    out[grid.index(r, c)] = true;
                }
            }
        }
    }
}

fn agent_box(a: &Agent, now: bool) -> OrientedBox {
    let s = if now { a.states[0] } else { a.previous_state() };
    OrientedBox::new([s.x, s.y], s.heading, a.length, a.width)
}

pub fn build_prompt(scene: &Scene, cfg: &ModelConfig) -> Result<PromptInput> {
    let g = &scene.grid;
    if g.width != cfg.bins_x || g.height != cfg.bins_y {
        return Err(Error::Config(format!("grid {}x{} does not match the model's {}x{}", g.height, g.width, cfg.bins_y, cfg.bins_x)));
    }
    let n = g.height * g.width;
    let mut now = vec![false; n];
    let mut past = vec![false; n];
    rasterize(g, scene.agents.iter().map(|a| agent_box(a, true)), &mut now);
    rasterize(g, scene.agents.iter().filter(|a| a.states.len() > 1).map(|a| agent_box(a, false)), &mut past);
    let p = cfg.patch_size;
    let pc = g.width / p;
    let mut patches = Array2::zeros((cfg.patches(), cfg.feature_dim()));
    for r in 0..g.height {
        for c in 0..g.width {
            let row = (r / p) * pc + c / p;
            let local = (r % p) * p + c % p;
            let i = g.index(r, c);
            for (ch, layer) in [&g.drivable, &now, &past].into_iter().enumerate() {
                if layer[i] {
                    patches[[row, ch * p * p + local]] = 1.0;
                }
            }
        }
    }
    Ok(PromptInput {
        patches,
        instruction: scene.instruction.id(),
        ego: [scene.ego.speed / 10.0, scene.ego.accel / 2.0, scene.ego.yaw_rate * 5.0],
    })
}

/// Replaces each token by the mask token independently with probability `t`.
pub fn forward_mask(x0: &TokenSequence, t: f64, vocab: &Vocabulary, rng: &mut Rng) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("mask ratio {t} outside [0, 1]")));
    }
    x0.validate(vocab)?;
    if let Some(p) = (0..BLOCK_LEN).find(|&p| x0.is_masked(p, vocab)) {
        return Err(Error::Contract(format!("clean sequence has a mask at position {p}")));
    }
    let mut out = *x0;
    for tok in out.0.iter_mut() {
        if rng.gen::<f64>() < t {
            *tok = vocab.mask_token();
        }
    }
    Ok(out)
}
