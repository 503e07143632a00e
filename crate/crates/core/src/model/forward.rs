//! Forward and backward passes.
//!
//! Training and decoding split the sequence at the prompt boundary: the
//! prompt pass produces per-layer keys and values, and any number of action
//! passes attend over them. [`forward_full`] runs the whole sequence in one
//! go under an explicit [`AttentionLayout`](super::AttentionLayout) and serves
//! as the reference for the split path.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Grads, LayerIndex, Params};
use super::prompt::PromptInput;
use crate::codec::{Axis as CoordAxis, TokenSequence, Vocabulary, BLOCK_LEN, WAYPOINTS};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Per-waypoint logits, one row per waypoint for each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogits {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl ActionLogits {
    pub fn zeros(bins_x: usize, bins_y: usize) -> Self {
        Self { x: Array2::zeros((WAYPOINTS, bins_x)), y: Array2::zeros((WAYPOINTS, bins_y)) }
    }

    /// Logits over the bins of the axis that `pos` encodes.
    pub fn row(&self, pos: usize) -> ArrayView1<'_, f64> {
        match CoordAxis::of_position(pos) {
            CoordAxis::X => self.x.row(pos / 2),
            CoordAxis::Y => self.y.row(pos / 2),
        }
    }

    pub fn row_mut(&mut self, pos: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        match CoordAxis::of_position(pos) {
            CoordAxis::X => self.x.row_mut(pos / 2),
            CoordAxis::Y => self.y.row_mut(pos / 2),
        }
    }

    pub fn max_abs_diff(&self, other: &ActionLogits) -> f64 {
        self.x.iter().chain(self.y.iter()).zip(other.x.iter().chain(other.y.iter())).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Factorized endpoint logits; the joint logit of cell `(i, j)` is `x[i] + y[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalLogits {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
}

impl GoalLogits {
    /// `bins_x x bins_y` joint logits.
    pub fn joint(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.x.len(), self.y.len()), |(i, j)| self.x[i] + self.y[j])
    }

    /// Joint probabilities, the outer product of the two softmaxed marginals.
    pub fn joint_probs(&self) -> Array2<f64> {
        let px = super::softmax(self.x.view());
        let py = super::softmax(self.y.view());
        Array2::from_shape_fn((px.len(), py.len()), |(i, j)| px[i] * py[j])
    }
}

/// Per-layer prompt keys and values (`prompt_len x embed_dim` each).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptKv {
    pub k: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl PromptKv {
    pub fn zeros_like(other: &PromptKv) -> Self {
        Self {
            k: other.k.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            v: other.v.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.k.first().map_or(0, |a| a.nrows())
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

pub struct PromptPass {
    pub kv: PromptKv,
    pub goal: GoalLogits,
    caches: Vec<LayerCache>,
    lnf: LnCache,
    last: Array1<f64>,
}

pub struct ActionPass {
    pub logits: ActionLogits,
    pub tokens: TokenSequence,
    caches: Vec<LayerCache>,
    lnf: LnCache,
    hidden: Array2<f64>,
}

fn row_vec(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &row_vec(g) + &row_vec(b);
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(dy: &Array2<f64>, c: &LnCache, g: ArrayView1<f64>, grads: &mut Grads, gi: super::Tensor, bi: super::Tensor) -> Array2<f64> {
    grads.v(gi).scaled_add(1.0, &(dy * &c.xhat).sum_axis(Axis(0)));
    grads.v(bi).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = dy * &row_vec(g);
    let d = dy.ncols() as f64;
    let m1 = dxhat.sum_axis(Axis(1)) / d;
    let m2 = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &m1.view().insert_axis(Axis(1)) - &(&c.xhat * &m2.view().insert_axis(Axis(1)));
    dx *= &c.inv_std.view().insert_axis(Axis(1));
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

fn affine(x: &Array2<f64>, p: &Params, w: super::Tensor, b: super::Tensor) -> Array2<f64> {
    x.dot(&p.m(w)) + &row_vec(p.v(b))
}

/// Which FFN branch a segment uses.
fn ffn_weights(li: &LayerIndex, action: bool, expert: bool) -> [super::Tensor; 4] {
    if action && expert {
        [li.a_w1, li.a_b1, li.a_w2, li.a_b2]
    } else {
        [li.p_w1, li.p_b1, li.p_w2, li.p_b2]
    }
}

/// One transformer block over a segment. `ctx` holds keys and values of an
/// earlier segment that every query may attend to; `causal` masks later
/// positions within the segment itself.
fn layer_forward(
    p: &Params,
    li: &LayerIndex,
    x: &Array2<f64>,
    ctx: Option<(&Array2<f64>, &Array2<f64>)>,
    causal: bool,
    action: bool,
) -> (Array2<f64>, LayerCache) {
    let heads = p.config.heads;
    let dh = p.config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, p.v(li.ln1_g), p.v(li.ln1_b));
    let q = affine(&a, p, li.wq, li.bq);
    let k = affine(&a, p, li.wk, li.bk);
    let v = affine(&a, p, li.wv, li.bv);
    let (k_all, v_all) = match ctx {
        Some((ck, cv)) => (concatenate![Axis(0), *ck, k], concatenate![Axis(0), *cv, v]),
        None => (k.clone(), v.clone()),
    };
    let offset = k_all.nrows() - x.nrows();
    let mut ctx_out = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k_all.slice(cols).t()) * scale;
        if causal {
            for i in 0..sc.nrows() {
                for j in (offset + i + 1)..sc.ncols() {
                    sc[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut sc);
        ctx_out.slice_mut(cols).assign(&sc.dot(&v_all.slice(cols)));
        probs.push(sc);
    }
    let x_mid = x + &affine(&ctx_out, p, li.wo, li.bo);
    let (b, ln2) = layer_norm(&x_mid, p.v(li.ln2_g), p.v(li.ln2_b));
    let [w1, b1, w2, b2] = ffn_weights(li, action, p.config.action_expert);
    let h_pre = affine(&b, p, w1, b1);
    let h_act = h_pre.mapv(gelu);
    let out = &x_mid + &affine(&h_act, p, w2, b2);
    (out, LayerCache { ln1, a, q, k, v, probs, ctx: ctx_out, ln2, b, h_pre, h_act })
}

/// Backward through one block. `ext` adds gradients for this segment's own
/// keys and values coming from later segments. Returns the input gradient
/// and, when `ctx` was used, the gradients for the context keys and values.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    p: &Params,
    g: &mut Grads,
    li: &LayerIndex,
    c: &LayerCache,
    dout: &Array2<f64>,
    ctx: Option<(&Array2<f64>, &Array2<f64>)>,
    ext: Option<(&Array2<f64>, &Array2<f64>)>,
    action: bool,
) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
    let dh = p.config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    // FFN
    let [w1, b1, w2, b2] = ffn_weights(li, action, p.config.action_expert);
    g.m(w2).scaled_add(1.0, &c.h_act.t().dot(dout));
    g.v(b2).scaled_add(1.0, &dout.sum_axis(Axis(0)));
    let mut dh_pre = dout.dot(&p.m(w2).t());
    dh_pre.zip_mut_with(&c.h_pre, |d, &x| *d *= gelu_grad(x));
    g.m(w1).scaled_add(1.0, &c.b.t().dot(&dh_pre));
    g.v(b1).scaled_add(1.0, &dh_pre.sum_axis(Axis(0)));
    let db = dh_pre.dot(&p.m(w1).t());
    let d_mid = dout + &layer_norm_back(&db, &c.ln2, p.v(li.ln2_g), g, li.ln2_g, li.ln2_b);
    // attention output projection
    g.m(li.wo).scaled_add(1.0, &c.ctx.t().dot(&d_mid));
    g.v(li.bo).scaled_add(1.0, &d_mid.sum_axis(Axis(0)));
    let dctx = d_mid.dot(&p.m(li.wo).t());
    let (k_all, v_all) = match ctx {
        Some((ck, cv)) => (concatenate![Axis(0), *ck, c.k], concatenate![Axis(0), *cv, c.v]),
        None => (c.k.clone(), c.v.clone()),
    };
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk_all = Array2::<f64>::zeros(k_all.raw_dim());
    let mut dv_all = Array2::<f64>::zeros(v_all.raw_dim());
    for (h, pr) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&v_all.slice(cols).t());
        dv_all.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        let rowdot = (&dp * pr).sum_axis(Axis(1));
        let ds = (dp - &rowdot.view().insert_axis(Axis(1))) * pr * scale;
        dq.slice_mut(cols).assign(&ds.dot(&k_all.slice(cols)));
        dk_all.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let n_ctx = k_all.nrows() - c.k.nrows();
    let mut dk = dk_all.slice(s![n_ctx.., ..]).to_owned();
    let mut dv = dv_all.slice(s![n_ctx.., ..]).to_owned();
    if let Some((ek, ev)) = ext {
        dk += ek;
        dv += ev;
    }
    let mut da = Array2::zeros(c.a.raw_dim());
    for (d, w, b) in [(&dq, li.wq, li.bq), (&dk, li.wk, li.bk), (&dv, li.wv, li.bv)] {
        g.m(w).scaled_add(1.0, &c.a.t().dot(d));
        g.v(b).scaled_add(1.0, &d.sum_axis(Axis(0)));
        da += &d.dot(&p.m(w).t());
    }
    let dx = d_mid + layer_norm_back(&da, &c.ln1, p.v(li.ln1_g), g, li.ln1_g, li.ln1_b);
    let ctx_grads = ctx.map(|_| (dk_all.slice(s![..n_ctx, ..]).to_owned(), dv_all.slice(s![..n_ctx, ..]).to_owned()));
    (dx, ctx_grads)
}

fn check_prompt(p: &Params, prompt: &PromptInput) -> Result<()> {
    let cfg = &p.config;
    if prompt.patches.dim() != (cfg.patches(), cfg.feature_dim()) {
        return Err(Error::Contract(format!(
            "prompt patches {:?}, model expects {:?}",
            prompt.patches.dim(),
            (cfg.patches(), cfg.feature_dim())
        )));
    }
    if prompt.instruction >= crate::scene::Instruction::COUNT {
        return Err(Error::Contract(format!("instruction id {} out of range", prompt.instruction)));
    }
    Ok(())
}

fn prompt_embed(p: &Params, prompt: &PromptInput) -> Array2<f64> {
    let ix = &p.index;
    let np = p.config.patches();
    let mut x = Array2::zeros((p.config.prompt_len(), p.config.embed_dim));
    x.slice_mut(s![..np, ..]).assign(&affine(&prompt.patches, p, ix.patch_w, ix.patch_b));
    x.row_mut(np).assign(&p.m(ix.instr_emb).row(prompt.instruction));
    let ego = ArrayView1::from(&prompt.ego[..]);
    x.row_mut(np + 1).assign(&(ego.dot(&p.m(ix.ego_w)) + p.v(ix.ego_b)));
    x += &p.m(ix.prompt_pos);
    x
}

fn goal_head(p: &Params, h: ArrayView1<f64>) -> GoalLogits {
    let ix = &p.index;
    GoalLogits { x: h.dot(&p.m(ix.goal_x_w)) + p.v(ix.goal_x_b), y: h.dot(&p.m(ix.goal_y_w)) + p.v(ix.goal_y_b) }
}

/// Prompt pass: per-layer keys and values plus the goal logits read from the
/// last prompt position.
pub fn forward_prompt(p: &Params, prompt: &PromptInput) -> Result<PromptPass> {
    check_prompt(p, prompt)?;
    let mut x = prompt_embed(p, prompt);
    let mut caches = Vec::with_capacity(p.config.layers);
    for li in &p.index.layers {
        let (out, c) = layer_forward(p, li, &x, None, true, false);
        caches.push(c);
        x = out;
    }
    let last_in = x.slice(s![x.nrows() - 1.., ..]).to_owned();
    let (last, lnf) = layer_norm(&last_in, p.v(p.index.lnf_g), p.v(p.index.lnf_b));
    let last = last.row(0).to_owned();
    let goal = goal_head(p, last.view());
    let kv = PromptKv { k: caches.iter().map(|c| c.k.clone()).collect(), v: caches.iter().map(|c| c.v.clone()).collect() };
    Ok(PromptPass { kv, goal, caches, lnf, last })
}

fn check_tokens(p: &Params, tokens: &TokenSequence) -> Result<()> {
    let rows = p.config.token_rows();
    if let Some(t) = tokens.0.iter().find(|&&t| t as usize >= rows) {
        return Err(Error::Contract(format!("token id {t} outside the model vocabulary of {rows}")));
    }
    Ok(())
}

/// Action pass over the 16-token block, attending to `kv`.
pub fn forward_action(p: &Params, kv: &PromptKv, tokens: &TokenSequence) -> Result<ActionPass> {
    check_tokens(p, tokens)?;
    if kv.k.len() != p.config.layers || kv.rows() != p.config.prompt_len() {
        return Err(Error::Contract(format!("prompt cache has {} layers x {} rows", kv.k.len(), kv.rows())));
    }
    let ix = &p.index;
    let emb = p.m(ix.tok_emb);
    let mut x = Array2::from_shape_fn((BLOCK_LEN, p.config.embed_dim), |(i, j)| emb[[tokens.0[i] as usize, j]]);
    x += &p.m(ix.act_pos);
    let mut caches = Vec::with_capacity(p.config.layers);
    for (l, li) in ix.layers.iter().enumerate() {
        let (out, c) = layer_forward(p, li, &x, Some((&kv.k[l], &kv.v[l])), false, true);
        caches.push(c);
        x = out;
    }
    let (hidden, lnf) = layer_norm(&x, p.v(ix.lnf_g), p.v(ix.lnf_b));
    let logits = action_heads(p, &hidden);
    Ok(ActionPass { logits, tokens: *tokens, caches, lnf, hidden })
}

fn action_heads(p: &Params, hidden: &Array2<f64>) -> ActionLogits {
    let ix = &p.index;
    let hx = hidden.slice(s![0..;2, ..]);
    let hy = hidden.slice(s![1..;2, ..]);
    ActionLogits {
        x: hx.dot(&p.m(ix.head_x_w)) + &row_vec(p.v(ix.head_x_b)),
        y: hy.dot(&p.m(ix.head_y_w)) + &row_vec(p.v(ix.head_y_b)),
    }
}

/// Accumulates parameter gradients for `dlogits` and adds the gradients
/// for the prompt keys and values into `dkv`.
pub fn backward_action(p: &Params, pass: &ActionPass, kv: &PromptKv, dlogits: &ActionLogits, g: &mut Grads, dkv: &mut PromptKv) {
    let ix = &p.index;
    let hx = pass.hidden.slice(s![0..;2, ..]);
    let hy = pass.hidden.slice(s![1..;2, ..]);
    g.m(ix.head_x_w).scaled_add(1.0, &hx.t().dot(&dlogits.x));
    g.v(ix.head_x_b).scaled_add(1.0, &dlogits.x.sum_axis(Axis(0)));
    g.m(ix.head_y_w).scaled_add(1.0, &hy.t().dot(&dlogits.y));
    g.v(ix.head_y_b).scaled_add(1.0, &dlogits.y.sum_axis(Axis(0)));
    let mut dh = Array2::zeros(pass.hidden.raw_dim());
    dh.slice_mut(s![0..;2, ..]).assign(&dlogits.x.dot(&p.m(ix.head_x_w).t()));
    dh.slice_mut(s![1..;2, ..]).assign(&dlogits.y.dot(&p.m(ix.head_y_w).t()));
    let mut dx = layer_norm_back(&dh, &pass.lnf, p.v(ix.lnf_g), g, ix.lnf_g, ix.lnf_b);
    for l in (0..p.config.layers).rev() {
        let (d, ctx) = layer_backward(p, g, &ix.layers[l], &pass.caches[l], &dx, Some((&kv.k[l], &kv.v[l])), None, true);
        let (dk, dv) = ctx.expect("action segment has context");
        dkv.k[l] += &dk;
        dkv.v[l] += &dv;
        dx = d;
    }
    g.m(ix.act_pos).scaled_add(1.0, &dx);
    let mut emb = g.m(ix.tok_emb);
    for (i, &t) in pass.tokens.0.iter().enumerate() {
        let mut row = emb.row_mut(t as usize);
        row += &dx.row(i);
    }
}

/// Accumulates parameter gradients for the goal logits and for the prompt
/// keys and values (`dkv`, collected from action passes).
pub fn backward_prompt(p: &Params, pass: &PromptPass, prompt: &PromptInput, dgoal: &GoalLogits, dkv: &PromptKv, g: &mut Grads) {
    let ix = &p.index;
    let last = pass.last.view().insert_axis(Axis(1));
    g.m(ix.goal_x_w).scaled_add(1.0, &last.dot(&row_vec(dgoal.x.view())));
    g.v(ix.goal_x_b).scaled_add(1.0, &dgoal.x);
    g.m(ix.goal_y_w).scaled_add(1.0, &last.dot(&row_vec(dgoal.y.view())));
    g.v(ix.goal_y_b).scaled_add(1.0, &dgoal.y);
    let dlast = p.m(ix.goal_x_w).dot(&dgoal.x) + p.m(ix.goal_y_w).dot(&dgoal.y);
    let dlast = layer_norm_back(&dlast.insert_axis(Axis(0)), &pass.lnf, p.v(ix.lnf_g), g, ix.lnf_g, ix.lnf_b);
    let n = p.config.prompt_len();
    let mut dx = Array2::zeros((n, p.config.embed_dim));
    dx.row_mut(n - 1).assign(&dlast.row(0));
    for l in (0..p.config.layers).rev() {
        let (d, _) = layer_backward(p, g, &ix.layers[l], &pass.caches[l], &dx, None, Some((&dkv.k[l], &dkv.v[l])), false);
        dx = d;
    }
    let np = p.config.patches();
    g.m(ix.prompt_pos).scaled_add(1.0, &dx);
    let dpatch = dx.slice(s![..np, ..]);
    g.m(ix.patch_w).scaled_add(1.0, &prompt.patches.t().dot(&dpatch));
    g.v(ix.patch_b).scaled_add(1.0, &dpatch.sum_axis(Axis(0)));
    let mut instr = g.m(ix.instr_emb);
    let mut row = instr.row_mut(prompt.instruction);
    row += &dx.row(np);
    let dego = dx.row(np + 1);
    let ego = ArrayView1::from(&prompt.ego[..]);
    g.m(ix.ego_w).scaled_add(1.0, &ego.insert_axis(Axis(1)).dot(&dego.insert_axis(Axis(0))));
    g.v(ix.ego_b).scaled_add(1.0, &dego);
}

/// Logits for a partially masked or concrete block.
pub fn predict_logits(p: &Params, prompt: &PromptInput, tokens: &TokenSequence) -> Result<ActionLogits> {
    let pp = forward_prompt(p, prompt)?;
    Ok(forward_action(p, &pp.kv, tokens)?.logits)
}

pub fn goal_logits(p: &Params, prompt: &PromptInput) -> Result<GoalLogits> {
    Ok(forward_prompt(p, prompt)?.goal)
}

/// Result of the unsplit reference pass.
#[derive(Debug, Clone)]
pub struct FullPass {
    pub logits: ActionLogits,
    pub goal: GoalLogits,
    /// Residual stream after the last block, one row per position.
    pub hidden: Array2<f64>,
}

/// Whole-sequence forward under the model's attention layout, computed
/// row by row without the prompt/action split.
pub fn forward_full(p: &Params, prompt: &PromptInput, tokens: &TokenSequence) -> Result<FullPass> {
    check_prompt(p, prompt)?;
    check_tokens(p, tokens)?;
    let cfg = &p.config;
    let ix = &p.index;
    let layout = cfg.layout();
    let n = layout.len();
    let np = cfg.prompt_len();
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let mut x = Array2::zeros((n, d));
    x.slice_mut(s![..np, ..]).assign(&prompt_embed(p, prompt));
    let emb = p.m(ix.tok_emb);
    let pos = p.m(ix.act_pos);
    for i in 0..BLOCK_LEN {
        let t = tokens.0[i] as usize;
        for j in 0..d {
            x[[np + i, j]] = emb[[t, j]] + pos[[i, j]];
        }
    }
    for li in &ix.layers {
        let (a, _) = layer_norm(&x, p.v(li.ln1_g), p.v(li.ln1_b));
        let q = affine(&a, p, li.wq, li.bq);
        let k = affine(&a, p, li.wk, li.bk);
        let v = affine(&a, p, li.wv, li.bv);
        let mut ctx = Array2::<f64>::zeros((n, d));
        for h in 0..cfg.heads {
            let c0 = h * dh;
            for i in 0..n {
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|j| layout.allowed(i, j).then(|| (0..dh).map(|e| q[[i, c0 + e]] * k[[j, c0 + e]]).sum::<f64>() / (dh as f64).sqrt()))
                    .collect();
                let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
                let z: f64 = w.iter().sum();
                for j in 0..n {
                    if w[j] != 0.0 {
                        for e in 0..dh {
                            ctx[[i, c0 + e]] += w[j] / z * v[[j, c0 + e]];
                        }
                    }
                }
            }
        }
        x = &x + &affine(&ctx, p, li.wo, li.bo);
        let (b, _) = layer_norm(&x, p.v(li.ln2_g), p.v(li.ln2_b));
        let mut out = x.clone();
        for i in 0..n {
            let [w1, b1, w2, b2] = ffn_weights(li, i >= np, cfg.action_expert);
            let row = b.row(i);
            let h = (row.dot(&p.m(w1)) + p.v(b1)).mapv(gelu);
            let mut r = out.row_mut(i);
            r += &(h.dot(&p.m(w2)) + p.v(b2));
        }
        x = out;
    }
    let (hn, _) = layer_norm(&x, p.v(ix.lnf_g), p.v(ix.lnf_b));
    let logits = action_heads(p, &hn.slice(s![np.., ..]).to_owned());
    let goal = goal_head(p, hn.row(np - 1));
    Ok(FullPass { logits, goal, hidden: x })
}

/// Shorthand used by decoding code: vocab-aware probability of a token at a
/// block position.
pub fn token_prob(logits: &ActionLogits, vocab: &Vocabulary, pos: usize, token: crate::codec::TokenId) -> f64 {
    let axis = CoordAxis::of_position(pos);
    let probs = super::softmax(logits.row(pos));
    vocab.bin_of(axis, token).map_or(0.0, |b| probs[b])
}
