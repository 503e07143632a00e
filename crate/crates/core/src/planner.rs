//! Decision, draft and reflect: goal proposal, confidence-ordered unmasking,
//! token-to-token editing, best-of-N candidates and the lite frame update.

use std::cmp::Ordering;

use rand::Rng as _;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::codec::{detokenize_with_timestep, tokenize, Axis, TokenId, TokenSequence, Trajectory, Vocabulary, BLOCK_LEN, GOAL_POSITIONS};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::{forward_full, forward_prompt, softmax, ActionLogits, GoalLogits, Params, PromptInput};
use crate::rng::Rng;
use crate::runtime::{decode_action_block, fused_select_commit, prefill_prefix, reference_select_commit, CommitMode, PrefixCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_goals: usize,
    pub top_k: usize,
    pub nms_radius: f64,
    pub draft_steps: usize,
    pub edit_steps: usize,
    /// Fraction of the 14 non-goal positions committed per edit round.
    pub edit_fraction: f64,
    pub draws_per_goal: usize,
    /// Edit rounds in a lite frame, after the single refresh pass.
    pub lite_edit_steps: usize,
    pub fused_commit: bool,
    /// Gumbel top-k over the goal posterior instead of deterministic top-k.
    pub sample_goals: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_goals: 3,
            top_k: 32,
            nms_radius: 1.2,
            draft_steps: 3,
            edit_steps: 3,
            edit_fraction: 0.25,
            draws_per_goal: 2,
            lite_edit_steps: 1,
            fused_commit: true,
            sample_goals: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.draft_steps == 0 {
            return bad("draft_steps must be at least 1");
        }
        if !(self.nms_radius >= 0.0) {
            return bad("nms_radius must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.edit_fraction) {
            return bad("edit_fraction must lie in [0, 1]");
        }
        if self.n_goals == 0 || self.top_k == 0 || self.draws_per_goal == 0 {
            return bad("n_goals, top_k and draws_per_goal must be positive");
        }
        Ok(())
    }

    /// Positions rewritten per edit round.
    pub fn edit_commit(&self) -> usize {
        (self.edit_fraction * (BLOCK_LEN - GOAL_POSITIONS.len()) as f64).floor() as usize
    }
}

/// Anything that can produce goal logits and action-block logits for one
/// scene.
pub trait LogitSource {
    fn goal(&self) -> &GoalLogits;
    fn logits(&self, x: &TokenSequence) -> Result<ActionLogits>;
}

/// Decodes against a prefix cache filled once per scene.
pub struct CachedSource<'a> {
    pub cache: PrefixCache,
    pub params: &'a Params,
}

impl<'a> CachedSource<'a> {
    pub fn new(prompt: &PromptInput, params: &'a Params) -> Result<Self> {
        Ok(Self { cache: prefill_prefix(prompt, params)?, params })
    }
}

impl LogitSource for CachedSource<'_> {
    fn goal(&self) -> &GoalLogits {
        self.cache.goal()
    }

    fn logits(&self, x: &TokenSequence) -> Result<ActionLogits> {
        decode_action_block(&self.cache, x, self.params)
    }
}

/// Recomputes the whole sequence on every call; the goal logits come from a
/// separate prompt pass unless `merged` is set.
pub struct UncachedSource<'a> {
    pub params: &'a Params,
    pub prompt: &'a PromptInput,
    goal: GoalLogits,
}

impl<'a> UncachedSource<'a> {
    pub fn new(prompt: &'a PromptInput, params: &'a Params, merged: bool) -> Result<Self> {
        let goal = if merged {
            forward_prompt(params, prompt)?.goal
        } else {
            // Separate decision pass over the full sequence.
            let mask = (params.config.token_rows() - 1) as TokenId;
            forward_full(params, prompt, &TokenSequence([mask; BLOCK_LEN]))?.goal
        };
        Ok(Self { params, prompt, goal })
    }
}

impl LogitSource for UncachedSource<'_> {
    fn goal(&self) -> &GoalLogits {
        &self.goal
    }

    fn logits(&self, x: &TokenSequence) -> Result<ActionLogits> {
        Ok(forward_full(self.params, self.prompt, x)?.logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalProposal {
    pub x_token: TokenId,
    pub y_token: TokenId,
    pub prob: f64,
    pub position: [f64; 2],
}

fn by_prob_then_id(a: &GoalProposal, b: &GoalProposal) -> Ordering {
    b.prob.partial_cmp(&a.prob).unwrap_or(Ordering::Equal).then((a.x_token, a.y_token).cmp(&(b.x_token, b.y_token)))
}

/// Greedy suppression: walk candidates best-first and keep one unless it
/// lies strictly within `radius` of an already kept one. Stops at `limit`.
pub fn nms(candidates: &[GoalProposal], radius: f64, limit: usize) -> Vec<GoalProposal> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(by_prob_then_id);
    let mut kept: Vec<GoalProposal> = Vec::new();
    for c in sorted {
        if kept.len() == limit {
            break;
        }
        if kept.iter().all(|k| crate::codec::dist(k.position, c.position) >= radius) {
            kept.push(c);
        }
    }
    kept
}

/// Top-k cells of the goal posterior, NMS-filtered and truncated to
/// `n_goals`. With `sample_goals`, the k cells are drawn without replacement
/// (Gumbel top-k) from `rng`.
pub fn propose_goals(goal: &GoalLogits, cfg: &PipelineConfig, vocab: &Vocabulary, rng: Option<&mut Rng>) -> Result<Vec<GoalProposal>> {
    cfg.validate()?;
    let probs = goal.joint_probs();
    let (bx, by) = probs.dim();
    if bx != vocab.bins_x || by != vocab.bins_y {
        return Err(Error::Config(format!("goal head is {bx}x{by}, vocabulary {}x{}", vocab.bins_x, vocab.bins_y)));
    }
    let mut all: Vec<GoalProposal> = Vec::with_capacity(bx * by);
    for i in 0..bx {
        for j in 0..by {
            all.push(GoalProposal {
                x_token: vocab.token(Axis::X, i),
                y_token: vocab.token(Axis::Y, j),
                prob: probs[[i, j]],
                position: [vocab.center(Axis::X, i), vocab.center(Axis::Y, j)],
            });
        }
    }
    let k = cfg.top_k.min(all.len());
    let top: Vec<GoalProposal> = match (cfg.sample_goals, rng) {
        (true, Some(rng)) => {
            let g = Gumbel::new(0.0, 1.0).expect("unit gumbel");
            let mut keyed: Vec<(f64, GoalProposal)> = all.into_iter().map(|c| (c.prob.ln() + g.sample(rng), c)).collect();
            keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
            keyed.into_iter().take(k).map(|(_, c)| c).collect()
        }
        (true, None) => return Err(Error::Config("goal sampling needs a random stream".into())),
        _ => {
            all.sort_by(by_prob_then_id);
            all.truncate(k);
            all
        }
    };
    Ok(nms(&top, cfg.nms_radius, cfg.n_goals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Draft,
    Edit,
}

/// One state change of the block. `probs[p]` is the probability, under the
/// pass that produced it, of the token written at `p`; zero where nothing
/// changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub kind: StepKind,
    pub before: TokenSequence,
    pub after: TokenSequence,
    pub probs: [f64; BLOCK_LEN],
}

impl Transition {
    pub fn changed(&self) -> [bool; BLOCK_LEN] {
        let mut c = [false; BLOCK_LEN];
        for (p, slot) in c.iter_mut().enumerate() {
            *slot = self.before.0[p] != self.after.0[p];
        }
        c
    }
}

/// Positions written by an edit round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMask(pub [bool; BLOCK_LEN]);

impl CommitMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// How tokens are chosen once positions are ranked.
pub enum Policy<'a> {
    Greedy,
    /// Draft positions draw their token from the softmax and are ranked by
    /// the drawn token's probability; edit positions draw the replacement.
    Sampled(&'a mut Rng),
}

fn probability(logits: &ActionLogits, pos: usize, token: TokenId, vocab: &Vocabulary) -> f64 {
    crate::model::token_prob(logits, vocab, pos, token)
}

fn draw(probs: &ndarray::Array1<f64>, rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn select_commit(logits: &ActionLogits, x: &TokenSequence, n: usize, mode: CommitMode, fused: bool, vocab: &Vocabulary) -> Result<TokenSequence> {
    if fused {
        fused_select_commit(logits, x, n, mode, vocab)
    } else {
        reference_select_commit(logits, x, n, mode, vocab)
    }
}

fn sampled_commit(logits: &ActionLogits, x: &TokenSequence, n: usize, mode: CommitMode, vocab: &Vocabulary, rng: &mut Rng) -> Result<TokenSequence> {
    let mut out = *x;
    match mode {
        CommitMode::Draft => {
            let masked: Vec<usize> = (0..BLOCK_LEN).filter(|&p| x.is_masked(p, vocab)).collect();
            if n > masked.len() {
                return Err(Error::Contract(format!("cannot commit {n} of {} masked positions", masked.len())));
            }
            let mut drawn: Vec<(f64, usize, usize)> = masked
                .into_iter()
                .map(|p| {
                    let probs = softmax(logits.row(p));
                    let b = draw(&probs, rng);
                    (probs[b], p, b)
                })
                .collect();
            drawn.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            for &(_, p, b) in drawn.iter().take(n) {
                out.0[p] = vocab.token(Axis::of_position(p), b);
            }
        }
        CommitMode::Edit => {
            // Same positions as the greedy rule; only the replacement is drawn.
            for p in edit_positions(logits, x, n, vocab)? {
                let probs = softmax(logits.row(p));
                out.0[p] = vocab.token(Axis::of_position(p), draw(&probs, rng));
            }
        }
    }
    Ok(out)
}

/// The `n` non-goal positions whose current token is least likely, ties by
/// position.
pub fn edit_positions(logits: &ActionLogits, x: &TokenSequence, n: usize, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(BLOCK_LEN);
    for p in (0..BLOCK_LEN).filter(|p| !GOAL_POSITIONS.contains(p)) {
        if x.is_masked(p, vocab) {
            return Err(Error::IncompleteSequence(p));
        }
        scored.push((probability(logits, p, x.0[p], vocab), p));
    }
    if n > scored.len() {
        return Err(Error::Contract(format!("cannot edit {n} of {} positions", scored.len())));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, p)| p).collect())
}

fn record(kind: StepKind, logits: &ActionLogits, before: TokenSequence, after: TokenSequence, vocab: &Vocabulary) -> Transition {
    let mut probs = [0.0; BLOCK_LEN];
    for (p, slot) in probs.iter_mut().enumerate() {
        if before.0[p] != after.0[p] {
            *slot = probability(logits, p, after.0[p], vocab);
        }
    }
    Transition { kind, before, after, probs }
}

/// Fills the masked positions of `x` over `rounds` rounds, committing
/// `ceil(remaining / rounds_left)` positions per round. Rounds beyond the
/// number of masked positions are dropped so every round commits something.
pub fn denoise(src: &dyn LogitSource, x: TokenSequence, rounds: usize, policy: &mut Policy<'_>, fused: bool, vocab: &Vocabulary) -> Result<(TokenSequence, Vec<Transition>)> {
    x.validate(vocab)?;
    let mut state = x;
    let mut log = Vec::new();
    let masked = state.mask_count(vocab);
    if masked == 0 {
        return Ok((state, log));
    }
    if rounds == 0 {
        return Err(Error::Config("denoising needs at least one round".into()));
    }
    let rounds = rounds.min(masked);
    for r in 0..rounds {
        let remaining = state.mask_count(vocab);
        let n = remaining.div_ceil(rounds - r);
        let logits = src.logits(&state)?;
        let next = match policy {
            Policy::Greedy => select_commit(&logits, &state, n, CommitMode::Draft, fused, vocab)?,
            Policy::Sampled(rng) => sampled_commit(&logits, &state, n, CommitMode::Draft, vocab, rng)?,
        };
        log.push(record(StepKind::Draft, &logits, state, next, vocab));
        state = next;
    }
    Ok((state, log))
}

/// Block with the goal pair fixed and every other position masked.
pub fn goal_anchored(goal: &GoalProposal, vocab: &Vocabulary) -> TokenSequence {
    let mut x = TokenSequence::all_masked(vocab);
    x.0[GOAL_POSITIONS[0]] = goal.x_token;
    x.0[GOAL_POSITIONS[1]] = goal.y_token;
    x
}

pub fn draft_trajectory(
    src: &dyn LogitSource,
    goal: &GoalProposal,
    cfg: &PipelineConfig,
    policy: &mut Policy<'_>,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, Vec<Transition>)> {
    denoise(src, goal_anchored(goal, vocab), cfg.draft_steps, policy, cfg.fused_commit, vocab)
}

/// `x' = m * x_hat + (1 - m) * x` with `x_hat` the per-position argmax.
pub fn apply_commit_mask(logits: &ActionLogits, x: &TokenSequence, mask: &CommitMask, vocab: &Vocabulary) -> Result<TokenSequence> {
    if let Some(p) = (0..BLOCK_LEN).find(|&p| x.is_masked(p, vocab)) {
        return Err(Error::IncompleteSequence(p));
    }
    let mut out = *x;
    for p in (0..BLOCK_LEN).filter(|&p| mask.0[p]) {
        let probs = softmax(logits.row(p));
        let best = probs.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
        out.0[p] = vocab.token(Axis::of_position(p), best);
    }
    Ok(out)
}

/// One forward pass on the concrete block, then rewrite the
/// `commit` least-likely non-goal tokens. The returned mask marks the
/// positions that actually changed.
pub fn autoedit_round(
    src: &dyn LogitSource,
    x: &TokenSequence,
    commit: usize,
    policy: &mut Policy<'_>,
    fused: bool,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, CommitMask, Transition)> {
    x.validate(vocab)?;
    if let Some(p) = (0..BLOCK_LEN).find(|&p| x.is_masked(p, vocab)) {
        return Err(Error::IncompleteSequence(p));
    }
    let logits = src.logits(x)?;
    let next = match policy {
        Policy::Greedy => select_commit(&logits, x, commit, CommitMode::Edit, fused, vocab)?,
        Policy::Sampled(rng) => sampled_commit(&logits, x, commit, CommitMode::Edit, vocab, rng)?,
    };
    let t = record(StepKind::Edit, &logits, *x, next, vocab);
    Ok((next, CommitMask(t.changed()), t))
}

pub fn autoedit(
    src: &dyn LogitSource,
    x: TokenSequence,
    rounds: usize,
    cfg: &PipelineConfig,
    policy: &mut Policy<'_>,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, Vec<Transition>)> {
    let mut state = x;
    let mut log = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (next, _, t) = autoedit_round(src, &state, cfg.edit_commit(), policy, cfg.fused_commit, vocab)?;
        log.push(t);
        state = next;
    }
    Ok((state, log))
}

/// `|e| / L`.
pub fn effective_time(edit: &[bool; BLOCK_LEN]) -> f64 {
    edit.iter().filter(|&&b| b).count() as f64 / BLOCK_LEN as f64
}

/// Re-masks the non-goal positions in `edit` and denoises them again with
/// the drafting schedule. Goal positions are never re-masked.
pub fn remask_edit(src: &dyn LogitSource, x: &TokenSequence, edit: &[bool; BLOCK_LEN], cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<TokenSequence> {
    if let Some(p) = (0..BLOCK_LEN).find(|&p| x.is_masked(p, vocab)) {
        return Err(Error::IncompleteSequence(p));
    }
    let mut masked = *x;
    for p in (0..BLOCK_LEN).filter(|&p| edit[p] && !GOAL_POSITIONS.contains(&p)) {
        masked.0[p] = vocab.mask_token();
    }
    Ok(denoise(src, masked, cfg.draft_steps, &mut Policy::Greedy, cfg.fused_commit, vocab)?.0)
}

/// One drafted and edited trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub goal: usize,
    pub draw: usize,
    pub draft: TokenSequence,
    pub edited: TokenSequence,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub goals: Vec<GoalProposal>,
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the standard-mode answer: the greedy draw
    /// of the most probable goal.
    pub selected: usize,
}

impl PlanOutput {
    pub fn selected(&self) -> &Candidate {
        &self.candidates[self.selected]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanMode {
    /// One greedy draw per goal.
    Standard,
    /// `draws_per_goal` draws per goal; draw 0 is greedy, the rest sampled.
    BestOfN,
}

pub fn plan(src: &dyn LogitSource, cfg: &PipelineConfig, mode: PlanMode, vocab: &Vocabulary, rng: &mut Rng) -> Result<PlanOutput> {
    cfg.validate()?;
    let goals = propose_goals(src.goal(), cfg, vocab, Some(rng))?;
    let draws = match mode {
        PlanMode::Standard => 1,
        PlanMode::BestOfN => cfg.draws_per_goal,
    };
    let mut candidates = Vec::with_capacity(goals.len() * draws);
    for (gi, goal) in goals.iter().enumerate() {
        for d in 0..draws {
            let mut policy = if d == 0 { Policy::Greedy } else { Policy::Sampled(rng) };
            candidates.push(rollout(src, goal, gi, d, cfg, &mut policy, vocab)?);
        }
    }
    Ok(PlanOutput { goals, candidates, selected: 0 })
}

/// Draft then `edit_steps` edit rounds for one goal under one policy.
pub fn rollout(
    src: &dyn LogitSource,
    goal: &GoalProposal,
    goal_index: usize,
    draw: usize,
    cfg: &PipelineConfig,
    policy: &mut Policy<'_>,
    vocab: &Vocabulary,
) -> Result<Candidate> {
    let (draft, mut transitions) = draft_trajectory(src, goal, cfg, policy, vocab)?;
    let (edited, edits) = autoedit(src, draft, cfg.edit_steps, cfg, policy, vocab)?;
    transitions.extend(edits);
    Ok(Candidate { goal: goal_index, draw, draft, edited, transitions })
}

/// Previous plan re-expressed in the current ego frame: elapsed waypoints
/// dropped, the rest rigidly moved, the tail extended along the last
/// segment. `None` when nothing of the old plan remains.
pub fn shift_plan(prev: &Trajectory, motion: &Pose, elapsed: f64) -> Result<Option<(Trajectory, usize)>> {
    let dt = prev.timestep;
    let steps = elapsed / dt;
    let k = steps.round();
    if elapsed < 0.0 || (steps - k).abs() > 1e-9 {
        return Err(Error::Range(format!("elapsed {elapsed} s is not a multiple of the {dt} s waypoint step")));
    }
    let k = k as usize;
    if k >= prev.waypoints.len() {
        return Ok(None);
    }
    let moved: Vec<[f64; 2]> = std::iter::once([0.0, 0.0]).chain(prev.waypoints.iter().copied()).map(|p| motion.to_local(p)).collect();
    let n = moved.len();
    let d = [moved[n - 1][0] - moved[n - 2][0], moved[n - 1][1] - moved[n - 2][1]];
    let mut pts: Vec<[f64; 2]> = moved[k + 1..].to_vec();
    let last = moved[n - 1];
    for j in 1..=k {
        pts.push([last[0] + j as f64 * d[0], last[1] + j as f64 * d[1]]);
    }
    Ok(Some((Trajectory::with_timestep(pts, dt)?, k)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LiteOutcome {
    Plan { trajectory: Trajectory, tokens: TokenSequence },
    /// The previous plan is used up; run a full frame instead.
    Fallback,
}

/// Lite frame: shift and transform the previous plan, rewrite the block
/// with the argmax of one refresh pass (this fills the extrapolated tail
/// and re-aligns the kept prefix to the new frame), then run the lite edit
/// rounds.
pub fn asd_lite_step(
    prev: &Trajectory,
    motion: &Pose,
    elapsed: f64,
    src: &dyn LogitSource,
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
) -> Result<LiteOutcome> {
    let Some((shifted, k)) = shift_plan(prev, motion, elapsed)? else {
        return Ok(LiteOutcome::Fallback);
    };
    let mut x = tokenize(&shifted, vocab, true)?;
    if k > 0 {
        let logits = src.logits(&x)?;
        x = apply_commit_mask(&logits, &x, &CommitMask([true; BLOCK_LEN]), vocab)?;
    }
    let (x, _) = autoedit(src, x, cfg.lite_edit_steps, cfg, &mut Policy::Greedy, vocab)?;
    Ok(LiteOutcome::Plan { trajectory: detokenize_with_timestep(&x, vocab, prev.timestep)?, tokens: x })
}
