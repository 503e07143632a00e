//! Group-relative policy optimization over composed draft-and-edit
//! rollouts.
//!
//! Each transition of a rollout contributes a clipped importance-ratio term
//! at the positions it changed, scaled by `1 / (G * L)`, plus a KL penalty
//! towards a frozen reference policy. Goal proposal is part of the
//! environment: no gradient flows through it.

use serde::{Deserialize, Serialize};

use crate::codec::{detokenize_with_timestep, Axis, TokenSequence, Vocabulary, BLOCK_LEN, GOAL_POSITIONS};
use crate::error::{Error, Result};
use crate::model::{backward_action, backward_prompt, forward_action, forward_prompt, log_softmax, ActionLogits, Adam, AdamConfig, GoalLogits, Grads, Params, PromptInput, PromptKv};
use crate::planner::{propose_goals, rollout, CachedSource, LogitSource, PipelineConfig, Policy, StepKind, Transition};
use crate::reward::{score, RewardConfig};
use crate::rng::SeedTree;
use crate::train::PreparedScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub n_goals: usize,
    pub draws_per_goal: usize,
    pub clip_eps: f64,
    pub kl_weight: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Scenes visited per epoch.
    pub scenes_per_epoch: usize,
    /// Groups sampled with frozen parameters before their serial updates.
    pub groups_per_batch: usize,
    /// Rewards are `aggregate * reward_scale`.
    pub reward_scale: f64,
    pub pipeline: PipelineConfig,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            n_goals: 3,
            draws_per_goal: 2,
            clip_eps: 0.2,
            kl_weight: 0.02,
            adam: AdamConfig { lr: 3e-5, ..AdamConfig::default() },
            epochs: 20,
            scenes_per_epoch: 128,
            groups_per_batch: 4,
            reward_scale: 0.01,
            pipeline: PipelineConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn group_size(&self) -> usize {
        self.n_goals * self.draws_per_goal
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size() < 2 {
            return Err(Error::Config(format!("group size {} must be at least 2", self.group_size())));
        }
        if !(self.clip_eps >= 0.0) || !(self.kl_weight >= 0.0) || !(self.reward_scale > 0.0) {
            return Err(Error::Config("clip_eps and kl_weight must be non-negative, reward_scale positive".into()));
        }
        if self.groups_per_batch == 0 {
            return Err(Error::Config("groups_per_batch must be positive".into()));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub goal: usize,
    pub draw: usize,
    pub transitions: Vec<Transition>,
    pub reward: f64,
    /// Reward of the draft before editing; logged, never used in the loss.
    pub pre_edit_reward: f64,
}

impl Rollout {
    /// `x^0 ... x^S`.
    pub fn states(&self) -> Vec<TokenSequence> {
        let mut s: Vec<TokenSequence> = self.transitions.iter().map(|t| t.before).collect();
        if let Some(t) = self.transitions.last() {
            s.push(t.after);
        }
        s
    }

    pub fn final_state(&self) -> Option<TokenSequence> {
        self.transitions.last().map(|t| t.after)
    }
}

/// 1 exactly where the two states differ.
pub fn transition_indicator(a: &TokenSequence, b: &TokenSequence) -> [bool; BLOCK_LEN] {
    let mut out = [false; BLOCK_LEN];
    for (p, o) in out.iter_mut().enumerate() {
        *o = a.0[p] != b.0[p];
    }
    out
}

/// Rewards minus their group mean.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!("group advantage needs at least 2 rewards, got {}", rewards.len())));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Samples every goal/draw rollout of one scene with the current parameters.
/// Returns fewer than `G` rollouts when NMS leaves fewer goals.
pub fn sample_rollout_group(prep: &PreparedScene, params: &Params, cfg: &RlConfig, vocab: &Vocabulary, rng: &mut crate::rng::Rng) -> Result<Vec<Rollout>> {
    let pipeline = PipelineConfig { n_goals: cfg.n_goals, ..cfg.pipeline.clone() };
    let src = CachedSource::new(&prep.prompt, params)?;
    let goals = propose_goals(src.goal(), &pipeline, vocab, Some(rng))?;
    if goals.len() < cfg.n_goals {
        log::info!("scene {}: {} of {} goals survived suppression", prep.scene.seed, goals.len(), cfg.n_goals);
    }
    let dt = prep.scene.expert.timestep;
    let mut out = Vec::with_capacity(goals.len() * cfg.draws_per_goal);
    for (gi, goal) in goals.iter().enumerate() {
        for d in 0..cfg.draws_per_goal {
            let c = rollout(&src, goal, gi, d, &pipeline, &mut Policy::Sampled(rng), vocab)?;
            let post = score(&detokenize_with_timestep(&c.edited, vocab, dt)?, &prep.scene, &cfg.reward)?.aggregate;
            let pre = score(&detokenize_with_timestep(&c.draft, vocab, dt)?, &prep.scene, &cfg.reward)?.aggregate;
            out.push(Rollout { goal: gi, draw: d, transitions: c.transitions, reward: post * cfg.reward_scale, pre_edit_reward: pre * cfg.reward_scale });
        }
    }
    Ok(out)
}

/// Mean aggregate reward of composed rollouts before and after editing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutGap {
    pub pre_edit: f64,
    pub post_edit: f64,
    pub rollouts: usize,
}

impl RolloutGap {
    pub fn gap(&self) -> f64 {
        self.post_edit - self.pre_edit
    }
}

/// Runs the training-time sampler over `scenes`; scene `i` draws from
/// substream `i` of `seed`, so two parameter sets see the same noise.
pub fn rollout_edit_gap(scenes: &[PreparedScene], params: &Params, cfg: &RlConfig, vocab: &Vocabulary, seed: u64) -> Result<RolloutGap> {
    let root = SeedTree::new(seed).child("rollout-gap");
    let mut out = RolloutGap::default();
    for (i, prep) in scenes.iter().enumerate() {
        for r in sample_rollout_group(prep, params, cfg, vocab, &mut root.indexed("scene", i as u64).rng())? {
            out.pre_edit += r.pre_edit_reward / cfg.reward_scale;
            out.post_edit += r.reward / cfg.reward_scale;
            out.rollouts += 1;
        }
    }
    let n = out.rollouts.max(1) as f64;
    out.pre_edit /= n;
    out.post_edit /= n;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RlLoss {
    /// Mean clipped surrogate (the quantity being maximized).
    pub surrogate: f64,
    pub kl: f64,
    pub total: f64,
}

/// Positions whose distribution enters the KL term for a transition: the
/// masked positions of a drafting state, the non-goal positions of an
/// editing state.
fn kl_positions<'a>(t: &'a Transition, vocab: &Vocabulary) -> impl Iterator<Item = usize> + 'a {
    let mask = vocab.mask_token();
    (0..BLOCK_LEN).filter(move |&p| match t.kind {
        StepKind::Draft => t.before.0[p] == mask,
        StepKind::Edit => !GOAL_POSITIONS.contains(&p),
    })
}

/// Clipped surrogate loss with KL penalty. When `grads` is given, the
/// gradient with respect to `params` is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_loss(
    rollouts: &[Rollout],
    advantages: &[f64],
    params: &Params,
    ref_params: &Params,
    prompt: &PromptInput,
    cfg: &RlConfig,
    vocab: &Vocabulary,
    mut grads: Option<&mut Grads>,
) -> Result<RlLoss> {
    if rollouts.len() != advantages.len() {
        return Err(Error::Contract(format!("{} rollouts but {} advantages", rollouts.len(), advantages.len())));
    }
    if rollouts.is_empty() {
        return Ok(RlLoss::default());
    }
    let g = rollouts.len() as f64;
    let norm = 1.0 / (g * BLOCK_LEN as f64);
    let kl_count: usize = rollouts.iter().flat_map(|r| &r.transitions).map(|t| kl_positions(t, vocab).count()).sum();
    let kl_scale = if kl_count > 0 { 1.0 / kl_count as f64 } else { 0.0 };

    let pp = forward_prompt(params, prompt)?;
    let ref_kv = forward_prompt(ref_params, prompt)?.kv;
    let mut dkv = PromptKv::zeros_like(&pp.kv);
    let (bx, by) = (params.config.bins_x, params.config.bins_y);
    let mut surrogate = 0.0;
    let mut kl = 0.0;

    for (r, &adv) in rollouts.iter().zip(advantages) {
        for t in &r.transitions {
            let pass = forward_action(params, &pp.kv, &t.before)?;
            let ref_logits = forward_action(ref_params, &ref_kv, &t.before)?.logits;
            let mut dlogits = ActionLogits::zeros(bx, by);
            for p in (0..BLOCK_LEN).filter(|&p| t.before.0[p] != t.after.0[p]) {
                let axis = Axis::of_position(p);
                let bin = vocab
                    .bin_of(axis, t.after.0[p])
                    .ok_or_else(|| Error::Contract(format!("transition writes a non-coordinate token at {p}")))?;
                let lp = log_softmax(pass.logits.row(p));
                let ratio = (lp[bin] - t.probs[p].ln()).exp();
                if !ratio.is_finite() || !(t.probs[p] > 0.0) {
                    return Err(Error::NonFinite(format!(
                        "importance ratio at position {p}: old probability {}, new {}",
                        t.probs[p],
                        lp[bin].exp()
                    )));
                }
                let unclipped = ratio * adv;
                let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
                surrogate += unclipped.min(clipped) * norm;
                if unclipped <= clipped {
                    // d(ratio)/dz = ratio * (onehot - p)
                    let mut row = dlogits.row_mut(p);
                    for (i, v) in row.iter_mut().enumerate() {
                        let onehot = if i == bin { 1.0 } else { 0.0 };
                        *v -= norm * adv * ratio * (onehot - lp[i].exp());
                    }
                }
            }
            for p in kl_positions(t, vocab) {
                let lp = log_softmax(pass.logits.row(p));
                let lq = log_softmax(ref_logits.row(p));
                let k: f64 = lp.iter().zip(lq.iter()).map(|(a, b)| a.exp() * (a - b)).sum();
                kl += k * kl_scale;
                let mut row = dlogits.row_mut(p);
                for (i, v) in row.iter_mut().enumerate() {
                    *v += cfg.kl_weight * kl_scale * lp[i].exp() * (lp[i] - lq[i] - k);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                backward_action(params, &pass, &pp.kv, &dlogits, g, &mut dkv);
            }
        }
    }
    if let Some(g) = grads {
        let zero = GoalLogits { x: ndarray::Array1::zeros(bx), y: ndarray::Array1::zeros(by) };
        backward_prompt(params, &pp, prompt, &zero, &dkv, g);
    }
    Ok(RlLoss { surrogate, kl, total: -surrogate + cfg.kl_weight * kl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlLogRow {
    pub epoch: usize,
    pub pre_edit_reward: f64,
    pub post_edit_reward: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Groups whose rewards were all equal (zero advantage).
    pub flat_groups: usize,
    pub groups: usize,
}

/// Runs `cfg.epochs` epochs. Scenes are visited in a seed-determined order;
/// each batch of `groups_per_batch` groups is sampled with frozen parameters
/// and followed by one optimizer step per group.
pub fn rl_train_loop(
    params: &mut Params,
    adam: &mut Adam,
    ref_params: &Params,
    scenes: &[PreparedScene],
    cfg: &RlConfig,
    vocab: &Vocabulary,
    seed: u64,
    mut log: impl FnMut(&RlLogRow),
) -> Result<Vec<RlLogRow>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("no scenes for reinforcement fine-tuning".into()));
    }
    let root = SeedTree::new(seed).child("rl");
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order_rng = root.indexed("order", epoch as u64).rng();
        let order: Vec<usize> = rand::seq::index::sample(&mut order_rng, scenes.len(), cfg.scenes_per_epoch.min(scenes.len())).into_vec();
        let mut acc = RlLogRow { epoch, pre_edit_reward: 0.0, post_edit_reward: 0.0, surrogate: 0.0, kl: 0.0, loss: 0.0, grad_norm: 0.0, flat_groups: 0, groups: 0 };
        let mut n_rollouts = 0usize;
        for (b, chunk) in order.chunks(cfg.groups_per_batch).enumerate() {
            let mut groups = Vec::with_capacity(chunk.len());
            for (i, &si) in chunk.iter().enumerate() {
                let mut rng = root.indexed("sample", (epoch * scenes.len() + b * cfg.groups_per_batch + i) as u64).rng();
                groups.push((si, sample_rollout_group(&scenes[si], params, cfg, vocab, &mut rng)?));
            }
            for (si, group) in groups {
                if group.len() < 2 {
                    continue;
                }
                let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
                let adv = group_advantage(&rewards)?;
                if adv.iter().all(|a| a.abs() < 1e-12) {
                    acc.flat_groups += 1;
                }
                let mut grads = params.zero_grads();
                let loss = policy_gradient_loss(&group, &adv, params, ref_params, &scenes[si].prompt, cfg, vocab, Some(&mut grads))?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!("policy loss at epoch {epoch}")));
                }
                acc.grad_norm += adam.update(&cfg.adam, params, &mut grads)?;
                acc.surrogate += loss.surrogate;
                acc.kl += loss.kl;
                acc.loss += loss.total;
                acc.groups += 1;
                for r in &group {
                    acc.pre_edit_reward += r.pre_edit_reward / cfg.reward_scale;
                    acc.post_edit_reward += r.reward / cfg.reward_scale;
                }
                n_rollouts += group.len();
            }
        }
        let gn = acc.groups.max(1) as f64;
        let rn = n_rollouts.max(1) as f64;
        let row = RlLogRow {
            pre_edit_reward: acc.pre_edit_reward / rn,
            post_edit_reward: acc.post_edit_reward / rn,
            surrogate: acc.surrogate / gn,
            kl: acc.kl / gn,
            loss: acc.loss / gn,
            grad_norm: acc.grad_norm / gn,
            ..acc
        };
        if row.groups > 0 && row.flat_groups * 2 > row.groups {
            log::warn!("epoch {epoch}: {} of {} groups had identical rewards", row.flat_groups, row.groups);
        }
        log(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, softmax, ModelConfig};
    use crate::scene::{generate_scene, SceneConfig};
    use crate::train::{prepare_scene, TrainConfig};
    use rand::Rng;

    fn setup(n: u64) -> (Params, Vocabulary, Vec<PreparedScene>) {
        let v = Vocabulary::default();
        let params = Params::init(&ModelConfig::tiny(&v), &mut SeedTree::new(21).rng()).unwrap();
        let tc = TrainConfig::default();
        let prep = (0..n).map(|s| prepare_scene(&generate_scene(100 + s, &SceneConfig::default(), &v).unwrap(), &params, &v, &tc).unwrap()).collect();
        (params, v, prep)
    }

    fn jitter(p: &Params, seed: u64, scale: f64) -> Params {
        let mut q = p.clone();
        let mut rng = SeedTree::new(seed).rng();
        q.data.iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
        q
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[1.0, 2.0, 3.0]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(group_advantage(&[4.0; 6]).unwrap().iter().all(|&a| a == 0.0));
        assert!(matches!(group_advantage(&[1.0]), Err(Error::Contract(_))));
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..100 {
            let n = rng.gen_range(2..10);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            assert!(group_advantage(&r).unwrap().iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn indicator_examples() {
        let v = Vocabulary::default();
        let mut a = TokenSequence::all_masked(&v);
        assert_eq!(transition_indicator(&a, &a), [false; BLOCK_LEN]);
        a.0[1] = v.token(Axis::Y, 3);
        let mut b = a;
        b.0[0] = v.token(Axis::X, 2);
        let ind = transition_indicator(&a, &b);
        assert!(ind[0] && !ind[1]);
    }

    #[test]
    fn groups_follow_the_composition() {
        let (params, v, prep) = setup(3);
        let cfg = RlConfig::default();
        let mut rng = SeedTree::new(4).rng();
        for p in &prep {
            let group = sample_rollout_group(p, &params, &cfg, &v, &mut rng).unwrap();
            assert!(group.len() <= 6 && group.len() >= 2);
            for r in &group {
                assert_eq!(r.transitions.len(), cfg.pipeline.draft_steps + cfg.pipeline.edit_steps);
                assert_eq!(r.final_state().unwrap().mask_count(&v), 0);
                for (s, t) in r.transitions.iter().enumerate() {
                    let ind = transition_indicator(&t.before, &t.after);
                    let changed = ind.iter().filter(|&&b| b).count();
                    let masks_before = t.before.mask_count(&v);
                    let masks_after = t.after.mask_count(&v);
                    if s < cfg.pipeline.draft_steps {
                        assert_eq!(t.kind, StepKind::Draft);
                        assert_eq!(changed, masks_before - masks_after);
                    } else {
                        assert_eq!(t.kind, StepKind::Edit);
                        assert_eq!((masks_before, masks_after), (0, 0));
                    }
                }
            }
        }
        let single = RlConfig { pipeline: PipelineConfig { edit_steps: 0, ..Default::default() }, ..cfg };
        let group = sample_rollout_group(&prep[0], &params, &single, &v, &mut rng).unwrap();
        assert!(group.iter().all(|r| r.transitions.iter().all(|t| t.kind == StepKind::Draft)));
    }

    #[test]
    fn on_policy_single_token_value() {
        let (params, v, prep) = setup(1);
        let cfg = RlConfig::default();
        let mut rng = SeedTree::new(5).rng();
        let mut group = sample_rollout_group(&prep[0], &params, &cfg, &v, &mut rng).unwrap();
        // Keep only the first transition of the first rollout and one of its
        // changed positions.
        let mut t = group[0].transitions[0].clone();
        let p = (0..BLOCK_LEN).find(|&p| t.before.0[p] != t.after.0[p]).unwrap();
        for q in 0..BLOCK_LEN {
            if q != p {
                t.after.0[q] = t.before.0[q];
                t.probs[q] = 0.0;
            }
        }
        group.truncate(2);
        group[0].transitions = vec![t.clone()];
        group[1].transitions = vec![];
        let a = 0.7;
        let loss = policy_gradient_loss(&group, &[a, -a], &params, &params, &prep[0].prompt, &cfg, &v, None).unwrap();
        assert!((loss.total + a / (2.0 * 16.0)).abs() < 1e-12, "{loss:?}");
        assert!(loss.kl.abs() < 1e-15);

        // Old probability half the new one: ratio 2, clipped to 1.2.
        let mut half = group.clone();
        half[0].transitions[0].probs[p] /= 2.0;
        let l = policy_gradient_loss(&half, &[a, -a], &params, &params, &prep[0].prompt, &cfg, &v, None).unwrap();
        assert!((l.surrogate - 1.2 * a / 32.0).abs() < 1e-12);

        let mut zero = group.clone();
        zero[0].transitions[0].probs[p] = 0.0;
        assert!(matches!(policy_gradient_loss(&zero, &[a, -a], &params, &params, &prep[0].prompt, &cfg, &v, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (base, v, prep) = setup(1);
        let old = jitter(&base, 1, 0.01);
        let ref_params = jitter(&base, 2, 0.01);
        let params = base;
        let cfg = RlConfig { clip_eps: 0.05, kl_weight: 0.3, ..Default::default() };
        let mut rng = SeedTree::new(6).rng();
        let group = sample_rollout_group(&prep[0], &old, &cfg, &v, &mut rng).unwrap();
        let rewards: Vec<f64> = (0..group.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let adv = group_advantage(&rewards).unwrap();
        let prompt = &prep[0].prompt;
        let mut g = params.zero_grads();
        policy_gradient_loss(&group, &adv, &params, &ref_params, prompt, &cfg, &v, Some(&mut g)).unwrap();
        let mut probe_rng = SeedTree::new(8).rng();
        let h = 1e-5;
        let mut checked = 0;
        while checked < 24 {
            let i = probe_rng.gen_range(0..params.len());
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.data[i] += h;
            minus.data[i] -= h;
            let fp = policy_gradient_loss(&group, &adv, &plus, &ref_params, prompt, &cfg, &v, None).unwrap().total;
            let fm = policy_gradient_loss(&group, &adv, &minus, &ref_params, prompt, &cfg, &v, None).unwrap().total;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.data[i];
            if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                continue;
            }
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9, "param {i}: fd {fd} vs analytic {an}");
            checked += 1;
        }
    }

    // Direct per-transition evaluation with the full-sequence forward pass.
    fn single_pass_objective(group: &[Rollout], adv: &[f64], params: &Params, prompt: &PromptInput, eps: f64, v: &Vocabulary) -> f64 {
        let mut total = 0.0;
        for (r, a) in group.iter().zip(adv) {
            for t in &r.transitions {
                let logits = forward_full(params, prompt, &t.before).unwrap().logits;
                for p in 0..BLOCK_LEN {
                    if t.before.0[p] != t.after.0[p] {
                        let probs = softmax(logits.row(p));
                        let ratio = probs[v.bin_of(Axis::of_position(p), t.after.0[p]).unwrap()] / t.probs[p];
                        total += (ratio * a).min(ratio.clamp(1.0 - eps, 1.0 + eps) * a);
                    }
                }
            }
        }
        -total / (group.len() as f64 * BLOCK_LEN as f64)
    }

    #[test]
    fn draft_only_rollouts_reduce_to_single_pass() {
        let (params, v, prep) = setup(2);
        let old = jitter(&params, 3, 0.02);
        let cfg = RlConfig { kl_weight: 0.0, pipeline: PipelineConfig { edit_steps: 0, ..Default::default() }, ..Default::default() };
        let mut rng = SeedTree::new(7).rng();
        for p in &prep {
            let group = sample_rollout_group(p, &old, &cfg, &v, &mut rng).unwrap();
            let adv = group_advantage(&group.iter().enumerate().map(|(i, _)| i as f64).collect::<Vec<_>>()).unwrap();
            let got = policy_gradient_loss(&group, &adv, &params, &params, &p.prompt, &cfg, &v, None).unwrap().total;
            let want = single_pass_objective(&group, &adv, &params, &p.prompt, cfg.clip_eps, &v);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn intermediate_rewards_never_enter_the_loss() {
        let (params, v, prep) = setup(1);
        let cfg = RlConfig::default();
        let mut rng = SeedTree::new(9).rng();
        let group = sample_rollout_group(&prep[0], &params, &cfg, &v, &mut rng).unwrap();
        let adv = group_advantage(&group.iter().map(|r| r.reward).collect::<Vec<_>>()).unwrap();
        let a = policy_gradient_loss(&group, &adv, &params, &params, &prep[0].prompt, &cfg, &v, None).unwrap();
        let mut changed = group.clone();
        changed.iter_mut().for_each(|r| r.pre_edit_reward = -1e6);
        let b = policy_gradient_loss(&changed, &adv, &params, &params, &prep[0].prompt, &cfg, &v, None).unwrap();
        assert_eq!(a, b);
    }

    fn total_variation(a: &Params, b: &Params, prep: &[PreparedScene], v: &Vocabulary) -> f64 {
        let mut tv = 0.0;
        for p in prep {
            let x = TokenSequence::all_masked(v);
            let la = forward_full(a, &p.prompt, &x).unwrap().logits;
            let lb = forward_full(b, &p.prompt, &x).unwrap().logits;
            for pos in 0..BLOCK_LEN {
                let (pa, pb) = (softmax(la.row(pos)), softmax(lb.row(pos)));
                tv += 0.5 * pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            }
        }
        tv
    }

    #[test]
    fn heavy_kl_keeps_the_policy_near_reference() {
        let (params, v, prep) = setup(8);
        // Start away from the reference so the penalty has something to pull.
        let start = jitter(&params, 11, 0.02);
        let run = |kl_weight: f64| {
            let mut p = start.clone();
            let mut adam = Adam::new(p.len());
            let cfg = RlConfig { kl_weight, epochs: 2, scenes_per_epoch: 8, adam: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
            let rows = rl_train_loop(&mut p, &mut adam, &params, &prep, &cfg, &v, 3, |_| {}).unwrap();
            assert_eq!(rows.len(), 2);
            assert!(rows.iter().all(|r| r.loss.is_finite() && r.groups > 0));
            total_variation(&p, &params, &prep, &v)
        };
        let before = total_variation(&start, &params, &prep, &v);
        let free = run(0.0);
        let tied = run(1e4);
        assert!(tied < free && tied < before, "tv with heavy KL {tied}, without {free}, at start {before}");
    }
}
