//! Held-out evaluation: per-scene reports, sweeps, edit recovery and the
//! alternating full/lite clip protocol.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{detokenize_with_timestep, tokenize, Trajectory, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{build_prompt, Params};
use crate::perturb::perturb_longitudinal;
use crate::planner::{asd_lite_step, autoedit_round, plan, CachedSource, LiteOutcome, PipelineConfig, PlanMode, Policy};
use crate::reward::{score, RewardBreakdown, RewardConfig};
use crate::rng::SeedTree;
use crate::scene::{Clip, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub goal: usize,
    pub draw: usize,
    pub pre_edit: RewardBreakdown,
    pub post_edit: RewardBreakdown,
}

/// One record per evaluated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: u64,
    pub goals: Vec<[f64; 2]>,
    pub pre_edit: Trajectory,
    pub post_edit: Trajectory,
    /// Standard-mode answer before and after editing.
    pub single_pre: RewardBreakdown,
    pub single: RewardBreakdown,
    pub candidates: Vec<CandidateReport>,
    /// Oracle maximum of the post-edit aggregate over all candidates.
    pub best_of_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub pre_edit: f64,
    pub post_edit: f64,
    /// `post_edit - pre_edit`.
    pub edit_gain: f64,
    pub best_of_n: f64,
    pub dac: f64,
    pub nc: f64,
    pub ep: f64,
}

pub fn summarize(reports: &[SceneReport]) -> EvalSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SceneReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let pre = mean(&|r| r.single_pre.aggregate);
    let post = mean(&|r| r.single.aggregate);
    EvalSummary {
        scenes: reports.len(),
        pre_edit: pre,
        post_edit: post,
        edit_gain: post - pre,
        best_of_n: mean(&|r| r.best_of_n),
        dac: mean(&|r| r.single.dac),
        nc: mean(&|r| r.single.nc),
        ep: mean(&|r| r.single.ep),
    }
}

pub fn evaluate_scene(scene: &Scene, params: &Params, cfg: &PipelineConfig, reward: &RewardConfig, mode: PlanMode, vocab: &Vocabulary, rng: &mut crate::rng::Rng) -> Result<SceneReport> {
    let prompt = build_prompt(scene, &params.config)?;
    let src = CachedSource::new(&prompt, params)?;
    let out = plan(&src, cfg, mode, vocab, rng)?;
    let dt = scene.expert.timestep;
    let mut candidates = Vec::with_capacity(out.candidates.len());
    for c in &out.candidates {
        candidates.push(CandidateReport {
            goal: c.goal,
            draw: c.draw,
            pre_edit: score(&detokenize_with_timestep(&c.draft, vocab, dt)?, scene, reward)?,
            post_edit: score(&detokenize_with_timestep(&c.edited, vocab, dt)?, scene, reward)?,
        });
    }
    let sel = out.selected();
    let best_of_n = candidates.iter().map(|c| c.post_edit.aggregate).fold(f64::NEG_INFINITY, f64::max);
    Ok(SceneReport {
        scene: scene.seed,
        goals: out.goals.iter().map(|g| g.position).collect(),
        pre_edit: detokenize_with_timestep(&sel.draft, vocab, dt)?,
        post_edit: detokenize_with_timestep(&sel.edited, vocab, dt)?,
        single_pre: candidates[out.selected].pre_edit,
        single: candidates[out.selected].post_edit,
        candidates,
        best_of_n,
    })
}

/// Evaluates every scene; scene `i` draws from substream `i` of `seed`.
pub fn evaluate(scenes: &[Scene], params: &Params, cfg: &PipelineConfig, reward: &RewardConfig, mode: PlanMode, vocab: &Vocabulary, seed: u64) -> Result<Vec<SceneReport>> {
    let root = SeedTree::new(seed).child("eval");
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_scene(s, params, cfg, reward, mode, vocab, &mut root.indexed("scene", i as u64).rng()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub single: f64,
    pub pre_edit: f64,
    pub best_of_n: f64,
    /// Means over the sampled draws (draw > 0) before and after editing;
    /// zero in standard mode.
    pub sampled_pre: f64,
    pub sampled_post: f64,
}

fn sweep(scenes: &[Scene], params: &Params, configs: &[(f64, PipelineConfig)], reward: &RewardConfig, mode: PlanMode, vocab: &Vocabulary, seed: u64) -> Result<Vec<SweepPoint>> {
    configs
        .iter()
        .map(|(value, cfg)| {
            let reports = evaluate(scenes, params, cfg, reward, mode, vocab, seed)?;
            let s = summarize(&reports);
            let (mut pre, mut post, mut n) = (0.0, 0.0, 0usize);
            for c in reports.iter().flat_map(|r| &r.candidates).filter(|c| c.draw > 0) {
                pre += c.pre_edit.aggregate;
                post += c.post_edit.aggregate;
                n += 1;
            }
            let d = n.max(1) as f64;
            Ok(SweepPoint { value: *value, single: s.post_edit, pre_edit: s.pre_edit, best_of_n: s.best_of_n, sampled_pre: pre / d, sampled_post: post / d })
        })
        .collect()
}

/// Drafting and edit rounds both set to each value in `steps`, evaluated in
/// best-of-N mode so that both the greedy answer and the sampled draws are
/// reported.
pub fn step_sweep(scenes: &[Scene], params: &Params, base: &PipelineConfig, steps: &[usize], reward: &RewardConfig, vocab: &Vocabulary, seed: u64) -> Result<Vec<SweepPoint>> {
    let configs: Vec<(f64, PipelineConfig)> = steps.iter().map(|&s| (s as f64, PipelineConfig { draft_steps: s, edit_steps: s, ..base.clone() })).collect();
    sweep(scenes, params, &configs, reward, PlanMode::BestOfN, vocab, seed)
}

/// Best-of-N quality against the suppression radius.
pub fn nms_sweep(scenes: &[Scene], params: &Params, base: &PipelineConfig, radii: &[f64], reward: &RewardConfig, vocab: &Vocabulary, seed: u64) -> Result<Vec<SweepPoint>> {
    let configs: Vec<(f64, PipelineConfig)> = radii.iter().map(|&r| (r, PipelineConfig { nms_radius: r, ..base.clone() })).collect();
    sweep(scenes, params, &configs, reward, PlanMode::BestOfN, vocab, seed)
}

pub fn goal_count_sweep(scenes: &[Scene], params: &Params, base: &PipelineConfig, counts: &[usize], reward: &RewardConfig, vocab: &Vocabulary, seed: u64) -> Result<Vec<SweepPoint>> {
    let configs: Vec<(f64, PipelineConfig)> = counts.iter().map(|&n| (n as f64, PipelineConfig { n_goals: n, ..base.clone() })).collect();
    sweep(scenes, params, &configs, reward, PlanMode::BestOfN, vocab, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditRecovery {
    pub before: f64,
    pub after: f64,
}

/// Mean L2 distance to the clean expert before and after one edit round on
/// expert drafts compressed by `beta`.
pub fn edit_recovery(scenes: &[Scene], params: &Params, cfg: &PipelineConfig, beta: f64, vocab: &Vocabulary) -> Result<EditRecovery> {
    if scenes.is_empty() {
        return Err(Error::Contract("no scenes".into()));
    }
    let (mut before, mut after) = (0.0, 0.0);
    for scene in scenes {
        let dt = scene.expert.timestep;
        let perturbed = perturb_longitudinal(&scene.expert, beta)?;
        let x = tokenize(&perturbed, vocab, true)?;
        let prompt = build_prompt(scene, &params.config)?;
        let src = CachedSource::new(&prompt, params)?;
        let (y, _, _) = autoedit_round(&src, &x, cfg.edit_commit(), &mut Policy::Greedy, cfg.fused_commit, vocab)?;
        before += detokenize_with_timestep(&x, vocab, dt)?.mean_l2(&scene.expert);
        after += detokenize_with_timestep(&y, vocab, dt)?.mean_l2(&scene.expert);
    }
    let n = scenes.len() as f64;
    Ok(EditRecovery { before: before / n, after: after / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRun {
    /// Post-edit aggregate per frame.
    pub rewards: Vec<f64>,
    /// Seconds spent building the prefix (and goal logits) per frame.
    pub prefill: Vec<f64>,
    /// Seconds spent decoding per frame.
    pub decode: Vec<f64>,
    /// Whether each frame ran the lite schedule.
    pub lite: Vec<bool>,
}

impl ClipRun {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    /// Mean decode seconds over frames of one kind.
    pub fn mean_decode(&self, lite: bool) -> Option<f64> {
        let v: Vec<f64> = self.decode.iter().zip(&self.lite).filter(|(_, &l)| l == lite).map(|(d, _)| *d).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs a clip frame by frame. With `alternate`, odd frames reuse the
/// previous plan through the lite step.
pub fn run_clip(clip: &Clip, params: &Params, cfg: &PipelineConfig, reward: &RewardConfig, vocab: &Vocabulary, alternate: bool, seed: u64) -> Result<ClipRun> {
    let root = SeedTree::new(seed).child("clip-eval");
    let mut run = ClipRun { rewards: Vec::new(), prefill: Vec::new(), decode: Vec::new(), lite: Vec::new() };
    let mut prev: Option<Trajectory> = None;
    for (f, scene) in clip.frames.iter().enumerate() {
        let dt = scene.expert.timestep;
        let prompt = build_prompt(scene, &params.config)?;
        let t0 = Instant::now();
        let src = CachedSource::new(&prompt, params)?;
        let prefill = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mut lite = false;
        let mut traj = None;
        if alternate && f % 2 == 1 {
            if let Some(p) = &prev {
                if let LiteOutcome::Plan { trajectory, .. } = asd_lite_step(p, &clip.motions[f], dt, &src, cfg, vocab)? {
                    traj = Some(trajectory);
                    lite = true;
                }
            }
        }
        let traj = match traj {
            Some(t) => t,
            None => {
                let out = plan(&src, cfg, PlanMode::Standard, vocab, &mut root.indexed("frame", f as u64).rng())?;
                detokenize_with_timestep(&out.selected().edited, vocab, dt)?
            }
        };
        run.decode.push(t1.elapsed().as_secs_f64());
        run.prefill.push(prefill);
        run.lite.push(lite);
        run.rewards.push(score(&traj, scene, reward)?.aggregate);
        prev = Some(traj);
    }
    Ok(run)
}
