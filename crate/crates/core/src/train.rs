//! Supervised training: masked drafting, corrective translation of
//! perturbed trajectories, the field penalty on drafting logits, and the
//! goal head.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{tokenize, TokenSequence, Vocabulary, GOAL_POSITIONS};
use crate::error::{Error, Result};
use crate::field::field_loss_and_grad;
use crate::model::{
    backward_action, backward_prompt, build_prompt, dlm_loss, forward_action, forward_full, forward_mask, forward_prompt, goal_loss, sap_loss, Adam,
    AdamConfig, GoalLogits, Grads, Params, PromptInput, PromptKv,
};
use crate::perturb::{sample_perturbation, Perturbation, PerturbationConfig};
use crate::rng::SeedTree;
use crate::scene::{dac_cost_field, CostField, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_sap: f64,
    pub lambda_field: f64,
    pub goal_weight: f64,
    /// Mask ratio is drawn uniformly from `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of `adam.lr` (cosine decay).
    pub lr_final_frac: f64,
    pub perturbation: PerturbationConfig,
    pub r_dac: f64,
    pub eps_safe: f64,
    pub log_every: usize,
    /// Probability that a masked sample keeps its goal pair visible, the
    /// condition drafting starts from.
    pub goal_anchor_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_sap: 1.0,
            lambda_field: 0.5,
            goal_weight: 1.0,
            t_min: 0.1,
            t_max: 1.0,
            batch_size: 16,
            steps: 5000,
            adam: AdamConfig::default(),
            lr_final_frac: 0.1,
            perturbation: PerturbationConfig::default(),
            r_dac: 0.5,
            eps_safe: 0.5,
            log_every: 50,
            goal_anchor_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_sap, self.lambda_field, self.goal_weight];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!("mask ratio range [{}, {}] not inside [0, 1]", self.t_min, self.t_max)));
        }
        if !(0.0..=1.0).contains(&self.goal_anchor_prob) {
            return Err(Error::Config(format!("goal_anchor_prob {} outside [0, 1]", self.goal_anchor_prob)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        self.perturbation.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.adam.lr;
        }
        let frac = (step as f64 / self.steps as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.adam.lr * (self.lr_final_frac + (1.0 - self.lr_final_frac) * cos)
    }
}

/// Everything one supervised example needs.
#[derive(Debug, Clone)]
pub struct SftSample {
    pub prompt: PromptInput,
    pub clean: TokenSequence,
    pub masked: TokenSequence,
    pub perturbed: TokenSequence,
    pub perturbation: Perturbation,
    pub cost: CostField,
}

/// Scene-level pieces that do not depend on the random draws.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub prompt: PromptInput,
    pub clean: TokenSequence,
    pub cost: CostField,
    pub scene: Scene,
}

pub fn prepare_scene(scene: &Scene, params: &Params, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<PreparedScene> {
    Ok(PreparedScene {
        prompt: build_prompt(scene, &params.config)?,
        clean: tokenize(&scene.expert, vocab, true)?,
        cost: dac_cost_field(&scene.grid, cfg.r_dac, cfg.eps_safe)?,
        scene: scene.clone(),
    })
}

pub fn make_sample(prep: &PreparedScene, vocab: &Vocabulary, cfg: &TrainConfig, rng: &mut crate::rng::Rng) -> Result<SftSample> {
    let t = if cfg.t_min == cfg.t_max { cfg.t_min } else { rng.gen_range(cfg.t_min..=cfg.t_max) };
    let mut masked = forward_mask(&prep.clean, t, vocab, rng)?;
    if cfg.goal_anchor_prob > 0.0 && rng.gen_bool(cfg.goal_anchor_prob) {
        for p in GOAL_POSITIONS {
            masked.0[p] = prep.clean.0[p];
        }
    }
    let perturbation = sample_perturbation(rng, &cfg.perturbation)?;
    let perturbed = match perturbation.apply(&prep.scene.expert) {
        Ok(traj) => tokenize(&traj, vocab, true)?,
        // a standstill expert has nothing to rescale
        Err(Error::Degenerate(_)) => prep.clean,
        Err(e) => return Err(e),
    };
    Ok(SftSample { prompt: prep.prompt.clone(), clean: prep.clean, masked, perturbed, perturbation, cost: prep.cost.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dlm: f64,
    pub sap: f64,
    pub field: f64,
    pub goal: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(dlm: f64, sap: f64, field: f64, goal: f64, cfg: &TrainConfig) -> Self {
        let total = dlm + cfg.lambda_sap * sap + cfg.lambda_field * field + cfg.goal_weight * goal;
        Self { dlm, sap, field, goal, total }
    }

    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.dlm += s * o.dlm;
        self.sap += s * o.sap;
        self.field += s * o.field;
        self.goal += s * o.goal;
        self.total += s * o.total;
    }
}

fn scaled(l: &crate::model::ActionLogits, s: f64) -> crate::model::ActionLogits {
    crate::model::ActionLogits { x: &l.x * s, y: &l.y * s }
}

/// Loss of one sample; gradients scaled by `weight` are added into `grads`.
pub fn sample_loss_and_grad(params: &Params, s: &SftSample, cfg: &TrainConfig, vocab: &Vocabulary, weight: f64, grads: &mut Grads) -> Result<LossBreakdown> {
    let pp = forward_prompt(params, &s.prompt)?;
    let mut dkv = PromptKv::zeros_like(&pp.kv);
    let draft = forward_action(params, &pp.kv, &s.masked)?;
    let (dlm, mut d_draft) = dlm_loss(&draft.logits, &s.clean, vocab)?;
    d_draft = scaled(&d_draft, weight);
    let mut field = 0.0;
    if cfg.lambda_field > 0.0 {
        let (f, df) = field_loss_and_grad(&draft.logits, &s.cost)?;
        field = f;
        d_draft.x.scaled_add(weight * cfg.lambda_field, &df.x);
        d_draft.y.scaled_add(weight * cfg.lambda_field, &df.y);
    }
    backward_action(params, &draft, &pp.kv, &d_draft, grads, &mut dkv);
    let mut sap = 0.0;
    if cfg.lambda_sap > 0.0 {
        let corr = forward_action(params, &pp.kv, &s.perturbed)?;
        let (l, d) = sap_loss(&corr.logits, &s.perturbed, &s.clean, vocab)?;
        sap = l;
        backward_action(params, &corr, &pp.kv, &scaled(&d, weight * cfg.lambda_sap), grads, &mut dkv);
    }
    let (goal, dgoal) = goal_loss(&pp.goal, &s.clean, vocab)?;
    let w = weight * cfg.goal_weight;
    let dgoal = GoalLogits { x: dgoal.x * w, y: dgoal.y * w };
    backward_prompt(params, &pp, &s.prompt, &dgoal, &dkv, grads);
    let out = LossBreakdown::combine(dlm, sap, field, goal, cfg);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("supervised loss {out:?}")));
    }
    Ok(out)
}

/// Same objective computed through the unsplit reference forward pass,
/// without gradients.
pub fn sample_loss_reference(params: &Params, s: &SftSample, cfg: &TrainConfig, vocab: &Vocabulary) -> Result<LossBreakdown> {
    let draft = forward_full(params, &s.prompt, &s.masked)?;
    let (dlm, _) = dlm_loss(&draft.logits, &s.clean, vocab)?;
    let field = if cfg.lambda_field > 0.0 { field_loss_and_grad(&draft.logits, &s.cost)?.0 } else { 0.0 };
    let sap = if cfg.lambda_sap > 0.0 {
        let corr = forward_full(params, &s.prompt, &s.perturbed)?;
        sap_loss(&corr.logits, &s.perturbed, &s.clean, vocab)?.0
    } else {
        0.0
    };
    let (goal, _) = goal_loss(&draft.goal, &s.clean, vocab)?;
    Ok(LossBreakdown::combine(dlm, sap, field, goal, cfg))
}

/// Mean loss and gradient over a batch.
pub fn batch_loss_and_grad(params: &Params, batch: &[SftSample], cfg: &TrainConfig, vocab: &Vocabulary) -> Result<(LossBreakdown, Grads)> {
    let mut grads = params.zero_grads();
    let mut total = LossBreakdown::default();
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        let l = sample_loss_and_grad(params, s, cfg, vocab, w, &mut grads)?;
        total.add_scaled(&l, w);
    }
    Ok((total, grads))
}

/// One optimizer step on the batch mean of
/// `dlm + lambda_sap * sap + lambda_field * field + goal_weight * goal`.
pub fn sup_train_step(params: &mut Params, adam: &mut Adam, batch: &[SftSample], cfg: &TrainConfig, vocab: &Vocabulary) -> Result<(LossBreakdown, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (loss, mut grads) = batch_loss_and_grad(params, batch, cfg, vocab)?;
    let adam_cfg = AdamConfig { lr: cfg.lr_at(adam.step), ..cfg.adam.clone() };
    let norm = adam.update(&adam_cfg, params, &mut grads)?;
    Ok((loss, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Batch for optimizer step `step`; a pure function of the seed and step so
/// that resumed runs see the same data.
pub fn sft_batch(prepared: &[PreparedScene], step: u64, seed: u64, cfg: &TrainConfig, vocab: &Vocabulary) -> Result<Vec<SftSample>> {
    let mut rng = SeedTree::new(seed).child("sft").indexed("step", step).rng();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    order.into_iter().cycle().take(cfg.batch_size).map(|i| make_sample(&prepared[i], vocab, cfg, &mut rng)).collect()
}

/// Runs optimizer steps until `adam.step` reaches `until` (capped at
/// `cfg.steps`), calling `log` every `log_every` steps and at the last one.
#[allow(clippy::too_many_arguments)]
pub fn train_sft(
    params: &mut Params,
    adam: &mut Adam,
    prepared: &[PreparedScene],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    seed: u64,
    until: usize,
    mut log: impl FnMut(&SftLogRow),
) -> Result<Vec<SftLogRow>> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(Error::Contract("no training scenes".into()));
    }
    let mut rows = Vec::new();
    while (adam.step as usize) < until.min(cfg.steps) {
        let step = adam.step;
        let batch = sft_batch(prepared, step, seed, cfg, vocab)?;
        let lr = cfg.lr_at(step);
        let (loss, grad_norm) = sup_train_step(params, adam, &batch, cfg, vocab)?;
        if step % cfg.log_every.max(1) as u64 == 0 || adam.step as usize == cfg.steps {
            let row = SftLogRow { step, lr, grad_norm, loss };
            log(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
