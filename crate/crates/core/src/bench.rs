//! Optimization-chain benchmark. Each row stacks one runtime change on top
//! of the previous one and is compared against the unoptimized baseline.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{detokenize_with_timestep, Trajectory, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{build_prompt, Params};
use crate::planner::{asd_lite_step, plan, CachedSource, LiteOutcome, LogitSource, PipelineConfig, PlanMode, UncachedSource};
use crate::reward::{score, RewardConfig};
use crate::rng::SeedTree;
use crate::scene::Clip;

pub const CHAIN_ROWS: [&str; 6] = ["baseline", "+merged", "+prefix-cache", "+action-expert", "+fused-commit", "+asd"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    /// Number of chain rows to run, counted from the baseline.
    pub steps: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Largest tolerated |reward delta| against the baseline.
    pub quality_gate: f64,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { steps: CHAIN_ROWS.len(), warmup: 1, iters: 3, quality_gate: 1.0, seed: 0 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > CHAIN_ROWS.len() {
            return Err(Error::Config(format!("chain steps must be in 1..={}, got {}", CHAIN_ROWS.len(), self.steps)));
        }
        if self.iters == 0 {
            return Err(Error::Config("bench needs at least one timed iteration".into()));
        }
        if !(self.quality_gate >= 0.0) {
            return Err(Error::Config(format!("quality gate {} must be non-negative", self.quality_gate)));
        }
        Ok(())
    }
}

/// Milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

impl Latency {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        // Nearest rank.
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self { mean: s.iter().sum::<f64>() / s.len() as f64, p50: rank(0.5), p90: rank(0.9) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub name: String,
    pub prefill: Latency,
    pub decode: Latency,
    /// Decode latency over lite frames only; present on the ASD row.
    pub lite_decode: Option<Latency>,
    pub reward: f64,
    pub reward_delta: f64,
    pub within_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub row: String,
    pub iter: usize,
    pub clip: usize,
    pub frame: usize,
    pub lite: bool,
    pub prefill_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub quality_gate: f64,
    pub rows: Vec<ChainRow>,
    pub raw: Vec<TimingSample>,
}

impl ChainReport {
    pub fn all_within_gate(&self) -> bool {
        self.rows.iter().all(|r| r.within_gate)
    }

    /// Fixed-width text table, one line per row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>5}",
            "row", "pre_mean", "pre_p50", "pre_p90", "dec_mean", "dec_p50", "dec_p90", "reward", "delta", "gate"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.2} {:>+8.2} {:>5}",
                r.name,
                r.prefill.mean,
                r.prefill.p50,
                r.prefill.p90,
                r.decode.mean,
                r.decode.p50,
                r.decode.p90,
                r.reward,
                r.reward_delta,
                if r.within_gate { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

#[derive(Clone, Copy)]
struct RowSetup<'a> {
    params: &'a Params,
    cached: bool,
    merged: bool,
    fused: bool,
    asd: bool,
}

struct FrameResult {
    prefill: f64,
    decode: f64,
    lite: bool,
    reward: f64,
    plan: Trajectory,
}

fn run_frame(clip: &Clip, f: usize, prev: Option<&Trajectory>, row: RowSetup, cfg: &PipelineConfig, reward: &RewardConfig, vocab: &Vocabulary, seed: u64) -> Result<FrameResult> {
    let scene = &clip.frames[f];
    let dt = scene.expert.timestep;
    let prompt = build_prompt(scene, &row.params.config)?;
    let t0 = Instant::now();
    let src: Box<dyn LogitSource + '_> = if row.cached {
        Box::new(CachedSource::new(&prompt, row.params)?)
    } else {
        Box::new(UncachedSource::new(&prompt, row.params, row.merged)?)
    };
    let prefill = t0.elapsed().as_secs_f64() * 1e3;
    let cfg = PipelineConfig { fused_commit: row.fused, ..cfg.clone() };
    let t1 = Instant::now();
    let mut lite = None;
    if row.asd && f % 2 == 1 {
        if let Some(p) = prev {
            if let LiteOutcome::Plan { trajectory, .. } = asd_lite_step(p, &clip.motions[f], dt, src.as_ref(), &cfg, vocab)? {
                lite = Some(trajectory);
            }
        }
    }
    let is_lite = lite.is_some();
    let traj = match lite {
        Some(t) => t,
        None => {
            let mut rng = SeedTree::new(seed).indexed("frame", f as u64).rng();
            let out = plan(src.as_ref(), &cfg, PlanMode::Standard, vocab, &mut rng)?;
            detokenize_with_timestep(&out.selected().edited, vocab, dt)?
        }
    };
    let decode = t1.elapsed().as_secs_f64() * 1e3;
    Ok(FrameResult { prefill, decode, lite: is_lite, reward: score(&traj, scene, reward)?.aggregate, plan: traj })
}

/// Runs the chain over every frame of every clip. `full_width` holds the
/// parameters without the narrow action branch and drives the first three
/// rows; `expert` drives the rest. Passing the same parameters twice turns
/// the action-expert row into a pure re-measurement.
pub fn bench_chain(
    clips: &[Clip],
    full_width: &Params,
    expert: &Params,
    chain: &ChainConfig,
    cfg: &PipelineConfig,
    reward: &RewardConfig,
    vocab: &Vocabulary,
) -> Result<ChainReport> {
    chain.validate()?;
    cfg.validate()?;
    if clips.iter().all(|c| c.frames.is_empty()) {
        return Err(Error::Contract("bench needs at least one frame".into()));
    }
    let setups = [
        RowSetup { params: full_width, cached: false, merged: false, fused: false, asd: false },
        RowSetup { params: full_width, cached: false, merged: true, fused: false, asd: false },
        RowSetup { params: full_width, cached: true, merged: true, fused: false, asd: false },
        RowSetup { params: expert, cached: true, merged: true, fused: false, asd: false },
        RowSetup { params: expert, cached: true, merged: true, fused: true, asd: false },
        RowSetup { params: expert, cached: true, merged: true, fused: true, asd: true },
    ];
    let mut report = ChainReport { quality_gate: chain.quality_gate, rows: Vec::new(), raw: Vec::new() };
    let mut baseline = None;
    for (name, &row) in CHAIN_ROWS.iter().zip(&setups).take(chain.steps) {
        let (mut prefill, mut decode, mut lite_decode) = (Vec::new(), Vec::new(), Vec::new());
        let (mut reward_sum, mut frames) = (0.0, 0usize);
        for iter in 0..chain.warmup + chain.iters {
            let timed = iter >= chain.warmup;
            for (ci, clip) in clips.iter().enumerate() {
                let mut prev: Option<Trajectory> = None;
                for f in 0..clip.frames.len() {
                    let r = run_frame(clip, f, prev.as_ref(), row, cfg, reward, vocab, chain.seed.wrapping_add(ci as u64))?;
                    if timed {
                        prefill.push(r.prefill);
                        decode.push(r.decode);
                        if r.lite {
                            lite_decode.push(r.decode);
                        }
                        report.raw.push(TimingSample {
                            row: name.to_string(),
                            iter: iter - chain.warmup,
                            clip: ci,
                            frame: f,
                            lite: r.lite,
                            prefill_ms: r.prefill,
                            decode_ms: r.decode,
                        });
                        // Plans are deterministic across iterations; score the first.
                        if iter == chain.warmup {
                            reward_sum += r.reward;
                            frames += 1;
                        }
                    }
                    prev = Some(r.plan);
                }
            }
        }
        let mean_reward = reward_sum / frames.max(1) as f64;
        let base = *baseline.get_or_insert(mean_reward);
        let delta = mean_reward - base;
        report.rows.push(ChainRow {
            name: name.to_string(),
            prefill: Latency::from_samples(&prefill),
            decode: Latency::from_samples(&decode),
            lite_decode: (!lite_decode.is_empty()).then(|| Latency::from_samples(&lite_decode)),
            reward: mean_reward,
            reward_delta: delta,
            within_gate: delta.abs() <= chain.quality_gate,
        });
    }
    Ok(report)
}
