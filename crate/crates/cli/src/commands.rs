use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tokplan::bench::{bench_chain, ChainReport};
use tokplan::eval::{evaluate, goal_count_sweep, nms_sweep, step_sweep, summarize, EvalSummary, SceneReport, SweepPoint};
use tokplan::model::{load_checkpoint, save_checkpoint, Adam, Checkpoint, Params};
use tokplan::planner::{PipelineConfig, PlanMode};
use tokplan::rl::rl_train_loop;
use tokplan::rng::SeedTree;
use tokplan::scene::{generate_clip, generate_scene, read_corpus, write_corpus, CorpusHeader, Scene};
use tokplan::train::{prepare_scene, train_sft, PreparedScene};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot::Series;

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<(CorpusHeader, Vec<Scene>)> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_corpus(BufReader::new(f)).map_err(|e| CliError::new(e.category(), format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| CliError::new(e.category(), format!("{}: {e}", path.display())))
}

fn prepare(scenes: &[Scene], params: &Params, cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    Ok(scenes.iter().map(|s| prepare_scene(s, params, &cfg.vocab, &cfg.train)).collect::<tokplan::Result<_>>()?)
}

/// Writes `train.jsonl` and `test.jsonl` under `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.scene.validate()?;
    create_dir(out)?;
    let root = SeedTree::new(cfg.seed).child("corpus");
    let mut written = Vec::new();
    for (role, n) in [("train", cfg.data.train), ("test", cfg.data.test)] {
        let stream = root.child(role);
        let scenes = (0..n as u64).map(|i| generate_scene(stream.indexed("scene", i).seed(), &cfg.scene, &cfg.vocab)).collect::<tokplan::Result<Vec<_>>>()?;
        let header = CorpusHeader {
            split: json!({ "role": role, "train": cfg.data.train, "test": cfg.data.test }),
            config_hash: cfg.hash(),
            scene_config: serde_json::to_value(&cfg.scene)?,
            ..CorpusHeader::new(n)
        };
        let path = out.join(format!("{role}.jsonl"));
        write_corpus(create(&path)?, &header, &scenes)?;
        log::info!("wrote {n} {role} scenes to {}", path.display());
        written.push(path);
    }
    let path = out.join("run_config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Trains from scratch, or resumes from `resume`, until optimizer step
/// `until` (capped at `cfg.train.steps`, which also fixes the lr schedule).
pub fn train_sft_cmd(cfg: &RunConfig, scenes: &Path, out: &Path, resume: Option<&Path>, until: Option<usize>) -> Result<PathBuf> {
    let (_, scenes) = read_scenes(scenes)?;
    let (mut params, mut adam, parent) = match resume {
        Some(path) => {
            let ck = load(path)?;
            let parent = ck.params_hash();
            let adam = ck.adam.unwrap_or_else(|| Adam::new(ck.params.len()));
            (ck.params, adam, Some(parent))
        }
        None => {
            let params = Params::init(&cfg.model_config(), &mut SeedTree::new(cfg.seed).child("init").rng())?;
            let adam = Adam::new(params.len());
            (params, adam, None)
        }
    };
    let prepared = prepare(&scenes, &params, cfg)?;
    create_dir(out)?;
    let log_path = out.join("sft_log.jsonl");
    let mut log = create(&log_path)?;
    write_line(&mut log, &log_path, &json!({ "kind": "sft-log", "run_config_hash": cfg.hash(), "checkpoint_hash": parent }))?;
    let mut failed = None;
    train_sft(&mut params, &mut adam, &prepared, &cfg.train, &cfg.vocab, cfg.seed, until.unwrap_or(cfg.train.steps), |row| {
        log::info!("step {} loss {:.4}", row.step, row.loss.total);
        if failed.is_none() {
            failed = write_line(&mut log, &log_path, row).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let path = out.join("sft.ckpt");
    let meta = json!({ "stage": "sft", "parent": parent, "scenes": scenes.len() });
    save_checkpoint(&path, &Checkpoint { params, vocab: cfg.vocab.clone(), adam: Some(adam), config_hash: cfg.hash(), meta })?;
    Ok(path)
}

pub fn train_rl_cmd(cfg: &RunConfig, scenes: &Path, out: &Path, sft: &Path) -> Result<PathBuf> {
    let (_, scenes) = read_scenes(scenes)?;
    let ck = load(sft)?;
    let parent = ck.params_hash();
    let reference = ck.params;
    let mut params = reference.clone();
    let mut adam = Adam::new(params.len());
    let prepared = prepare(&scenes, &params, cfg)?;
    create_dir(out)?;
    let log_path = out.join("rl_log.jsonl");
    let mut log = create(&log_path)?;
    write_line(&mut log, &log_path, &json!({ "kind": "rl-log", "run_config_hash": cfg.hash(), "checkpoint_hash": parent }))?;
    let mut failed = None;
    rl_train_loop(&mut params, &mut adam, &reference, &prepared, &cfg.rl, &ck.vocab, cfg.seed, |row| {
        log::info!("epoch {} pre-edit {:.2} post-edit {:.2} kl {:.4}", row.epoch, row.pre_edit_reward, row.post_edit_reward, row.kl);
        if failed.is_none() {
            failed = write_line(&mut log, &log_path, row).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let path = out.join("rl.ckpt");
    let meta = json!({ "stage": "rl", "parent": parent, "scenes": scenes.len() });
    save_checkpoint(&path, &Checkpoint { params, vocab: ck.vocab, adam: Some(adam), config_hash: cfg.hash(), meta })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub run_config_hash: String,
    pub checkpoint_hash: String,
    /// Best-of-N run; its greedy first candidate is the single answer.
    pub summary: EvalSummary,
    /// Standard mode with no edit rounds.
    pub no_edit: EvalSummary,
    /// `summary.post_edit - no_edit.post_edit`.
    pub edit_delta: f64,
    pub step_sweep: Vec<SweepPoint>,
    pub nms_sweep: Vec<SweepPoint>,
    pub goal_sweep: Vec<SweepPoint>,
    pub scenes: Vec<SceneReport>,
}

pub fn eval_cmd(cfg: &RunConfig, scenes: &Path, out: &Path, ckpt: &Path) -> Result<EvalReport> {
    let (_, scenes) = read_scenes(scenes)?;
    let ck = load(ckpt)?;
    let (p, v) = (&ck.params, &ck.vocab);
    let reports = evaluate(&scenes, p, &cfg.pipeline, &cfg.reward, PlanMode::BestOfN, v, cfg.seed)?;
    let no_edit_cfg = PipelineConfig { edit_steps: 0, ..cfg.pipeline.clone() };
    let no_edit = summarize(&evaluate(&scenes, p, &no_edit_cfg, &cfg.reward, PlanMode::Standard, v, cfg.seed)?);
    let summary = summarize(&reports);
    let (mut steps, mut radii, mut goals) = (Vec::new(), Vec::new(), Vec::new());
    if cfg.eval.sweeps {
        let sweep_cfg = PipelineConfig { draws_per_goal: cfg.eval.sweep_draws, ..cfg.pipeline.clone() };
        steps = step_sweep(&scenes, p, &sweep_cfg, &cfg.eval.steps, &cfg.reward, v, cfg.seed)?;
        radii = nms_sweep(&scenes, p, &cfg.pipeline, &cfg.eval.nms_radii, &cfg.reward, v, cfg.seed)?;
        goals = goal_count_sweep(&scenes, p, &cfg.pipeline, &cfg.eval.goal_counts, &cfg.reward, v, cfg.seed)?;
    }
    let report = EvalReport {
        kind: "eval".into(),
        run_config_hash: cfg.hash(),
        checkpoint_hash: ck.params_hash(),
        edit_delta: summary.post_edit - no_edit.post_edit,
        summary,
        no_edit,
        step_sweep: steps,
        nms_sweep: radii,
        goal_sweep: goals,
        scenes: reports,
    };
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub kind: String,
    pub run_config_hash: String,
    pub checkpoint_hash: String,
    pub baseline_checkpoint_hash: String,
    pub chain: ChainReport,
}

pub fn bench_cmd(cfg: &RunConfig, out: &Path, ckpt: &Path, baseline: Option<&Path>) -> Result<BenchReport> {
    let expert = load(ckpt)?;
    let full = match baseline {
        Some(p) => load(p)?,
        None => expert.clone(),
    };
    let v = &expert.vocab;
    let root = SeedTree::new(cfg.seed).child("bench");
    let clips = (0..cfg.bench.clips as u64)
        .map(|c| generate_clip(root.indexed("clip", c).seed(), cfg.bench.frames, &cfg.scene, v))
        .collect::<tokplan::Result<Vec<_>>>()?;
    let chain = tokplan::bench::ChainConfig { seed: cfg.seed, ..cfg.bench.chain.clone() };
    let report = BenchReport {
        kind: "bench".into(),
        run_config_hash: cfg.hash(),
        checkpoint_hash: expert.params_hash(),
        baseline_checkpoint_hash: full.params_hash(),
        chain: bench_chain(&clips, &full.params, &expert.params, &chain, &cfg.pipeline, &cfg.reward, v)?,
    };
    create_dir(out)?;
    write_json(&out.join("bench.json"), &report)?;
    let txt = out.join("bench.txt");
    let mut w = create(&txt)?;
    write!(
        w,
        "# run_config_hash {}\n# checkpoint_hash {}\n# baseline_checkpoint_hash {}\n{}",
        report.run_config_hash,
        report.checkpoint_hash,
        report.baseline_checkpoint_hash,
        report.chain.table()
    )
    .and_then(|_| w.flush())
    .map_err(|e| CliError::io(&txt, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub series: String,
    pub source: String,
    pub rows: usize,
    pub run_config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

fn sweep_series(name: &str, points: &[SweepPoint], run: &str, ck: &str) -> Series {
    let mut s = Series::new(name, run, ck, &["single", "pre_edit", "best_of_n", "sampled_pre", "sampled_post"]);
    for p in points {
        s.push(p.value.to_string(), vec![p.single, p.pre_edit, p.best_of_n, p.sampled_pre, p.sampled_post]);
    }
    s
}

#[derive(Deserialize)]
struct Kind {
    kind: String,
}

/// Series for one report file.
pub fn report_series(path: &Path) -> Result<Vec<Series>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse = |e: serde_json::Error| CliError::new("parse", format!("{}: line {}: {e}", path.display(), e.line()));
    let kind: Kind = serde_json::from_str(&text).map_err(parse)?;
    match kind.kind.as_str() {
        "eval" => {
            let r: EvalReport = serde_json::from_str(&text).map_err(parse)?;
            let (run, ck) = (&r.run_config_hash, &r.checkpoint_hash);
            let mut out = Vec::new();
            for (name, pts) in [("steps", &r.step_sweep), ("goals", &r.goal_sweep), ("nms", &r.nms_sweep)] {
                if !pts.is_empty() {
                    out.push(sweep_series(name, pts, run, ck));
                }
            }
            Ok(out)
        }
        "bench" => {
            let r: BenchReport = serde_json::from_str(&text).map_err(parse)?;
            let mut s = Series::new(
                "chain",
                &r.run_config_hash,
                &r.checkpoint_hash,
                &["prefill_mean", "prefill_p50", "prefill_p90", "decode_mean", "decode_p50", "decode_p90", "reward", "reward_delta"],
            );
            for row in &r.chain.rows {
                s.push(
                    row.name.clone(),
                    vec![row.prefill.mean, row.prefill.p50, row.prefill.p90, row.decode.mean, row.decode.p50, row.decode.p90, row.reward, row.reward_delta],
                );
            }
            Ok(vec![s])
        }
        other => Err(CliError::new("parse", format!("{}: line 1: unknown report kind {other:?}", path.display()))),
    }
}

pub fn plot_data_cmd(reports: &[PathBuf], out: &Path) -> Result<Manifest> {
    create_dir(out)?;
    let mut manifest = Manifest::default();
    for (i, path) in reports.iter().enumerate() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        for s in report_series(path)? {
            let file = format!("{i}_{stem}_{}.tsv", s.name);
            let target = out.join(&file);
            fs::write(&target, s.to_tsv()).map_err(|e| CliError::io(&target, e))?;
            manifest.files.push(ManifestEntry {
                file,
                series: s.name.clone(),
                source: path.display().to_string(),
                rows: s.rows.len(),
                run_config_hash: s.run_config_hash.clone(),
                checkpoint_hash: s.checkpoint_hash.clone(),
            });
        }
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
