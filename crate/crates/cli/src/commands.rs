//! The five subcommands. Each writes a JSONL report under its output
//! directory and returns the records plus a human summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fusenav::data::{assemble_sequences, write_sequence, LabeledFrame, Split};
use fusenav::metrics::{evaluate_run, metric_fps, StageSeconds};
use fusenav::model::{init_model, pipeline_step, Modality, ModelState, StageTimes, TemporalState};
use fusenav::numeric::{rng, AdamState, Mode, OpKind};
use fusenav::sim::{label_frames, synth_scenario, Scenario};
use fusenav::train::{train as run_training, EpochLog};
use fusenav::verify::{check_components, check_ops, CheckOutcome, SuiteOptions};
use fusenav::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.jsonl";
pub const GRADCHECK_REPORT: &str = "gradcheck_report.jsonl";
pub const BENCH_REPORT: &str = "bench_report.jsonl";

/// Command-line settings layered over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_attention: bool,
    pub no_temporal: bool,
    pub beta: Option<f64>,
    pub modality: Option<Modality>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.model.ablation.no_attention |= self.no_attention;
        cfg.model.ablation.no_temporal |= self.no_temporal;
        if let Some(beta) = self.beta {
            cfg.model.fusion.beta = beta;
        }
        if let Some(m) = self.modality {
            cfg.model.ablation.modality = m;
        }
        cfg.validate()
    }
}

/// Sequence id (two digits) to scenario tag of a synthesized tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub frames: usize,
    pub sequences: BTreeMap<String, Scenario>,
}

impl Manifest {
    /// Reads `root/manifest.json`; a tree without one is all `standard`.
    pub fn load_or_standard(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn scenario(manifest: Option<&Self>, id: u32) -> Scenario {
        manifest
            .and_then(|m| m.sequences.get(&format!("{id:02}")).copied())
            .unwrap_or(Scenario::Standard)
    }
}

/// Records written to a report file, plus the human-readable summary.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub records: Vec<Value>,
    pub summary: Vec<String>,
    /// Set when a check inside the command failed.
    pub failure: Option<String>,
}

impl Report {
    fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&r.to_string());
            text.push('\n');
        }
        write_file(path, text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ablation_json(cfg: &RunConfig) -> Value {
    let a = &cfg.model.ablation;
    json!({
        "no_attention": a.no_attention,
        "no_temporal": a.no_temporal,
        "modality": a.modality,
        "beta": cfg.model.fusion.beta,
    })
}

/// Writes one KITTI-layout sequence per configured scenario under `root`,
/// numbered from 00, and the manifest.
pub fn synth(cfg: &RunConfig, root: &Path) -> Result<Report> {
    let mut report = Report::default();
    let mut sequences = BTreeMap::new();
    for (i, &scenario) in cfg.sim.scenarios.iter().enumerate() {
        let id = i as u32;
        let frames = synth_scenario(scenario, &cfg.sim, cfg.seed)?;
        write_sequence(root, id, &frames)?;
        sequences.insert(format!("{id:02}"), scenario);
        report.records.push(json!({"record": "sequence", "id": id, "scenario": scenario, "frames": frames.len()}));
        report.summary.push(format!("sequence {id:02}: {scenario} ({} frames)", frames.len()));
    }
    let manifest = Manifest {
        seed: cfg.seed,
        frames: cfg.sim.frames,
        sequences,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    write_file(&root.join(MANIFEST), text.as_bytes())?;
    report.summary.push(format!("wrote {} sequences to {}", cfg.sim.scenarios.len(), root.display()));
    Ok(report)
}

fn load_frames(cfg: &RunConfig, split: &Split) -> Result<Vec<(u32, Vec<LabeledFrame>)>> {
    let root = &cfg.data.root;
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "data root not found")));
    }
    Ok(assemble_sequences(root, split, &cfg.data.labels)?
        .into_iter()
        .map(|s| (s.id, s.frames))
        .collect())
}

/// Trains from `resume` (or a fresh initialization) and writes the best and
/// last checkpoints and the epoch log. `on_log` sees each log line as it is
/// produced.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<Checkpoint>, mut on_log: impl FnMut(&str)) -> Result<Report> {
    let train_set: Vec<Vec<LabeledFrame>> = load_frames(cfg, &cfg.data.train_split)?
        .into_iter()
        .map(|(_, f)| f)
        .filter(|f| !f.is_empty())
        .collect();
    if train_set.is_empty() && cfg.train.total_epochs > 0 {
        return Err(Error::config(format!(
            "data.train_split {:?} has no labeled frames under {}",
            cfg.data.train_split,
            cfg.data.root.display()
        )));
    }
    let val_set: Vec<Vec<LabeledFrame>> = match &cfg.data.val_split {
        Split::Ids(ids) if ids.is_empty() => Vec::new(),
        split => load_frames(cfg, split)?.into_iter().map(|(_, f)| f).filter(|f| !f.is_empty()).collect(),
    };
    let (model, adam, start_epoch) = match resume {
        Some(ck) => {
            ck.check_shapes(cfg, Path::new("resume checkpoint"))?;
            (ck.model, ck.adam, ck.epoch)
        }
        None => (init_model::<f64>(&cfg.model, cfg.seed)?, AdamState::default(), 0),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = Report::default();
    let mut log_line = |log: &EpochLog, records: &mut Vec<Value>| {
        let mut v = serde_json::to_value(log).expect("epoch log serializes");
        v["record"] = json!("epoch");
        on_log(&v.to_string());
        records.push(v);
    };
    let mut records = Vec::new();
    let outcome = run_training(
        model,
        adam,
        &train_set,
        &val_set,
        &cfg.model,
        &cfg.train,
        &cfg.augment,
        |log| log_line(log, &mut records),
    )?;
    report.records = records;
    let best_val = outcome.best_val_loss.is_finite().then_some(outcome.best_val_loss);
    let best = Checkpoint {
        config: cfg.clone(),
        model: outcome.best,
        adam: outcome.best_adam,
        epoch: start_epoch + outcome.best_epoch.map_or(0, |e| e + 1),
        best_val_loss: best_val,
    };
    let last = Checkpoint {
        config: cfg.clone(),
        model: outcome.last,
        adam: outcome.adam,
        epoch: start_epoch + outcome.epochs_run,
        best_val_loss: best_val,
    };
    best.save(&out_dir.join(BEST_CHECKPOINT))?;
    last.save(&out_dir.join(LAST_CHECKPOINT))?;
    let stop = json!({
        "record": "stop",
        "reason": outcome.stop,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": best_val,
    });
    on_log(&stop.to_string());
    report.records.push(stop);
    report.write(&out_dir.join(TRAIN_LOG))?;
    report.summary.push(format!(
        "trained {} epochs ({:?}), best validation loss {} at epoch {}",
        outcome.epochs_run,
        outcome.stop,
        best_val.map_or("n/a".to_string(), |v| format!("{v:.6}")),
        outcome.best_epoch.map_or("n/a".to_string(), |e| e.to_string()),
    ));
    report.summary.push(format!("checkpoints: {}", out_dir.join(BEST_CHECKPOINT).display()));
    Ok(report)
}

fn model_for(cfg: &RunConfig, ckpt: Option<(&Checkpoint, &Path)>) -> Result<ModelState<f64>> {
    match ckpt {
        Some((ck, path)) => {
            ck.check_shapes(cfg, path)?;
            Ok(ck.model.clone())
        }
        None => init_model(&cfg.model, cfg.seed),
    }
}

/// Evaluates the eval split with scenario tags from the manifest.
pub fn eval(cfg: &RunConfig, ckpt: Option<(&Checkpoint, &Path)>, out_dir: &Path) -> Result<Report> {
    let manifest = Manifest::load_or_standard(&cfg.data.root)?;
    let dataset: Vec<(Scenario, Vec<LabeledFrame>)> = load_frames(cfg, &cfg.data.eval_split)?
        .into_iter()
        .filter(|(_, f)| !f.is_empty())
        .map(|(id, f)| (Manifest::scenario(manifest.as_ref(), id), f))
        .collect();
    let mut model = model_for(cfg, ckpt)?;
    let (metrics, _) = evaluate_run(&dataset, &mut model, &cfg.model, cfg.eval.na_threshold, cfg.seed)?;
    let mut report = Report::default();
    report.records.push(json!({
        "record": "metrics",
        "checkpoint": ckpt.map(|(_, p)| p.display().to_string()),
        "na": metrics.na,
        "lp": metrics.lp,
        "fps": metrics.fps,
        "ri": metrics.ri_mean,
        "ri_per_scenario": metrics.ri,
        "frames": metrics.frames,
        "na_threshold": metrics.na_threshold,
        "ablation": ablation_json(cfg),
    }));
    report.summary.push(format!(
        "NA {:.4}  LP {:.4} m  FPS {:.1}  RI {}  ({} frames)",
        metrics.na,
        metrics.lp,
        metrics.fps,
        metrics.ri_mean.map_or("n/a".to_string(), |r| format!("{r:.4}")),
        metrics.frames
    ));
    report.summary.push(format!(
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "scenario", "frames", "NA", "LP", "RI", "w_rgb", "w_lidar"
    ));
    for (name, st) in &metrics.per_scenario {
        let ri = metrics.ri.get(name).copied().flatten();
        report.records.push(json!({
            "record": "scenario",
            "scenario": name,
            "frames": st.frames,
            "na": st.na,
            "lp": st.lp,
            "ri": ri,
            "w_rgb": st.mean_weights.w_rgb,
            "w_lidar": st.mean_weights.w_lidar,
            "r_rgb": st.mean_reliabilities.r_rgb,
            "r_lidar": st.mean_reliabilities.r_lidar,
        }));
        let label = if name == Scenario::Dynamic.name() { format!("{name}*") } else { name.clone() };
        report.summary.push(format!(
            "{label:<16} {:>6} {:>8.4} {:>8.4} {:>8} {:>8.4} {:>8.4}",
            st.frames,
            st.na,
            st.lp,
            ri.map_or("-".to_string(), |r| format!("{r:.4}")),
            st.mean_weights.w_rgb,
            st.mean_weights.w_lidar
        ));
    }
    if metrics.per_scenario.contains_key(Scenario::Dynamic.name()) {
        report.summary.push("* dynamic approximates complex traffic".to_string());
    }
    report.write(&out_dir.join(EVAL_REPORT))?;
    Ok(report)
}

/// Gradient checks of every tape operation, each component and the unrolled
/// pipeline for three consecutive seeds starting at the run seed.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>, out_dir: &Path) -> Result<Report> {
    let opts = SuiteOptions {
        seeds: (cfg.seed..cfg.seed + 3).collect(),
        fault,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut outcomes = check_ops(&opts)?;
    outcomes.extend(check_components(&opts)?);
    let secs = t0.elapsed().as_secs_f64();
    let mut report = Report::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for o in &outcomes {
        let mut v = serde_json::to_value(o).expect("outcome serializes");
        v["record"] = json!("check");
        report.records.push(v);
        let w = worst.entry(o.name.as_str()).or_insert(0.0);
        *w = w.max(o.max_rel_err);
    }
    let failed: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.passed).collect();
    let max = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    report.records.push(json!({
        "record": "summary",
        "passed": failed.is_empty(),
        "checks": outcomes.len(),
        "failed": failed.iter().map(|o| format!("{} (seed {})", o.name, o.seed)).collect::<Vec<_>>(),
        "max_rel_err": max,
        "tol": opts.tol,
        "seconds": secs,
        "injected_fault": fault.map(|k| k.name()),
    }));
    for (name, err) in &worst {
        report.summary.push(format!("{name:<28} max rel err {err:.3e}"));
    }
    report.summary.push(format!(
        "{} checks over seeds {:?} in {secs:.1} s, worst {max:.3e} (tol {:e})",
        outcomes.len(),
        opts.seeds,
        opts.tol
    ));
    if !failed.is_empty() {
        let names: Vec<String> = failed
            .iter()
            .map(|o| format!("{} (seed {}, {} rel err {:.3e})", o.name, o.seed, o.worst_param, o.max_rel_err))
            .collect();
        report.failure = Some(format!("gradient check failed: {}", names.join(", ")));
    }
    report.write(&out_dir.join(GRADCHECK_REPORT))?;
    Ok(report)
}

/// Times `pipeline_step` over `bench_frames` frames of the standard preset
/// after `bench_warmup` untimed ones, cycling the sequence when it is shorter.
pub fn bench(cfg: &RunConfig, ckpt: Option<(&Checkpoint, &Path)>, out_dir: &Path) -> Result<Report> {
    let mut model = model_for(cfg, ckpt)?;
    let frames = synth_scenario(Scenario::Standard, &cfg.sim, cfg.seed)?;
    let frames = label_frames(frames, &cfg.data.labels)
        .map(|lf| lf.into_iter().map(|l| l.frame).collect::<Vec<_>>())?;
    if frames.is_empty() {
        return Err(Error::config("sim.frames too small to produce labeled frames"));
    }
    let mut r = rng::stream(cfg.seed, "bench");
    let mut state = TemporalState::new(cfg.model.temporal.hidden_dim);
    let mut times = StageTimes::default();
    let mut wall = std::time::Duration::ZERO;
    let total = cfg.eval.bench_warmup + cfg.eval.bench_frames;
    for i in 0..total {
        let k = i % frames.len();
        if k == 0 {
            state = TemporalState::new(cfg.model.temporal.hidden_dim);
        }
        let t0 = Instant::now();
        let step = pipeline_step(&frames[k], &state, &model.params, &mut model.buffers, &cfg.model, Mode::Eval, 0.0, &mut r)?;
        let dt = t0.elapsed();
        if i >= cfg.eval.bench_warmup {
            wall += dt;
            times.backbones += step.times.backbones;
            times.rgb_branch += step.times.rgb_branch;
            times.fusion += step.times.fusion;
            times.temporal += step.times.temporal;
        }
        state = step.state;
    }
    let fps = metric_fps(cfg.eval.bench_frames, wall.as_secs_f64())?;
    let stages = StageSeconds::from(times);
    let pass = fps >= cfg.eval.fps_baseline;
    let mut report = Report::default();
    report.records.push(json!({
        "record": "bench",
        "frames": cfg.eval.bench_frames,
        "warmup": cfg.eval.bench_warmup,
        "image": [cfg.sim.camera.width, cfg.sim.camera.height],
        "fps": fps,
        "total_seconds": wall.as_secs_f64(),
        "stage_seconds": stages,
        "stage_sum_seconds": times.total().as_secs_f64(),
        "fps_baseline": cfg.eval.fps_baseline,
        "pass": pass,
        "checkpoint": ckpt.map(|(_, p)| p.display().to_string()),
        "ablation": ablation_json(cfg),
    }));
    report.summary.push(format!(
        "{fps:.1} FPS over {} frames ({}; baseline {})",
        cfg.eval.bench_frames,
        if pass { "pass" } else { "below" },
        cfg.eval.fps_baseline
    ));
    let ms = |s: f64| 1e3 * s / cfg.eval.bench_frames as f64;
    report.summary.push(format!(
        "per frame: backbones {:.2} ms (image branch {:.2} ms), fusion {:.2} ms, temporal+decision {:.2} ms, total {:.2} ms",
        ms(stages.backbones),
        ms(stages.rgb_branch),
        ms(stages.fusion),
        ms(stages.temporal),
        ms(wall.as_secs_f64())
    ));
    if !pass {
        report.failure = Some(format!("throughput {fps:.1} FPS is below the {} FPS baseline", cfg.eval.fps_baseline));
    }
    report.write(&out_dir.join(BENCH_REPORT))?;
    Ok(report)
}

/// Prints the summary lines to `out`.
pub fn print_summary(report: &Report, out: &mut impl Write) -> std::io::Result<()> {
    for line in &report.summary {
        writeln!(out, "{line}")?;
    }
    Ok(())
}
