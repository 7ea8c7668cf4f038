//! Navigation accuracy, localization precision, throughput, robustness index
//! and the scenario evaluation runner.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::LabeledFrame;
use crate::error::{Error, Result};
use crate::model::{pipeline_step, FusionWeights, ModelConfig, ModelState, NavOutput, ReliabilityScores, StageTimes, TemporalState};
use crate::numeric::{rng, Mode};
use crate::scalar::Scalar;
use crate::sim::Scenario;

/// Default NA threshold in meters.
pub const NA_THRESHOLD: f64 = 0.5;
/// Throughput below which a run is flagged.
pub const FPS_BASELINE: f64 = 20.0;

fn check_pair(a: usize, b: usize, what: &str) -> Result<()> {
    if a == 0 {
        return Err(Error::contract(format!("{what}: empty input")));
    }
    if a != b {
        return Err(Error::contract(format!("{what}: {a} predictions for {b} labels")));
    }
    Ok(())
}

fn dist<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of waypoints strictly closer than `threshold` to their label.
pub fn metric_na(pred: &[[f64; 2]], truth: &[[f64; 2]], threshold: f64) -> Result<f64> {
    check_pair(pred.len(), truth.len(), "metric_na")?;
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("metric_na: threshold {threshold} must be positive")));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| dist(p, t) < threshold).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean Euclidean error of the ego-motion translation.
pub fn metric_lp(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    check_pair(pred.len(), truth.len(), "metric_lp")?;
    Ok(pred.iter().zip(truth).map(|(p, t)| dist(p, t)).sum::<f64>() / pred.len() as f64)
}

pub fn metric_fps(frames: usize, wall_seconds: f64) -> Result<f64> {
    if !(wall_seconds > 0.0) {
        return Err(Error::contract(format!("metric_fps: duration {wall_seconds} s must be positive")));
    }
    Ok(frames as f64 / wall_seconds)
}

/// `na_special / na_standard`; `None` when the standard NA is zero.
pub fn metric_ri(na_special: f64, na_standard: f64) -> Option<f64> {
    (na_standard > 0.0).then(|| na_special / na_standard)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub frames: usize,
    pub na: f64,
    pub lp: f64,
    pub mean_weights: FusionWeights,
    pub mean_reliabilities: ReliabilityScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub na: f64,
    pub lp: f64,
    pub fps: f64,
    /// Mean of the per-scenario robustness indices that are defined.
    pub ri_mean: Option<f64>,
    pub ri: BTreeMap<String, Option<f64>>,
    pub per_scenario: BTreeMap<String, ScenarioStats>,
    pub frames: usize,
    pub na_threshold: f64,
}

/// Seconds spent per stage, summed over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSeconds {
    pub backbones: f64,
    pub rgb_branch: f64,
    pub fusion: f64,
    pub temporal: f64,
}

impl From<StageTimes> for StageSeconds {
    fn from(t: StageTimes) -> Self {
        Self {
            backbones: t.backbones.as_secs_f64(),
            rgb_branch: t.rgb_branch.as_secs_f64(),
            fusion: t.fusion.as_secs_f64(),
            temporal: t.temporal.as_secs_f64(),
        }
    }
}

/// Per-frame record of an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub scenario: Scenario,
    pub sequence: usize,
    pub index: usize,
    pub nav: NavOutput,
    pub waypoint_true: [f64; 2],
    pub ego_delta_true: [f64; 3],
    pub weights: FusionWeights,
    pub reliabilities: ReliabilityScores,
}

/// Runs every sequence in eval mode from a fresh state. Only the
/// `pipeline_step` calls are timed.
pub fn run_sequences<T: Scalar>(
    dataset: &[(Scenario, Vec<LabeledFrame>)],
    model: &mut ModelState<T>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Vec<FrameRecord>, Duration, StageTimes)> {
    let mut rng = rng::stream(seed, "eval");
    let mut records = Vec::new();
    let mut wall = Duration::ZERO;
    let mut times = StageTimes::default();
    for (si, (scenario, frames)) in dataset.iter().enumerate() {
        let mut state = TemporalState::new(cfg.temporal.hidden_dim);
        for lf in frames {
            let t0 = Instant::now();
            let step = pipeline_step(&lf.frame, &state, &model.params, &mut model.buffers, cfg, Mode::Eval, 0.0, &mut rng)?;
            wall += t0.elapsed();
            times.backbones += step.times.backbones;
            times.rgb_branch += step.times.rgb_branch;
            times.fusion += step.times.fusion;
            times.temporal += step.times.temporal;
            records.push(FrameRecord {
                scenario: *scenario,
                sequence: si,
                index: lf.frame.index,
                nav: step.nav,
                waypoint_true: lf.waypoint,
                ego_delta_true: lf.ego_delta,
                weights: step.fused.weights,
                reliabilities: step.fused.reliabilities,
            });
            state = step.state;
        }
    }
    Ok((records, wall, times))
}

/// Aggregates frame records into run metrics. `fps` is taken as given.
pub fn summarize(records: &[FrameRecord], na_threshold: f64, fps: f64) -> Result<RunMetrics> {
    let stats = |rs: &[&FrameRecord]| -> Result<ScenarioStats> {
        let wp: Vec<[f64; 2]> = rs.iter().map(|r| r.nav.waypoint).collect();
        let wt: Vec<[f64; 2]> = rs.iter().map(|r| r.waypoint_true).collect();
        let ep: Vec<[f64; 3]> = rs.iter().map(|r| r.nav.ego_delta).collect();
        let et: Vec<[f64; 3]> = rs.iter().map(|r| r.ego_delta_true).collect();
        let n = rs.len() as f64;
        Ok(ScenarioStats {
            frames: rs.len(),
            na: metric_na(&wp, &wt, na_threshold)?,
            lp: metric_lp(&ep, &et)?,
            mean_weights: FusionWeights {
                w_rgb: rs.iter().map(|r| r.weights.w_rgb).sum::<f64>() / n,
                w_lidar: rs.iter().map(|r| r.weights.w_lidar).sum::<f64>() / n,
            },
            mean_reliabilities: ReliabilityScores {
                r_rgb: rs.iter().map(|r| r.reliabilities.r_rgb).sum::<f64>() / n,
                r_lidar: rs.iter().map(|r| r.reliabilities.r_lidar).sum::<f64>() / n,
            },
        })
    };
    let mut per_scenario = BTreeMap::new();
    for s in Scenario::ALL {
        let rs: Vec<&FrameRecord> = records.iter().filter(|r| r.scenario == s).collect();
        if !rs.is_empty() {
            per_scenario.insert(s.name().to_string(), stats(&rs)?);
        }
    }
    let standard = per_scenario
        .get(Scenario::Standard.name())
        .ok_or_else(|| Error::config("evaluation needs at least one sequence tagged 'standard'"))?
        .na;
    let ri: BTreeMap<String, Option<f64>> = Scenario::ALL
        .into_iter()
        .filter(|s| s.is_special())
        .filter_map(|s| per_scenario.get(s.name()).map(|st| (s.name().to_string(), metric_ri(st.na, standard))))
        .collect();
    let defined: Vec<f64> = ri.values().flatten().copied().collect();
    let ri_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let all: Vec<&FrameRecord> = records.iter().collect();
    let overall = stats(&all)?;
    Ok(RunMetrics {
        na: overall.na,
        lp: overall.lp,
        fps,
        ri_mean,
        ri,
        per_scenario,
        frames: records.len(),
        na_threshold,
    })
}

/// Evaluates scenario-tagged sequences; FPS covers the `pipeline_step` calls.
pub fn evaluate_run<T: Scalar>(
    dataset: &[(Scenario, Vec<LabeledFrame>)],
    model: &mut ModelState<T>,
    cfg: &ModelConfig,
    na_threshold: f64,
    seed: u64,
) -> Result<(RunMetrics, Vec<FrameRecord>)> {
    if !dataset.iter().any(|(s, _)| *s == Scenario::Standard) {
        return Err(Error::config("evaluation needs at least one sequence tagged 'standard'"));
    }
    let (records, wall, _) = run_sequences(dataset, model, cfg, seed)?;
    let fps = metric_fps(records.len(), wall.as_secs_f64())?;
    Ok((summarize(&records, na_threshold, fps)?, records))
}
