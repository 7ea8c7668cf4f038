//! Gradient-check suite over every tape operation, each model component and
//! the unrolled pipeline. Shared by the `gradcheck` command and the tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledFrame, PointCloud};
use crate::error::Result;
use crate::geometry::{lidar_to_camera, project_indexed, render_sparse_depth};
use crate::model::pipeline::forward_frame;
use crate::model::{
    decision_forward, frame_loss, fusion_weights, init_model, point_forward, recurrent_step, rgb_forward,
    temporal_attention, ModelConfig, ModelState, ReliabilityScores, StageTimes, TemporalState,
};
use crate::numeric::{grad_check, rng, ConvRounding, GradCheckOptions, Graph, Mode, OpKind, ParamRegistry, Tensor, Var};
use crate::sim::{self, CameraConfig, Scenario, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub tol: f64,
    /// Backward rule to corrupt, for exercising the failure path.
    pub fault: Option<OpKind>,
    /// Entries sampled per parameter tensor in the unrolled pipeline check.
    pub pipeline_entries: usize,
    pub pipeline_frames: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            tol: 1e-4,
            fault: None,
            pipeline_entries: 3,
            pipeline_frames: 4,
        }
    }
}

type Build = fn(&mut Graph<f64>, &ParamRegistry<f64>) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    build: Build,
}

fn p(g: &mut Graph<f64>, reg: &ParamRegistry<f64>, i: usize) -> Result<Var> {
    g.param(reg, &format!("p{i}"))
}

/// Weighted sum with fixed, distinct coefficients so each output entry
/// carries its own gradient.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect())?;
    let w = g.constant(w)?;
    let y = g.mul(y, w)?;
    g.sum(y)
}

macro_rules! unary {
    ($name:literal, $shape:expr, |$g:ident, $a:ident| $body:expr) => {
        OpCase {
            name: $name,
            shapes: &[$shape],
            build: |$g, r| {
                let $a = p($g, r, 0)?;
                let y = $body;
                project($g, y)
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $sa:expr, $sb:expr, |$g:ident, $a:ident, $b:ident| $body:expr) => {
        OpCase {
            name: $name,
            shapes: &[$sa, $sb],
            build: |$g, r| {
                let $a = p($g, r, 0)?;
                let $b = p($g, r, 1)?;
                let y = $body;
                project($g, y)
            },
        }
    };
}

fn op_cases() -> Vec<OpCase> {
    vec![
        binary!("matmul", &[2, 3], &[3, 4], |g, a, b| g.matmul(a, b)?),
        binary!("matmul_t", &[2, 3], &[4, 3], |g, a, b| g.matmul_t(a, b)?),
        binary!("add", &[2, 3], &[2, 3], |g, a, b| g.add(a, b)?),
        binary!("sub", &[2, 3], &[2, 3], |g, a, b| g.sub(a, b)?),
        binary!("mul", &[2, 3], &[2, 3], |g, a, b| g.mul(a, b)?),
        binary!("add_row", &[3, 4], &[1, 4], |g, a, b| g.add_row(a, b)?),
        unary!("scale", &[2, 3], |g, a| g.scale(a, 1.7)?),
        unary!("affine", &[2, 3], |g, a| g.affine(a, -0.5, 1.0)?),
        binary!("mul_scalar", &[2, 3], &[1, 1], |g, a, b| g.mul_scalar(a, b)?),
        unary!("relu", &[3, 3], |g, a| g.relu(a)?),
        unary!("tanh", &[2, 3], |g, a| g.tanh(a)?),
        unary!("sigmoid", &[2, 3], |g, a| g.sigmoid(a)?),
        unary!("softmax", &[2, 4], |g, a| g.softmax(a)?),
        unary!("transpose", &[2, 3], |g, a| g.transpose(a)?),
        unary!("reshape", &[2, 3], |g, a| g.reshape(a, &[3, 2])?),
        binary!("concat_cols", &[2, 3], &[2, 2], |g, a, b| g.concat_cols(&[a, b, a])?),
        binary!("concat_rows", &[2, 3], &[1, 3], |g, a, b| g.concat_rows(&[a, b])?),
        unary!("slice_cols", &[2, 5], |g, a| g.slice_cols(a, 1, 3)?),
        unary!("index", &[1, 4], |g, a| g.index(a, 2)?),
        unary!("mean_rows", &[3, 4], |g, a| g.mean_rows(a)?),
        unary!("sum", &[2, 3], |g, a| g.sum(a)?),
        binary!("mse", &[1, 3], &[1, 3], |g, a, b| g.mse(a, b)?),
        binary!("conv2d", &[2, 6, 6], &[3, 2, 3, 3], |g, a, b| g.conv2d_with(a, b, 2, 1, ConvRounding::Floor)?),
        OpCase {
            name: "batch_norm",
            shapes: &[&[5, 3], &[1, 3], &[1, 3]],
            build: |g, r| {
                let (x, ga, be) = (p(g, r, 0)?, p(g, r, 1)?, p(g, r, 2)?);
                let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
                let y = g.batch_norm(x, ga, be, &mut m, &mut v, Mode::Train)?;
                project(g, y)
            },
        },
        unary!("dropout", &[2, 5], |g, a| g.dropout(a, 0.3, &mut rng::seeded(5), Mode::Train)?),
        OpCase {
            name: "segment_softmax",
            shapes: &[&[6, 1]],
            build: |g, r| {
                let s = p(g, r, 0)?;
                let y = g.segment_softmax(s, &[0, 2, 2, 6])?;
                project(g, y)
            },
        },
        OpCase {
            name: "segment_pool",
            shapes: &[&[6, 1], &[6, 3]],
            build: |g, r| {
                let (w, x) = (p(g, r, 0)?, p(g, r, 1)?);
                let y = g.segment_pool(w, x, &[0, 2, 2, 6])?;
                project(g, y)
            },
        },
    ]
}

fn outcome(name: &str, seed: u64, rep: &crate::numeric::GradCheckReport) -> CheckOutcome {
    let worst = rep.worst();
    CheckOutcome {
        name: name.to_string(),
        seed,
        max_rel_err: rep.max_rel_err,
        worst_param: worst.map(|w| w.path.clone()).unwrap_or_default(),
        analytic: worst.map_or(0.0, |w| w.analytic),
        numeric: worst.map_or(0.0, |w| w.numeric),
        entries: rep.params.iter().map(|c| c.entries_checked).sum(),
        passed: rep.passed,
    }
}

fn inject(g: &mut Graph<f64>, fault: Option<OpKind>) {
    if let Some(k) = fault {
        g.inject_backward_fault(k);
    }
}

/// Every tape operation on small random inputs, once per seed.
pub fn check_ops(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let go = GradCheckOptions {
        tol: opts.tol,
        ..Default::default()
    };
    let mut out = Vec::new();
    for case in op_cases() {
        for &seed in &opts.seeds {
            let mut r = rng::stream(seed, case.name);
            let mut reg = ParamRegistry::new();
            for (i, s) in case.shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                reg.insert(format!("p{i}"), Tensor::new(s, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?)?;
            }
            let rep = grad_check(
                &mut reg,
                |g, params| {
                    inject(g, opts.fault);
                    (case.build)(g, params)
                },
                &go,
            )?;
            out.push(outcome(case.name, seed, &rep));
        }
    }
    Ok(out)
}

/// Adds uniform noise to every parameter so zero-initialized tensors (biases,
/// gate vectors, scale logits) do not hide gradient paths.
pub fn perturbed_model(cfg: &ModelConfig, seed: u64, scale: f64) -> Result<ModelState<f64>> {
    let mut m = init_model::<f64>(cfg, seed)?;
    let mut r = rng::stream(seed, "perturb");
    for (_, t) in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-scale..scale));
    }
    Ok(m)
}

/// A short synthetic sequence rendered at `camera` resolution.
pub fn check_frames(camera: CameraConfig, frames: usize, seed: u64) -> Result<Vec<LabeledFrame>> {
    let cfg = SimConfig {
        camera,
        frames: frames + 8,
        ..Default::default()
    };
    let mut lf = sim::label_frames(sim::synth_scenario(Scenario::Standard, &cfg, seed)?, &Default::default())?;
    lf.truncate(frames);
    Ok(lf)
}

fn small_camera() -> CameraConfig {
    CameraConfig {
        width: 16,
        height: 16,
        focal: 12.0,
        ..Default::default()
    }
}

/// The branches, the gate, the recurrent cell, the head and the unrolled
/// pipeline, once per seed.
pub fn check_components(opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let base = ModelConfig::default();
    for &seed in &opts.seeds {
        let go = GradCheckOptions {
            tol: opts.tol,
            seed,
            ..Default::default()
        };
        let small = check_frames(small_camera(), 1, seed)?.remove(0);
        let frame = &small.frame;

        // image branch on a 16×16 frame
        let model = perturbed_model(&base, seed, 0.05)?;
        let cam = lidar_to_camera(&frame.cloud, &frame.calib);
        let hits = project_indexed(&cam, &frame.calib.p, frame.image.width, frame.image.height, base.projection.z_near);
        let pixels: Vec<_> = hits.iter().map(|(_, px)| *px).collect();
        let depth = base
            .rgb
            .input_cells()
            .into_iter()
            .map(|c| render_sparse_depth(&pixels, frame.image.width, frame.image.height, c, base.projection.depth_max))
            .collect::<Result<Vec<Tensor<f64>>>>()?;
        let mut reg = model.params.clone();
        let rep = grad_check(
            &mut reg,
            |g, params| {
                inject(g, opts.fault);
                let mut buffers = model.buffers.clone();
                let f = rgb_forward(g, &frame.image, &depth, &base.rgb, params, &mut buffers, Mode::Train, true)?;
                project(g, f.vector)
            },
            &GradCheckOptions {
                max_entries_per_param: Some(24),
                ..go.clone()
            },
        )?;
        out.push(outcome("rgb_branch", seed, &rep));

        // point branch at N = 64
        let visible = PointCloud::new(hits.iter().take(64).map(|&(i, _)| cam.points[i]).collect());
        let rep = grad_check(
            &mut reg,
            |g, params| {
                inject(g, opts.fault);
                let f = point_forward(g, &visible, &base.point, params, &mut rng::seeded(seed))?;
                project(g, f.vector)
            },
            &GradCheckOptions {
                max_entries_per_param: Some(24),
                ..go.clone()
            },
        )?;
        out.push(outcome("point_branch", seed, &rep));

        // gate, recurrent cell over 3 steps with attention, head
        let f = base.fusion.fusion_dim;
        let mut r = rng::stream(seed, "inputs");
        let mut row = |n: usize| Tensor::row((0..n).map(|_| r.gen_range(-0.9..0.9)).collect::<Vec<f64>>());
        let (fa, fb) = (row(f), row(f));
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| row(2 * f)).collect();
        let rel = ReliabilityScores { r_rgb: 0.7, r_lidar: 0.3 };
        let rep = grad_check(
            &mut reg,
            |g, params| {
                inject(g, opts.fault);
                let a = g.constant(fa.clone())?;
                let b = g.constant(fb.clone())?;
                let w = fusion_weights(g, params, a, b, rel, base.fusion.beta)?;
                project(g, w)
            },
            &go,
        )?;
        out.push(outcome("fusion_gate", seed, &rep));
        let hdim = base.temporal.hidden_dim;
        let rep = grad_check(
            &mut reg,
            |g, params| {
                inject(g, opts.fault);
                let mut h = g.constant(Tensor::zeros(&[1, hdim]))?;
                let mut window = Vec::new();
                for x in &xs {
                    let xv = g.constant(x.clone())?;
                    h = recurrent_step(g, params, xv, h)?;
                    window.push(g.slice_cols(xv, 0, f)?);
                }
                let (ctx, _) = temporal_attention(g, params, h, &window)?;
                let fused = window[window.len() - 1];
                let nav = decision_forward(g, params, h, ctx, fused, &base.temporal, 0.1, &mut rng::seeded(seed), Mode::Train)?;
                project(g, nav)
            },
            &GradCheckOptions {
                max_entries_per_param: Some(48),
                ..go.clone()
            },
        )?;
        out.push(outcome("recurrent_head_3_steps", seed, &rep));

        out.push(check_pipeline(&base, seed, opts)?);
    }
    Ok(out)
}

/// The full pipeline unrolled over `pipeline_frames` frames at desk shapes in
/// train mode (batch statistics, dropout with a fixed mask), loss summed over
/// frames; a seeded sample of entries per parameter tensor.
pub fn check_pipeline(cfg: &ModelConfig, seed: u64, opts: &SuiteOptions) -> Result<CheckOutcome> {
    let frames = check_frames(CameraConfig::default(), opts.pipeline_frames, seed)?;
    let model = perturbed_model(cfg, seed, 0.05)?;
    let mut reg = model.params.clone();
    let rep = grad_check(
        &mut reg,
        |g, params| {
            inject(g, opts.fault);
            let mut buffers = model.buffers.clone();
            let mut r = rng::seeded(seed);
            let mut state = TemporalState::<f64>::new(cfg.temporal.hidden_dim).to_graph(g)?;
            let mut times = StageTimes::default();
            let mut total: Option<Var> = None;
            for lf in &frames {
                let v = forward_frame(g, &lf.frame, &mut state, params, &mut buffers, cfg, Mode::Train, 0.1, &mut r, &mut times)?;
                let l = frame_loss(g, v.nav, lf)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("at least one frame"))
        },
        // The summed loss is O(10), so a wider step keeps the difference
        // quotient's rounding error well under the tolerance.
        &GradCheckOptions {
            h: 1e-4,
            tol: opts.tol,
            seed,
            max_entries_per_param: Some(opts.pipeline_entries),
            ..Default::default()
        },
    )?;
    Ok(outcome(&format!("pipeline_{}_frames", opts.pipeline_frames), seed, &rep))
}
