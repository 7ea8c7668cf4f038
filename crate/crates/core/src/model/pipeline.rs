//! One frame through geometry, both branches, fusion, the temporal stage and
//! the head.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, LabeledFrame, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{lidar_to_camera, project_indexed, render_sparse_depth, ProjectionConfig};
use crate::model::backbones::{self, point_forward, rgb_forward, PointBranchConfig, RgbBranchConfig};
use crate::model::fusion::{
    self, fuse, fusion_weights, reliability_from_count, reliability_image, semantic_map, weights_of, FusedFeature,
    FusionConfig, ReliabilityScores, Which,
};
use crate::model::temporal::{
    self, decision_forward, recurrent_step, temporal_attention, temporal_delta, GraphState, NavOutput, TemporalConfig,
    TemporalState,
};
use crate::model::ModelState;
use crate::numeric::{rng, BufferStore, Graph, Mode, ParamRegistry, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Lidar,
    #[default]
    Both,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "lidar" => Ok(Modality::Lidar),
            "both" => Ok(Modality::Both),
            other => Err(Error::config(format!("unknown modality '{other}' (rgb|lidar|both)"))),
        }
    }
}

/// Ablation switches. An absent modality enters fusion as a zero feature with
/// reliability at the floor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_attention: bool,
    pub no_temporal: bool,
    pub modality: Modality,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub projection: ProjectionConfig,
    pub rgb: RgbBranchConfig,
    pub point: PointBranchConfig,
    pub fusion: FusionConfig,
    pub temporal: TemporalConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.projection.z_near > 0.0 && self.projection.depth_max > self.projection.z_near) {
            return Err(Error::config("projection: need 0 < z_near < depth_max"));
        }
        self.rgb.validate()?;
        self.point.validate()?;
        self.fusion.validate()?;
        self.temporal.validate()
    }
}

/// Fresh parameters (Kaiming-uniform weights, zero biases, zero gate vectors
/// and scale logits) and batch-norm statistics.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    let mut params = ParamRegistry::new();
    let mut buffers = BufferStore::new();
    backbones::register_rgb(&cfg.rgb, &mut params, &mut buffers, &mut rng)?;
    backbones::register_point(&cfg.point, &mut params, &mut rng)?;
    fusion::register(&cfg.fusion, cfg.rgb.out_dim, cfg.point.out_dim, &mut params, &mut rng)?;
    temporal::register(&cfg.temporal, cfg.fusion.fusion_dim, &mut params, &mut rng)?;
    Ok(ModelState { params, buffers })
}

/// Wall time per stage, accumulated across calls.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    /// Geometry, depth rasterization and both branches.
    pub backbones: Duration,
    /// Share of `backbones` spent in the image branch, depth maps included.
    pub rgb_branch: Duration,
    pub fusion: Duration,
    pub temporal: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.backbones + self.fusion + self.temporal
    }
}

/// Tape handles of one frame's outputs.
#[derive(Clone, Debug)]
pub struct FrameVars {
    /// `[1×5]`: waypoint then ego delta.
    pub nav: Var,
    /// `[1×fusion_dim]`.
    pub fused: Var,
    /// `[1×2]`: `(w_rgb, w_lidar)`.
    pub weights: Var,
    pub reliabilities: ReliabilityScores,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub nav: NavOutput,
    pub fused: FusedFeature<T>,
    pub state: TemporalState<T>,
    pub times: StageTimes,
}

/// Records one frame on `g`, advancing `state` in place.
#[allow(clippy::too_many_arguments)]
pub fn forward_frame<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    frame: &Frame,
    state: &mut GraphState,
    params: &ParamRegistry<T>,
    buffers: &mut BufferStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut R,
    times: &mut StageTimes,
) -> Result<FrameVars> {
    let t0 = Instant::now();
    let (w, h) = (frame.image.width, frame.image.height);
    let proj = &cfg.projection;
    let cam = lidar_to_camera(&frame.cloud, &frame.calib);
    let hits = project_indexed(&cam, &frame.calib.p, w, h, proj.z_near);
    let pixels: Vec<_> = hits.iter().map(|(_, p)| *p).collect();
    let modality = cfg.ablation.modality;
    let fdim = cfg.fusion.fusion_dim;

    let mut rel = ReliabilityScores {
        r_rgb: reliability_image(&frame.image, cfg.fusion.tau_img),
        r_lidar: reliability_from_count(hits.len(), cfg.fusion.n_ref),
    };
    let rgb_feat = if modality == Modality::Lidar {
        rel.r_rgb = fusion::RELIABILITY_FLOOR;
        None
    } else {
        let tr = Instant::now();
        let depth = cfg
            .rgb
            .input_cells()
            .into_iter()
            .map(|cell| render_sparse_depth(&pixels, w, h, cell, proj.depth_max))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let use_attention = !cfg.ablation.no_attention;
        let v = rgb_forward(g, &frame.image, &depth, &cfg.rgb, params, buffers, mode, use_attention)?.vector;
        times.rgb_branch += tr.elapsed();
        Some(v)
    };
    let lidar_feat = if modality == Modality::Rgb || hits.is_empty() {
        rel.r_lidar = fusion::RELIABILITY_FLOOR;
        None
    } else {
        let visible = PointCloud::new(hits.iter().map(|&(i, _)| cam.points[i]).collect());
        Some(point_forward(g, &visible, &cfg.point, params, rng)?.vector)
    };
    let t1 = Instant::now();
    times.backbones += t1 - t0;

    let f_rgb = match rgb_feat {
        Some(v) => semantic_map(g, params, v, Which::Rgb)?,
        None => g.constant(Tensor::zeros(&[1, fdim]))?,
    };
    let f_lidar = match lidar_feat {
        Some(v) => semantic_map(g, params, v, Which::Lidar)?,
        None => g.constant(Tensor::zeros(&[1, fdim]))?,
    };
    let weights = fusion_weights(g, params, f_rgb, f_lidar, rel, cfg.fusion.beta)?;
    let fused = fuse(g, f_rgb, f_lidar, weights)?;
    let t2 = Instant::now();
    times.fusion += t2 - t1;

    let tc = &cfg.temporal;
    let (hidden, context) = if cfg.ablation.no_temporal {
        let z = g.constant(Tensor::zeros(&[1, tc.hidden_dim]))?;
        let c = g.constant(Tensor::zeros(&[1, fdim]))?;
        (z, c)
    } else {
        let x = temporal_delta(g, fused, state.prev_fused)?;
        let hidden = recurrent_step(g, params, x, state.hidden)?;
        state.window.push_back(fused);
        while state.window.len() > tc.window {
            state.window.pop_front();
        }
        let window: Vec<Var> = state.window.iter().copied().collect();
        let context = if cfg.ablation.no_attention {
            let wv = g.param(params, "tattn.v")?;
            let mem = if window.len() == 1 { window[0] } else { g.concat_rows(&window)? };
            let vals = g.matmul(mem, wv)?;
            g.mean_rows(vals)?
        } else {
            temporal_attention(g, params, hidden, &window)?.0
        };
        state.hidden = hidden;
        state.prev_fused = Some(fused);
        (hidden, context)
    };
    let nav = decision_forward(g, params, hidden, context, fused, tc, dropout_rate, rng, mode)?;
    times.temporal += t2.elapsed();
    Ok(FrameVars {
        nav,
        fused,
        weights,
        reliabilities: rel,
    })
}

/// Runs one frame on a fresh tape and returns the outputs and the next state.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_step<T: Scalar, R: Rng + ?Sized>(
    frame: &Frame,
    state: &TemporalState<T>,
    params: &ParamRegistry<T>,
    buffers: &mut BufferStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new();
    let mut gs = state.to_graph(&mut g)?;
    let mut times = StageTimes::default();
    let out = forward_frame(&mut g, frame, &mut gs, params, buffers, cfg, mode, dropout_rate, rng, &mut times)?;
    let nav = NavOutput::from_slice(g.value(out.nav).data());
    let fused = FusedFeature {
        vector: g.value(out.fused).clone(),
        weights: weights_of(&g, out.weights),
        reliabilities: out.reliabilities,
    };
    let state = TemporalState::from_graph(&g, &gs);
    Ok(StepOutput {
        nav,
        fused,
        state,
        times,
    })
}

/// `MSE(waypoint) + MSE(ego_delta)` against the frame's labels.
pub fn frame_loss<T: Scalar>(g: &mut Graph<T>, nav: Var, lf: &LabeledFrame) -> Result<Var> {
    let wp = g.slice_cols(nav, 0, 2)?;
    let ego = g.slice_cols(nav, 2, 3)?;
    let wt = g.constant(Tensor::row(lf.waypoint.iter().map(|&x| T::of(x)).collect()))?;
    let et = g.constant(Tensor::row(lf.ego_delta.iter().map(|&x| T::of(x)).collect()))?;
    let a = g.mse(wp, wt)?;
    let b = g.mse(ego, et)?;
    g.add(a, b)
}
