//! Feature extraction branches: a residual CNN with a reduced-head attention
//! block for images, and a single set-abstraction point network with dynamic
//! sampling and attention pooling for clouds.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, PointCloud};
use crate::error::{Error, Result};
use crate::model::{kaiming, zeros};
use crate::numeric::{BufferStore, ConvRounding, Graph, Mode, ParamRegistry, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgbBranchConfig {
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
}

impl Default for RgbBranchConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            attn_heads: 2,
            attn_dim: 32,
            out_dim: 64,
        }
    }
}

impl RgbBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.strides.len() {
            return Err(Error::config("rgb: stage_channels and strides must be non-empty and of equal length"));
        }
        if self.stage_channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::config("rgb: channels and strides must be positive"));
        }
        if self.attn_heads == 0 || self.attn_dim == 0 || self.attn_dim % self.attn_heads != 0 {
            return Err(Error::config(format!(
                "rgb: attn_dim {} not divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.out_dim == 0 {
            return Err(Error::config("rgb: out_dim must be positive"));
        }
        Ok(())
    }

    /// Cumulative downsampling factor at the input of each stage.
    pub fn input_cells(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, &s| {
                let c = *acc;
                *acc *= s;
                Some(c)
            })
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointBranchConfig {
    pub input_budget: usize,
    pub centroids_min: usize,
    pub centroids_max: usize,
    pub radius: f64,
    pub group_cap: usize,
    pub mlp_dims: Vec<usize>,
    pub out_dim: usize,
}

impl Default for PointBranchConfig {
    fn default() -> Self {
        Self {
            input_budget: 2048,
            centroids_min: 64,
            centroids_max: 256,
            radius: 2.0,
            group_cap: 32,
            mlp_dims: vec![32, 64],
            out_dim: 64,
        }
    }
}

impl PointBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.centroids_min && self.centroids_min <= self.centroids_max && self.centroids_max <= self.input_budget)
        {
            return Err(Error::config("point: need 1 <= centroids_min <= centroids_max <= input_budget"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("point: radius must be positive"));
        }
        if self.group_cap == 0 || self.mlp_dims.is_empty() || self.mlp_dims.contains(&0) || self.out_dim == 0 {
            return Err(Error::config("point: group_cap, mlp_dims and out_dim must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.mlp_dims.last().expect("validated")
    }
}

/// Output of a branch: the `[1×out_dim]` vector and the pooled per-stage
/// summaries it was built from.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub vector: Var,
    pub per_stage: Vec<Var>,
}

/// Per-point input features: local xyz, distance to centroid, reflectance.
const POINT_FEATURES: usize = 5;

pub(crate) fn register_rgb<T: Scalar, R: Rng + ?Sized>(
    cfg: &RgbBranchConfig,
    reg: &mut ParamRegistry<T>,
    buffers: &mut BufferStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 4;
    for (s, &c) in cfg.stage_channels.iter().enumerate() {
        kaiming(reg, format!("rgb.stage{s}.conv"), &[c, c_in, 3, 3], c_in * 9, rng)?;
        kaiming(reg, format!("rgb.stage{s}.skip"), &[c, c_in, 1, 1], c_in, rng)?;
        reg.insert(format!("rgb.stage{s}.bn.gamma"), Tensor::full(&[1, c], T::one()))?;
        zeros(reg, format!("rgb.stage{s}.bn.beta"), &[1, c])?;
        let mut stats = vec![T::zero(); 2 * c];
        stats[c..].iter_mut().for_each(|v| *v = T::one());
        buffers.insert(format!("rgb.stage{s}.bn.stats"), Tensor::new(&[2, c], stats)?)?;
        kaiming(reg, format!("rgb.scale{s}.w"), &[c, cfg.out_dim], c, rng)?;
        zeros(reg, format!("rgb.scale{s}.b"), &[1, cfg.out_dim])?;
        c_in = c + 1;
    }
    let last = *cfg.stage_channels.last().expect("validated");
    let d = cfg.attn_dim;
    kaiming(reg, "rgb.tokens.w".into(), &[last, d], last, rng)?;
    register_attention(reg, "rgb.attn", d, rng)?;
    kaiming(reg, "rgb.attn_proj.w".into(), &[d, cfg.out_dim], d, rng)?;
    zeros(reg, "rgb.attn_proj.b".into(), &[1, cfg.out_dim])?;
    zeros(reg, "rgb.scale_logits".into(), &[1, cfg.stage_channels.len()])?;
    Ok(())
}

pub(crate) fn register_attention<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        kaiming(reg, format!("{prefix}.{m}"), &[d, d], d, rng)?;
    }
    Ok(())
}

pub(crate) fn register_point<T: Scalar, R: Rng + ?Sized>(
    cfg: &PointBranchConfig,
    reg: &mut ParamRegistry<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut d_in = POINT_FEATURES;
    for (i, &d) in cfg.mlp_dims.iter().enumerate() {
        kaiming(reg, format!("pts.mlp{i}.w"), &[d_in, d], d_in, rng)?;
        zeros(reg, format!("pts.mlp{i}.b"), &[1, d])?;
        d_in = d;
    }
    kaiming(reg, "pts.group_score.w".into(), &[d_in, 1], d_in, rng)?;
    kaiming(reg, "pts.global_score.w".into(), &[d_in, 1], d_in, rng)?;
    kaiming(reg, "pts.proj.w".into(), &[d_in, cfg.out_dim], d_in, rng)?;
    zeros(reg, "pts.proj.b".into(), &[1, cfg.out_dim])?;
    Ok(())
}

// ---------------------------------------------------------------- attention

#[derive(Clone, Debug)]
pub struct Attention {
    /// `[T×d]`, residual included.
    pub out: Var,
    /// One `[T×T]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention over the rows of `x: [T×d]`
/// with `{prefix}.{q,k,v,o}` maps of shape `[d×d]`, plus the residual.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Attention> {
    let d = match g.shape(x) {
        [_, d] => *d,
        s => return Err(Error::dim(format!("attention input must be Txd, got {s:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("attention: dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let wq = g.param(params, &format!("{prefix}.q"))?;
    let wk = g.param(params, &format!("{prefix}.k"))?;
    let wv = g.param(params, &format!("{prefix}.v"))?;
    let wo = g.param(params, &format!("{prefix}.o"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = g.matmul(cat, wo)?;
    let out = g.add(x, o)?;
    Ok(Attention { out, weights })
}

// ---------------------------------------------------------------- image branch

/// `[3×H×W]` RGB scaled to `[0, 1]`.
pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    let (w, h) = (image.width, image.height);
    let mut data = vec![T::zero(); 3 * w * h];
    for (i, px) in image.pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = T::of(px[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data).expect("image has positive size")
}

/// Appends a `[1×h×w]` constant as an extra channel of `x: [C×h×w]`.
fn append_channel<T: Scalar>(g: &mut Graph<T>, x: Var, extra: &Tensor<T>) -> Result<Var> {
    let (c, h, w) = match g.shape(x) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("expected CxHxW, got {s:?}"))),
    };
    if extra.shape() != [1, h, w] {
        return Err(Error::dim(format!("depth map {:?} does not match feature map {h}x{w}", extra.shape())));
    }
    let flat = g.reshape(x, &[c, h * w])?;
    let e = g.constant(extra.reshaped(&[1, h * w])?)?;
    let cat = g.concat_rows(&[flat, e])?;
    g.reshape(cat, &[c + 1, h, w])
}

/// Image branch. `depth[s]` is the sparse depth map at the input resolution of
/// stage `s` (see [`RgbBranchConfig::input_cells`]).
#[allow(clippy::too_many_arguments)]
pub fn rgb_forward<T: Scalar>(
    g: &mut Graph<T>,
    image: &Image,
    depth: &[Tensor<T>],
    cfg: &RgbBranchConfig,
    params: &ParamRegistry<T>,
    buffers: &mut BufferStore<T>,
    mode: Mode,
    use_attention: bool,
) -> Result<BranchFeatures> {
    let stages = cfg.stage_channels.len();
    let total = cfg.total_stride();
    if image.width % total != 0 || image.height % total != 0 {
        return Err(Error::dim(format!(
            "image {}x{} not divisible by total stride {total}",
            image.width, image.height
        )));
    }
    if depth.len() != stages {
        return Err(Error::dim(format!("{} depth maps for {stages} stages", depth.len())));
    }
    let rgb = g.constant(image_tensor(image))?;
    let mut x = append_channel(g, rgb, &depth[0])?;
    let mut summaries = Vec::with_capacity(stages);
    let mut last = x;
    for s in 0..stages {
        if s > 0 {
            x = append_channel(g, x, &depth[s])?;
        }
        let stride = cfg.strides[s];
        let k = g.param(params, &format!("rgb.stage{s}.conv"))?;
        let y = g.conv2d_with(x, k, stride, 1, ConvRounding::Floor)?;
        let sk = g.param(params, &format!("rgb.stage{s}.skip"))?;
        let short = g.conv2d_with(x, sk, stride, 0, ConvRounding::Floor)?;
        let (c, oh, ow) = match g.shape(y) {
            [c, h, w] => (*c, *h, *w),
            _ => unreachable!("conv output is 3-d"),
        };
        // channels-last so batch norm normalizes each channel over space
        let yf = g.reshape(y, &[c, oh * ow])?;
        let yt = g.transpose(yf)?;
        let gamma = g.param(params, &format!("rgb.stage{s}.bn.gamma"))?;
        let beta = g.param(params, &format!("rgb.stage{s}.bn.beta"))?;
        let stats = buffers.get_mut(&format!("rgb.stage{s}.bn.stats"))?;
        let (rm, rv) = stats.data_mut().split_at_mut(c);
        let bn = g.batch_norm(yt, gamma, beta, rm, rv, mode)?;
        let sf = g.reshape(short, &[c, oh * ow])?;
        let st = g.transpose(sf)?;
        let sum = g.add(bn, st)?;
        let z = g.relu(sum)?;
        summaries.push(g.mean_rows(z)?);
        last = z;
        let back = g.transpose(z)?;
        x = g.reshape(back, &[c, oh, ow])?;
    }

    let wt = g.param(params, "rgb.tokens.w")?;
    let tokens = g.matmul(last, wt)?;
    let attended = if use_attention {
        attention_block(g, params, "rgb.attn", tokens, cfg.attn_heads)?.out
    } else {
        tokens
    };
    let pooled = g.mean_rows(attended)?;
    let wp = g.param(params, "rgb.attn_proj.w")?;
    let bp = g.param(params, "rgb.attn_proj.b")?;
    let mut vector = g.linear(pooled, wp, Some(bp))?;

    let lam = g.param(params, "rgb.scale_logits")?;
    let mix = g.softmax(lam)?;
    for (s, &summary) in summaries.iter().enumerate() {
        let w = g.param(params, &format!("rgb.scale{s}.w"))?;
        let b = g.param(params, &format!("rgb.scale{s}.b"))?;
        let proj = g.linear(summary, w, Some(b))?;
        let ms = g.index(mix, s)?;
        let term = g.mul_scalar(proj, ms)?;
        vector = g.add(vector, term)?;
    }
    Ok(BranchFeatures {
        vector,
        per_stage: summaries,
    })
}

// ---------------------------------------------------------------- point branch

/// Number of centroids from cloud density and geometric complexity
/// (`1 − λ_min/λ_max` of the xyz covariance).
pub fn dynamic_sample_count(cloud: &PointCloud, cfg: &PointBranchConfig) -> Result<usize> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::contract("dynamic_sample_count: empty cloud"));
    }
    let rho = (n as f64 / cfg.input_budget as f64).clamp(0.0, 1.0);
    let kappa = complexity(cloud);
    let span = (cfg.centroids_max - cfg.centroids_min) as f64;
    let raw = (cfg.centroids_min as f64 + span * (0.5 * rho + 0.5 * kappa)).round() as usize;
    Ok(raw.max(cfg.centroids_min).min(cfg.centroids_max.min(n)))
}

fn complexity(cloud: &PointCloud) -> f64 {
    let n = cloud.len();
    if n <= 3 {
        return 0.0;
    }
    let mut mean = [0.0; 3];
    for p in &cloud.points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    if max <= 0.0 {
        return 0.0;
    }
    (1.0 - eig.min().max(0.0) / max).clamp(0.0, 1.0)
}

fn dist2(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest-point sampling from `start`; ties go to the lowest index.
pub fn fps_sample(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("fps_sample: k = {k} outside 1..={n}")));
    }
    if start >= n {
        return Err(Error::contract(format!("fps_sample: start {start} outside cloud of {n}")));
    }
    let pts = &cloud.points;
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(k);
    let mut cur = start;
    loop {
        chosen.push(cur);
        min_d[cur] = -1.0;
        if chosen.len() == k {
            break;
        }
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Members of the ball around each centroid, nearest first (ties by index),
/// at most `cap`. Returns the flattened member list and segment offsets.
pub fn ball_query(cloud: &PointCloud, centroids: &[usize], radius: f64, cap: usize) -> (Vec<usize>, Vec<usize>) {
    let r2 = radius * radius;
    let mut members = Vec::new();
    let mut offsets = Vec::with_capacity(centroids.len() + 1);
    offsets.push(0);
    let mut ball: Vec<(f64, usize)> = Vec::new();
    for &c in centroids {
        let cp = cloud.points[c];
        ball.clear();
        ball.extend(
            cloud
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| (dist2(p, &cp), i))
                .filter(|(d, _)| *d <= r2),
        );
        if ball.len() > cap {
            ball.select_nth_unstable_by(cap - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ball.truncate(cap);
        }
        ball.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        members.extend(ball.iter().map(|&(_, i)| i));
        offsets.push(members.len());
    }
    (members, offsets)
}

/// Encodes explicit member groups: `offsets` delimits `members` per centroid.
pub fn encode_groups<T: Scalar>(
    g: &mut Graph<T>,
    cloud: &PointCloud,
    centroids: &[usize],
    members: &[usize],
    offsets: &[usize],
    params: &ParamRegistry<T>,
    mlp_layers: usize,
) -> Result<Var> {
    if offsets.len() != centroids.len() + 1 {
        return Err(Error::dim("encode_groups: offsets do not match centroids"));
    }
    let feat_dim = {
        let w = params.get(&format!("pts.mlp{}.w", mlp_layers - 1))?;
        w.shape()[1]
    };
    if members.is_empty() {
        return g.constant(Tensor::zeros(&[centroids.len(), feat_dim]));
    }
    let mut rows = Vec::with_capacity(members.len() * POINT_FEATURES);
    for (ci, seg) in offsets.windows(2).enumerate() {
        let c = cloud.points[centroids[ci]];
        for &m in &members[seg[0]..seg[1]] {
            let p = cloud.points[m];
            let l = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let d = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
            rows.extend([l[0], l[1], l[2], d, p[3]].map(T::of));
        }
    }
    let mut h = g.constant(Tensor::new(&[members.len(), POINT_FEATURES], rows)?)?;
    for i in 0..mlp_layers {
        let w = g.param(params, &format!("pts.mlp{i}.w"))?;
        let b = g.param(params, &format!("pts.mlp{i}.b"))?;
        let lin = g.linear(h, w, Some(b))?;
        h = g.relu(lin)?;
    }
    let ws = g.param(params, "pts.group_score.w")?;
    let scores = g.matmul(h, ws)?;
    let alpha = g.segment_softmax(scores, offsets)?;
    g.segment_pool(alpha, h, offsets)
}

/// Ball query around each centroid, shared MLP over
/// `(local xyz, distance, reflectance)`, and softmax attention pooling per
/// group. Returns `[M×mlp_out]`.
pub fn group_and_encode<T: Scalar>(
    g: &mut Graph<T>,
    cloud: &PointCloud,
    centroids: &[usize],
    cfg: &PointBranchConfig,
    params: &ParamRegistry<T>,
) -> Result<Var> {
    if let Some(&bad) = centroids.iter().find(|&&c| c >= cloud.len()) {
        return Err(Error::contract(format!("centroid index {bad} outside cloud of {}", cloud.len())));
    }
    let (members, offsets) = ball_query(cloud, centroids, cfg.radius, cfg.group_cap);
    encode_groups(g, cloud, centroids, &members, &offsets, params, cfg.mlp_dims.len())
}

/// Random subsample (order kept) or cyclic padding to exactly `budget` points.
pub fn fit_to_budget<R: Rng + ?Sized>(cloud: &PointCloud, budget: usize, rng: &mut R) -> PointCloud {
    let n = cloud.len();
    if n == budget {
        return cloud.clone();
    }
    if n > budget {
        let mut idx = rand::seq::index::sample(rng, n, budget).into_vec();
        idx.sort_unstable();
        PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect())
    } else {
        PointCloud::new((0..budget).map(|i| cloud.points[i % n]).collect())
    }
}

/// Point branch on a camera-frame cloud.
pub fn point_forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    cloud_cam: &PointCloud,
    cfg: &PointBranchConfig,
    params: &ParamRegistry<T>,
    rng: &mut R,
) -> Result<BranchFeatures> {
    if cloud_cam.is_empty() {
        return Err(Error::contract("point_forward: empty cloud"));
    }
    let k = dynamic_sample_count(cloud_cam, cfg)?;
    let fitted = fit_to_budget(cloud_cam, cfg.input_budget, rng);
    let centroids = fps_sample(&fitted, k, 0)?;
    let groups = group_and_encode(g, &fitted, &centroids, cfg, params)?;
    let ws = g.param(params, "pts.global_score.w")?;
    let scores = g.matmul(groups, ws)?;
    let offsets = [0, centroids.len()];
    let alpha = g.segment_softmax(scores, &offsets)?;
    let pooled = g.segment_pool(alpha, groups, &offsets)?;
    let wp = g.param(params, "pts.proj.w")?;
    let bp = g.param(params, "pts.proj.b")?;
    let vector = g.linear(pooled, wp, Some(bp))?;
    Ok(BranchFeatures {
        vector,
        per_stage: vec![pooled],
    })
}
