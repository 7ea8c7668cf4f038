//! Frame-difference features, the GRU cell, attention over the recent fused
//! features, and the waypoint / ego-motion head.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{kaiming, zeros};
use crate::numeric::{Graph, Mode, ParamRegistry, Tensor, Var};
use crate::scalar::Scalar;

/// Number of head outputs: waypoint (2) then ego delta (3).
pub const NAV_OUTPUTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub hidden_dim: usize,
    /// Fused features kept for temporal attention.
    pub window: usize,
    pub head_hidden: usize,
    /// Output clamp of each ego-delta component.
    pub max_step: f64,
    /// Output clamp of each waypoint component.
    pub waypoint_range: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            window: 4,
            head_hidden: 64,
            max_step: 5.0,
            waypoint_range: 10.0,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.window == 0 || self.head_hidden == 0 {
            return Err(Error::config("temporal: hidden_dim, window and head_hidden must be positive"));
        }
        if !(self.max_step > 0.0 && self.waypoint_range > 0.0) {
            return Err(Error::config("temporal: max_step and waypoint_range must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavOutput {
    /// `(forward, lateral)` meters.
    pub waypoint: [f64; 2],
    pub ego_delta: [f64; 3],
}

impl NavOutput {
    pub fn from_slice<T: Scalar>(v: &[T]) -> Self {
        Self {
            waypoint: [v[0].as_f64(), v[1].as_f64()],
            ego_delta: [v[2].as_f64(), v[3].as_f64(), v[4].as_f64()],
        }
    }
}

/// Recurrent state carried between frames of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalState<T> {
    /// `[1×hidden_dim]`.
    pub hidden: Tensor<T>,
    /// Most recent fused vectors, oldest first.
    pub window: VecDeque<Tensor<T>>,
    pub prev_fused: Option<Tensor<T>>,
}

impl<T: Scalar> TemporalState<T> {
    pub fn new(hidden_dim: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[1, hidden_dim]),
            window: VecDeque::new(),
            prev_fused: None,
        }
    }

    /// Lifts the state onto a tape as constants.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Result<GraphState> {
        Ok(GraphState {
            hidden: g.constant(self.hidden.clone())?,
            window: self
                .window
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?,
            prev_fused: self.prev_fused.clone().map(|t| g.constant(t)).transpose()?,
        })
    }

    pub fn from_graph(g: &Graph<T>, s: &GraphState) -> Self {
        Self {
            hidden: g.value(s.hidden).clone(),
            window: s.window.iter().map(|&v| g.value(v).clone()).collect(),
            prev_fused: s.prev_fused.map(|v| g.value(v).clone()),
        }
    }
}

/// The same state as tape nodes, so gradients flow across unrolled frames.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub hidden: Var,
    pub window: VecDeque<Var>,
    pub prev_fused: Option<Var>,
}

pub(crate) fn register<T: Scalar, R: Rng + ?Sized>(
    cfg: &TemporalConfig,
    fusion_dim: usize,
    reg: &mut ParamRegistry<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let (x, h, f) = (2 * fusion_dim, cfg.hidden_dim, fusion_dim);
    for gate in ["z", "r", "h"] {
        kaiming(reg, format!("gru.w_{gate}"), &[x, h], x, rng)?;
        kaiming(reg, format!("gru.u_{gate}"), &[h, h], h, rng)?;
        zeros(reg, format!("gru.b_{gate}"), &[1, h])?;
    }
    kaiming(reg, "tattn.q".into(), &[h, f], h, rng)?;
    kaiming(reg, "tattn.k".into(), &[f, f], f, rng)?;
    kaiming(reg, "tattn.v".into(), &[f, f], f, rng)?;
    let d_in = h + 2 * f;
    kaiming(reg, "head.l1.w".into(), &[d_in, cfg.head_hidden], d_in, rng)?;
    zeros(reg, "head.l1.b".into(), &[1, cfg.head_hidden])?;
    kaiming(reg, "head.l2.w".into(), &[cfg.head_hidden, NAV_OUTPUTS], cfg.head_hidden, rng)?;
    zeros(reg, "head.l2.b".into(), &[1, NAV_OUTPUTS])?;
    Ok(())
}

/// `[fused ‖ fused − prev]`, with a zero difference when there is no `prev`.
pub fn temporal_delta<T: Scalar>(g: &mut Graph<T>, fused: Var, prev: Option<Var>) -> Result<Var> {
    let diff = match prev {
        Some(p) => g.sub(fused, p)?,
        None => g.constant(Tensor::zeros(g.shape(fused)))?,
    };
    g.concat_cols(&[fused, diff])
}

/// GRU update of `h: [1×hidden]` from input `x`.
pub fn recurrent_step<T: Scalar>(g: &mut Graph<T>, params: &ParamRegistry<T>, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph<T>, name: &str, hin: Var, act: fn(&mut Graph<T>, Var) -> Result<Var>| -> Result<Var> {
        let w = g.param(params, &format!("gru.w_{name}"))?;
        let u = g.param(params, &format!("gru.u_{name}"))?;
        let b = g.param(params, &format!("gru.b_{name}"))?;
        let a = g.matmul(x, w)?;
        let c = g.matmul(hin, u)?;
        let s = g.add(a, c)?;
        let s = g.add_row(s, b)?;
        act(g, s)
    };
    let z = gate(g, "z", h, Graph::sigmoid)?;
    let r = gate(g, "r", h, Graph::sigmoid)?;
    let rh = g.mul(r, h)?;
    let cand = gate(g, "h", rh, Graph::tanh)?;
    // (1 − z)⊙h + z⊙h̃ = h + z⊙(h̃ − h)
    let d = g.sub(cand, h)?;
    let zd = g.mul(z, d)?;
    g.add(h, zd)
}

/// Scaled dot-product attention of the query `Q h` over the window entries.
/// Returns the context `[1×fusion_dim]` and the weights `[1×n]`.
pub fn temporal_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamRegistry<T>,
    h: Var,
    window: &[Var],
) -> Result<(Var, Var)> {
    if window.is_empty() {
        return Err(Error::contract("temporal_attention: empty window"));
    }
    let wq = g.param(params, "tattn.q")?;
    let wk = g.param(params, "tattn.k")?;
    let wv = g.param(params, "tattn.v")?;
    let mem = if window.len() == 1 { window[0] } else { g.concat_rows(window)? };
    let q = g.matmul(h, wq)?;
    let k = g.matmul(mem, wk)?;
    let v = g.matmul(mem, wv)?;
    let d = g.shape(k)[1];
    let s = g.matmul_t(q, k)?;
    let s = g.scale(s, T::one() / T::of(d as f64).sqrt())?;
    let alpha = g.softmax(s)?;
    let out = g.matmul(alpha, v)?;
    Ok((out, alpha))
}

/// Two-layer head on `[h ‖ context ‖ fused]`; outputs pass through the soft
/// clamp `bound · tanh(x / bound)` (unit slope at 0) with the waypoint and
/// ego-delta bounds. Returns `[1×5]`.
#[allow(clippy::too_many_arguments)]
pub fn decision_forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    params: &ParamRegistry<T>,
    h: Var,
    context: Var,
    fused: Var,
    cfg: &TemporalConfig,
    dropout_rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<Var> {
    let x = g.concat_cols(&[h, context, fused])?;
    let w1 = g.param(params, "head.l1.w")?;
    let b1 = g.param(params, "head.l1.b")?;
    let a = g.linear(x, w1, Some(b1))?;
    let a = g.relu(a)?;
    let a = g.dropout(a, dropout_rate, rng, mode)?;
    let w2 = g.param(params, "head.l2.w")?;
    let b2 = g.param(params, "head.l2.b")?;
    let raw = g.linear(a, w2, Some(b2))?;
    let (wr, ms) = (T::of(cfg.waypoint_range), T::of(cfg.max_step));
    let inv = g.constant(Tensor::row(vec![T::one() / wr, T::one() / wr, T::one() / ms, T::one() / ms, T::one() / ms]))?;
    let bounds = g.constant(Tensor::row(vec![wr, wr, ms, ms, ms]))?;
    let scaled = g.mul(raw, inv)?;
    let t = g.tanh(scaled)?;
    g.mul(t, bounds)
}
