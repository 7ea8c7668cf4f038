//! Central-difference verification of the tape's backward rules.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::numeric::{rng, Graph, ParamRegistry, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that two gradients that are
    /// both ~0 compare by absolute difference.
    pub floor: f64,
    /// Check a seeded random subset of at most this many entries per tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<T, F>(f: &mut F, params: &ParamRegistry<T>) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamRegistry<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if g.value(loss).len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(g.scalar(loss).as_f64())
}

/// Compares the tape gradient of `f` with central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every (or a sampled subset of) parameter entry.
///
/// Where the relative error exceeds `tol` the difference is recomputed with
/// `h / 10` and then `h / 100`, keeping the smallest error; this separates ReLU
/// kinks crossed by the wider stencil from genuinely wrong backward rules.
pub fn grad_check<T, F>(params: &mut ParamRegistry<T>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamRegistry<T>) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::config(format!("finite-difference step {} must be positive", opts.h)));
    }
    let f0 = evaluate(&mut f, params)?;
    let f1 = evaluate(&mut f, params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic ({f0} vs {f1}); disable dropout and sampling"
        )));
    }

    for (_, p) in params.iter_mut() {
        p.clear_grad();
    }
    params.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss, params)?;
    }
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().expect("zeroed above").iter().map(|x| x.as_f64()).collect())
        .collect();

    let mut pick = rng::stream(opts.seed, "grad_check");
    let mut report = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut pick, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            path: params.by_index(pi).0.to_string(),
            entries_checked: entries.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &e in &entries {
            let a = grads[e];
            let mut best: Option<(f64, f64)> = None;
            for h in [opts.h, opts.h / 10.0, opts.h / 100.0] {
                let num = central_difference(&mut f, params, pi, e, h)?;
                let err = relative_error(a, num, opts.floor);
                if best.map_or(true, |(b, _)| err < b) {
                    best = Some((err, num));
                }
                if err <= opts.tol {
                    break;
                }
            }
            let (err, num) = best.expect("at least one step");
            if err > check.max_rel_err || (check.max_rel_err == 0.0 && e == entries[0]) {
                check.max_rel_err = err;
                check.worst_index = e;
                check.analytic = a;
                check.numeric = num;
            }
        }
        report.push(check);
    }
    let max = report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_err: max,
        tol: opts.tol,
        passed: max <= opts.tol,
    })
}

fn central_difference<T, F>(f: &mut F, params: &mut ParamRegistry<T>, pi: usize, e: usize, h: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamRegistry<T>) -> Result<Var>,
{
    let orig = params.by_index(pi).1.data()[e];
    let set = |params: &mut ParamRegistry<T>, x: T| params.by_index_mut(pi).1.data_mut()[e] = x;
    let hh = T::of(h);
    set(params, orig + hh);
    let fp = evaluate(f, params);
    set(params, orig - hh);
    let fm = evaluate(f, params);
    set(params, orig);
    // the effective step after rounding θ ± h
    let step = ((orig + hh) - (orig - hh)).as_f64();
    Ok((fp? - fm?) / step)
}
