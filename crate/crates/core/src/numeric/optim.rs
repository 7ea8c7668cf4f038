use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numeric::ParamRegistry;
use crate::scalar::Scalar;

/// First/second moment buffers for Adam, keyed like the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update with bias correction and coupled L2 weight decay
/// (`g <- g + wd * theta`); zeroes the gradients afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut ParamRegistry<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::contract(format!("negative learning rate {lr}")));
    }
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::contract(format!("parameter '{name}' has no gradient")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, wd, eps) = (T::of(lr), T::of(weight_decay), T::of(state.eps));
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        if m.len() != n || v.len() != n {
            return Err(Error::contract(format!("optimizer state for '{name}' has the wrong length")));
        }
        let grad = p.grad().expect("checked above").to_vec();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i] + wd * *theta;
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *theta -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Global L2 norm over every gradient; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(params: &mut ParamRegistry<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::config(format!("clip norm {max_norm} must be positive")));
    }
    let mut sq = 0.0f64;
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            for &x in g {
                if !x.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in '{name}'")));
                }
                sq += x.as_f64() * x.as_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn single(theta: f64, grad: f64) -> ParamRegistry<f64> {
        let mut reg = ParamRegistry::new();
        let mut t = Tensor::scalar(theta);
        t.ensure_grad()[0] = grad;
        reg.insert("theta", t).unwrap();
        reg
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 on the first step, so the update is lr / (1 + eps).
        let mut reg = single(1.0, 1.0);
        let mut st = AdamState::default();
        adam_step(&mut reg, &mut st, 0.1, 0.0).unwrap();
        let theta = reg.get("theta").unwrap().data()[0];
        assert!((theta - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
        assert_eq!(reg.get("theta").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut reg = single(1.0, 0.0);
        let mut st = AdamState::default();
        adam_step(&mut reg, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(reg.get("theta").unwrap().data()[0], 1.0);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut reg = single(1.0, 0.0);
        let mut st = AdamState::default();
        adam_step(&mut reg, &mut st, 0.1, 1e-4).unwrap();
        assert!(reg.get("theta").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("w", Tensor::zeros(&[2])).unwrap();
        let err = adam_step(&mut reg, &mut AdamState::default(), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("'w'"));
    }

    #[test]
    fn clipping_examples() {
        let mut reg = ParamRegistry::<f64>::new();
        let mut t = Tensor::row(vec![0.0, 0.0]);
        t.ensure_grad().copy_from_slice(&[30.0, 40.0]);
        reg.insert("g", t).unwrap();
        assert_eq!(clip_global_norm(&mut reg, 10.0).unwrap(), 50.0);
        let g = reg.get("g").unwrap().grad().unwrap();
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);

        let mut reg = ParamRegistry::<f64>::new();
        let mut t = Tensor::row(vec![0.0, 0.0]);
        t.ensure_grad().copy_from_slice(&[3.0, 4.0]);
        reg.insert("g", t).unwrap();
        assert_eq!(clip_global_norm(&mut reg, 10.0).unwrap(), 5.0);
        assert_eq!(reg.get("g").unwrap().grad().unwrap(), &[3.0, 4.0]);

        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("z", Tensor::zeros(&[3])).unwrap();
        reg.zero_grads();
        assert_eq!(clip_global_norm(&mut reg, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn clipping_rejects_nan() {
        let mut reg = ParamRegistry::<f64>::new();
        let mut t = Tensor::scalar(0.0);
        t.ensure_grad()[0] = f64::NAN;
        reg.insert("bad", t).unwrap();
        assert!(matches!(clip_global_norm(&mut reg, 1.0), Err(Error::Numeric(_))));
    }
}
