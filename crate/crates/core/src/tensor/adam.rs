use std::collections::BTreeMap;

use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Moments are keyed by parameter name, so the update does not depend on
/// the order parameters are presented in.
#[derive(Clone, Debug)]
pub struct AdamState<T = f64> {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        assert!(
            config.beta1 > 0.0 && config.beta1 < 1.0 && config.beta2 > 0.0 && config.beta2 < 1.0,
            "Adam betas must lie in (0, 1)"
        );
        AdamState {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(name)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// Gradients are validated before anything is touched; a non-finite entry
/// leaves parameters and state unchanged.
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TensorError::NonFinite { name: name.clone() });
        }
    }
    let params: Vec<_> = params.into_iter().collect();
    for (name, p) in &params {
        if let Some(g) = grads.get(*name) {
            if g.shape() != p.shape() {
                return Err(TensorError::contract(
                    "adam_step",
                    format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
    }

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));

    for (name, p) in params {
        let Some(g) = grads.get(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
