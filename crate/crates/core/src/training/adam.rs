use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0, beta1, beta2, eps }
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, 0.9, 0.999, 1e-8)
    }
}

/// One Adam update with bias correction. Weight decay is coupled: it is
/// added to convolution-kernel gradients as `weight_decay · value` before
/// the moment update. PReLU slopes are clamped afterwards.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if opt.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            opt.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {} ({})", p.name, p.id)));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    for (p, (m, v)) in store.iter_mut().zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
        if p.role == Role::Input {
            continue;
        }
        let decay = if p.role == Role::ConvKernel { weight_decay } else { 0.0 };
        let values = p.value.data_mut();
        for (((x, &g), m), v) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g + decay * *x;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    store.clamp_alphas();
    Ok(())
}
