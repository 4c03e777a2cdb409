use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// `base_lr · (1 − iter/max_iters)^power`, and zero from `max_iters` on.
pub fn poly_lr(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.max_iters {
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.power)
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParameterStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update. `grads[i]` belongs to the i-th parameter of the store.
///
/// Weight decay scales each weight by `1 − lr·wd` before the Adam step, and
/// the bias corrections are folded into the step size so `eps` is added to
/// the uncorrected `√v`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("adamw_step: no gradient for `{}`", params.name(id))))?;
        if g.shape() != params.get(id).shape() {
            return Err(Error::Contract(format!(
                "adamw_step: gradient for `{}` has shape {:?}, parameter has {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = cfg.betas;
    let step_size = T::from_f64(lr * (1.0 - b2.powf(t)).sqrt() / (1.0 - b1.powf(t)));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let (b1, b2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(cfg.eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);

    for (i, (&id, g)) in ids.iter().zip(grads).enumerate() {
        let g = g.as_ref().expect("checked above").data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            p[j] = p[j] * decay - step_size * m[j] / (v[j].sqrt() + eps);
        }
    }
    Ok(())
}
