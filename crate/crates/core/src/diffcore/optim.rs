//! Bias-corrected adaptive-moment optimizer.

use super::tensor::{Element, Tensor};
use crate::error::{CrmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 2.25e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter list.
///
/// Moments start at zero; the step counter advances by exactly one per
/// successful [`adam_step`].
pub struct OptimizerState<T: Element = f32> {
    hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(hyper: AdamHyper, param_sizes: &[usize]) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    pub fn for_params(hyper: AdamHyper, params: &[Tensor<T>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(hyper, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }

    /// The training schedule rescales the learning rate between steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }
}

/// One optimizer step over aligned `(params, grads)` pairs.
///
/// Rejects the whole step without touching any state if a gradient is
/// non-finite or the lists are misaligned.
pub fn adam_step<T: Element>(
    params: &[Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CrmError::invalid(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(CrmError::invalid(format!(
                "adam_step: parameter {i} has {} elements, grad {}, state {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(CrmError::NonFinite(format!(
                "adam_step: non-finite gradient at parameter {i}, element {j} (step {})",
                state.step + 1
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let b1 = T::from_f64(h.beta1);
    let b2 = T::from_f64(h.beta2);
    let one_m_b1 = T::from_f64(1.0 - h.beta1);
    let one_m_b2 = T::from_f64(1.0 - h.beta2);
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    // Fold the bias corrections into one scalar on the step size.
    let step_size = T::from_f64(h.lr / bias1);
    let v_scale = T::from_f64(1.0 / bias2);
    let eps = T::from_f64(h.eps);

    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (j, (mj, vj)) in m.iter_mut().zip(v.iter_mut()).enumerate() {
            let gj = g[j];
            *mj = b1 * *mj + one_m_b1 * gj;
            *vj = b2 * *vj + one_m_b2 * gj * gj;
        }
        let m_ref: &[T] = m;
        let v_ref: &[T] = v;
        p.apply_update(|j, old| old - step_size * m_ref[j] / ((v_scale * v_ref[j]).sqrt() + eps));
    }
    Ok(())
}

/// [`adam_step`] reading gradients accumulated on the parameters themselves.
pub fn adam_step_from_params<T: Element>(
    params: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let grads: Vec<Vec<T>> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.grad().ok_or_else(|| {
                CrmError::invalid(format!("adam_step: parameter {i} has no gradient"))
            })
        })
        .collect::<Result<_>>()?;
    adam_step(params, &grads, state)
}
