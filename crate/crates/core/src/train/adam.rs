use crate::tensor::{Real, Tensor};

use super::TrainError;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One Adam update. `params[i]` pairs with `grads[i]` and moment slot
/// `slots[i]`; parameters without a slot entry are left alone. Non-finite
/// gradients abort before anything is written.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Tensor<T>],
    slots: &[usize],
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), slots.len());
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Shape { name: name.clone(), expected: p.shape().to_vec(), got: g.shape().to_vec() });
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    // lr·m̂/(√v̂ + ε) = (lr/c1)·m / (√v/√c2 + ε)
    let step = T::of(state.lr / c1);
    let sc2 = T::of(c2.sqrt());
    let eps = T::of(state.eps);
    for (((_, p), g), &slot) in params.iter_mut().zip(grads).zip(slots) {
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            *w -= step * *mi / (vi.sqrt() / sc2 + eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
