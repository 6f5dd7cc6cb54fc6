use crate::error::{Error, Result};
use crate::netvlad::VladParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: VladParams,
    pub second_moment: VladParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &VladParams) -> Self {
        Self {
            first_moment: VladParams::zeros(params.clusters(), params.dim()),
            second_moment: VladParams::zeros(params.clusters(), params.dim()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut VladParams,
    grads: &VladParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::dim("parameter, gradient and moment shapes differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - BETA1.powi(t);
    let correction2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}
