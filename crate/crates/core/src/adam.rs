//! Adam with bias correction, applied by the server to the shared parameters.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update of `params` at step `t` (1-based).
pub fn adam_update(
    params: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    t: u64,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grad.len() || moments.m.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Moments for several parameter groups that share one step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub groups: Vec<Moments>,
}

impl AdamState {
    pub fn new(group_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            groups: group_sizes.iter().map(|&n| Moments::zeros(n)).collect(),
        }
    }

    /// Advances the step counter once and updates every group.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        learning_rate: f64,
    ) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(Error::DimensionMismatch {
                expected: self.groups.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        for ((p, g), moments) in params.iter_mut().zip(grads).zip(self.groups.iter_mut()) {
            adam_update(p, g, moments, self.step, learning_rate)?;
        }
        Ok(())
    }
}
