//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    /// DCGAN-convention defaults used for all GAN parameter groups.
    pub const GAN: AdamHyper = AdamHyper {
        lr: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };
    /// Classifier pretraining defaults.
    pub const CLASSIFIER: AdamHyper = AdamHyper {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: a zero schedule is a valid no-op run.
        let ok = self.lr >= 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain {
                op: "adam",
                detail: format!("invalid hyperparameters {:?}", self),
            })
        }
    }
}

/// Per-parameter Adam state: first/second moments shaped like the
/// parameter, plus the shared step count and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shape: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update in f64 arithmetic, written back to `S`.
pub fn adam_step<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    if grad.shape() != param.shape() || state.m.shape() != param.shape() {
        return Err(Error::shape(
            "adam",
            format!(
                "param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    state.hyper.validate()?;
    state.t += 1;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..param.numel() {
        let g = grad.data()[i].as_f64();
        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
        m[i] = S::of_f64(mi);
        v[i] = S::of_f64(vi);
        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        let p = param.data()[i].as_f64() - update;
        param.data_mut()[i] = S::of_f64(p);
    }
    Ok(())
}
