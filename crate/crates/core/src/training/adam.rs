//! Adam with bias correction, plus global-norm gradient clipping.

use crate::tensor::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on a single parameter tensor. `t` is the
/// 1-based step count; `m` and `v` are the running first and second moments
/// for this tensor.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    debug_assert!(t >= 1);
    if param.shape() != grad.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    grad.check_finite("adam_step")?;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let (pd, gd, md, vd) = (
        param.data_mut(),
        grad.data(),
        m.data_mut(),
        v.data_mut(),
    );
    for i in 0..pd.len() {
        let g = gd[i];
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Scale all gradients uniformly so their joint Euclidean norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
