//! Softmax cross entropy and the Jacobian-regularized surrogate losses.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::attacks::Geometry;
use crate::error::{Error, Result};
use crate::jacobian::{Jacobian, PenaltyNorm};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Vector};

/// Lipschitz constant of cross entropy in its logits, ℓ2 metric.
pub const LIP_L2: f64 = SQRT_2;
/// Lipschitz constant of cross entropy in its logits, ℓ1 metric.
pub const LIP_LINF: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad_logits: Vector<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzProbe<T> {
    pub l2: T,
    pub linf: T,
}

/// Penalty configuration shared by the surrogate losses and the trainer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Attack radius ε the penalty is matched to.
    pub epsilon: f64,
    /// Penalty weight λ.
    pub lambda: f64,
    pub norm: PenaltyNorm,
    pub lip_l2: f64,
    pub lip_linf: f64,
}

impl RegConfig {
    pub fn new(norm: PenaltyNorm, epsilon: f64, lambda: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && lambda >= 0.0) {
            return Err(Error::Domain(format!(
                "epsilon ({epsilon}) and lambda ({lambda}) must be nonnegative"
            )));
        }
        Ok(RegConfig {
            epsilon,
            lambda,
            norm,
            lip_l2: LIP_L2,
            lip_linf: LIP_LINF,
        })
    }

    /// Builds the config from the effective strength `λ̃ = λε`.
    pub fn from_effective(norm: PenaltyNorm, epsilon: f64, effective_lambda: f64) -> Result<Self> {
        if effective_lambda == 0.0 {
            return Self::new(norm, epsilon, 0.0);
        }
        if epsilon <= 0.0 {
            return Err(Error::Domain(
                "a nonzero effective lambda needs a positive epsilon".into(),
            ));
        }
        Self::new(norm, epsilon, effective_lambda / epsilon)
    }

    pub fn unregularized(norm: PenaltyNorm) -> Self {
        Self::new(norm, 0.0, 0.0).expect("zero config is valid")
    }

    /// `λ̃ = λε`.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda * self.epsilon
    }

    /// Multiplier of the Jacobian norm: `½λεL²_{ℓ2}` or `λεL_{ℓ∞}`.
    pub fn penalty_weight(&self) -> f64 {
        match self.norm {
            PenaltyNorm::FrobSq => 0.5 * self.lambda * self.epsilon * self.lip_l2 * self.lip_l2,
            PenaltyNorm::L11 => self.lambda * self.epsilon * self.lip_linf,
        }
    }
}

pub fn cross_entropy<T: Scalar>(logits: &Vector<T>, label: usize) -> Result<LossValue<T>> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut grad = logits.as_slice().to_vec();
    let value = softmax_xent_in_place(&mut grad, label);
    Ok(LossValue {
        value,
        grad_logits: Vector::from(grad),
    })
}

/// Replaces `z` by `softmax(z) − e_label` and returns `−log softmax(z)_label`.
fn softmax_xent_in_place<T: Scalar>(z: &mut [T], label: usize) -> T {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let value = (lse - z[label]).max(T::zero());
    for v in z.iter_mut() {
        *v = (*v - lse).exp();
    }
    z[label] -= T::one();
    value
}

/// Per-row losses and logit gradients.
pub fn cross_entropy_batch<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(Vec<T>, Matrix<T>)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("cross_entropy_batch labels", logits.rows(), labels.len()));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = logits.clone();
    let values = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| softmax_xent_in_place(grad.row_mut(i), y))
        .collect();
    Ok((values, grad))
}

pub fn lipschitz_check<T: Scalar>(logits: &Vector<T>, label: usize) -> Result<LipschitzProbe<T>> {
    let loss = cross_entropy(logits, label)?;
    Ok(LipschitzProbe {
        l2: loss.grad_logits.norm_l2(),
        linf: loss.grad_logits.norm_inf(),
    })
}

pub fn surrogate_loss<T: Scalar>(loss: &LossValue<T>, jac: &Jacobian<T>, cfg: &RegConfig) -> T {
    loss.value + T::lit(cfg.penalty_weight()) * jac.norm(cfg.norm)
}

/// First-order upper bound on the loss over an ε-ball, using the default
/// Lipschitz constants.
pub fn first_order_upper_bound<T: Scalar>(
    loss: &LossValue<T>,
    jac: &Jacobian<T>,
    epsilon: T,
    geometry: Geometry,
) -> T {
    let half = T::lit(0.5);
    match geometry {
        Geometry::L2 => {
            loss.value + half * epsilon + half * epsilon * T::lit(LIP_L2 * LIP_L2) * jac.frob_sq
        }
        Geometry::Linf => loss.value + epsilon * T::lit(LIP_LINF) * jac.l11,
    }
}
