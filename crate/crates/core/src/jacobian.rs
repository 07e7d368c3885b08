//! Input Jacobians of ReLU networks and the gradients of their norms.
//!
//! For one sample the transposed Jacobian is the masked product
//!
//! ```text
//! Jᵀ = θ_L D_{L-1} θ_{L-1} ⋯ D_1 θ_1        (k × d)
//! ```
//!
//! with `D_l = diag(h′_l)`. A batch is processed by stacking the `k`-row
//! blocks of all samples, which turns every product into one matrix
//! multiplication. Writing `P_l = θ_L D_{L-1} ⋯ θ_{l+1} D_l` (the "left"
//! products) and `Q_l = D_{l-1} θ_{l-1} ⋯ D_1 θ_1`, the derivative of
//! `⟨G, Jᵀ⟩` with masks held fixed is `P_lᵀ G Q_lᵀ` for layer `l`. Choosing
//! `G = 2Jᵀ` gives the gradient of `‖J‖²_F`, `G = sign(Jᵀ)` that of
//! `‖J‖_{1,1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{check_trace, forward, forward_batch, BatchTrace, ForwardTrace, MlpParams, ParamGrad};
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_into, Matrix, Trans, Vector};

/// Which Jacobian norm a penalty uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    /// `‖J‖²_F`, matched to ℓ2 attacks.
    FrobSq,
    /// `‖J‖_{1,1}`, matched to ℓ∞ attacks.
    L11,
}

/// `∇ₓf(x)` as a `d × k` matrix; column `j` is `∇ₓf_j(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian<T> {
    pub matrix: Matrix<T>,
    pub frob_sq: T,
    pub l11: T,
}

impl<T: Scalar> Jacobian<T> {
    pub fn norm(&self, kind: PenaltyNorm) -> T {
        match kind {
            PenaltyNorm::FrobSq => self.frob_sq,
            PenaltyNorm::L11 => self.l11,
        }
    }

    /// Smallest `|J_ij|`.
    pub fn min_abs_entry(&self) -> T {
        self.matrix
            .as_slice()
            .iter()
            .fold(T::infinity(), |m, v| m.min(v.abs()))
    }
}

/// Sample means of the two Jacobian norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianStats<T> {
    pub mean_frob_sq: T,
    pub mean_l11: T,
    pub n: usize,
}

impl<T: Scalar> JacobianStats<T> {
    pub fn mean(&self, kind: PenaltyNorm) -> T {
        match kind {
            PenaltyNorm::FrobSq => self.mean_frob_sq,
            PenaltyNorm::L11 => self.mean_l11,
        }
    }
}

/// Stacked Jacobians of a batch together with the cached left products
/// needed for penalty gradients.
#[derive(Clone, Debug)]
pub struct BatchJacobian<T> {
    k: usize,
    /// `left[l-1]` stacks `P_l` (masked by `D_l`) for hidden layer `l`.
    left: Vec<Matrix<T>>,
    /// Block `i` (rows `i·k .. (i+1)·k`) is `J_iᵀ`.
    jt: Matrix<T>,
}

/// Multiplies column `j` of every row in block `i` by `masks[(i, j)]`.
fn mask_blocks<T: Scalar>(m: &mut Matrix<T>, masks: &Matrix<T>, k: usize) {
    debug_assert_eq!(m.rows(), masks.rows() * k);
    debug_assert_eq!(m.cols(), masks.cols());
    for i in 0..masks.rows() {
        let mask = masks.row(i);
        for r in 0..k {
            for (v, &s) in m.row_mut(i * k + r).iter_mut().zip(mask) {
                *v *= s;
            }
        }
    }
}

/// Replicates `theta` once per sample, masking columns with each sample's mask.
fn stacked_last_layer<T: Scalar>(theta: &Matrix<T>, masks: Option<&Matrix<T>>, batch: usize) -> Matrix<T> {
    let k = theta.rows();
    let mut s = Matrix::zeros(batch * k, theta.cols());
    for i in 0..batch {
        for r in 0..k {
            s.row_mut(i * k + r).copy_from_slice(theta.row(r));
        }
    }
    if let Some(masks) = masks {
        mask_blocks(&mut s, masks, k);
    }
    s
}

pub fn batch_jacobian<T: Scalar>(params: &MlpParams<T>, trace: &BatchTrace<T>) -> Result<BatchJacobian<T>> {
    check_trace(params, trace)?;
    let layers = params.layers();
    let depth = layers.len();
    let batch = trace.batch_size();
    let k = params.output_dim();
    if depth == 1 {
        return Ok(BatchJacobian {
            k,
            left: Vec::new(),
            jt: stacked_last_layer(&layers[0], None, batch),
        });
    }
    let mut left = vec![Matrix::zeros(0, 0); depth - 1];
    left[depth - 2] = stacked_last_layer(&layers[depth - 1], Some(&trace.masks[depth - 2]), batch);
    for l in (1..depth - 1).rev() {
        // P_{l} = P_{l+1} θ_{l+1} D_{l}, using 0-based storage left[l-1] = P_l.
        let mut next = gemm(&left[l], Trans::No, &layers[l], Trans::No)?;
        mask_blocks(&mut next, &trace.masks[l - 1], k);
        left[l - 1] = next;
    }
    let jt = gemm(&left[0], Trans::No, &layers[0], Trans::No)?;
    Ok(BatchJacobian { k, left, jt })
}

impl<T: Scalar> BatchJacobian<T> {
    pub fn batch_size(&self) -> usize {
        self.jt.rows() / self.k
    }

    fn block(&self, i: usize) -> &[T] {
        let w = self.jt.cols();
        &self.jt.as_slice()[i * self.k * w..(i + 1) * self.k * w]
    }

    pub fn frob_sq(&self, i: usize) -> T {
        self.block(i).iter().map(|&v| v * v).sum()
    }

    pub fn l11(&self, i: usize) -> T {
        self.block(i).iter().map(|v| v.abs()).sum()
    }

    pub fn norm(&self, i: usize, kind: PenaltyNorm) -> T {
        match kind {
            PenaltyNorm::FrobSq => self.frob_sq(i),
            PenaltyNorm::L11 => self.l11(i),
        }
    }

    /// The `d × k` Jacobian of sample `i`.
    pub fn jacobian(&self, i: usize) -> Jacobian<T> {
        let d = self.jt.cols();
        let k = self.k;
        let block = self.block(i);
        let matrix = Matrix::from_fn(d, k, |r, c| block[c * d + r]);
        Jacobian {
            matrix,
            frob_sq: self.frob_sq(i),
            l11: self.l11(i),
        }
    }

    /// The stacked transposed Jacobians, one `k`-row block per sample.
    pub fn stacked_transpose(&self) -> &Matrix<T> {
        &self.jt
    }

    /// Σ_i ∂⟨G_i, J_iᵀ⟩/∂θ with masks held constant; `seed` has the layout of
    /// [`Self::stacked_transpose`].
    pub fn vjp(&self, params: &MlpParams<T>, trace: &BatchTrace<T>, seed: Matrix<T>) -> Result<ParamGrad<T>> {
        if seed.shape() != self.jt.shape() {
            return Err(Error::shape(
                "jacobian vjp seed",
                format!("{:?}", self.jt.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let layers = params.layers();
        let depth = layers.len();
        let k = self.k;
        let batch = self.batch_size();
        let mut grads = Vec::with_capacity(depth);
        let mut r = seed;
        for l in 0..depth {
            let theta = &layers[l];
            if l + 1 < depth {
                let mut g = Matrix::zeros(theta.rows(), theta.cols());
                gemm_into(T::one(), &self.left[l], Trans::Yes, &r, Trans::No, T::zero(), &mut g)?;
                grads.push(g);
                let mut next = gemm(&r, Trans::No, theta, Trans::Yes)?;
                mask_blocks(&mut next, &trace.masks[l], k);
                r = next;
            } else {
                let mut g = Matrix::zeros(theta.rows(), theta.cols());
                for i in 0..batch {
                    for row in 0..k {
                        for (a, &b) in g.row_mut(row).iter_mut().zip(r.row(i * k + row)) {
                            *a += b;
                        }
                    }
                }
                grads.push(g);
            }
        }
        Ok(ParamGrad { layers: grads })
    }

    /// Gradient of `weight · Σ_i ‖J_i‖` for the chosen norm.
    pub fn penalty_grad(
        &self,
        params: &MlpParams<T>,
        trace: &BatchTrace<T>,
        kind: PenaltyNorm,
        weight: T,
    ) -> Result<ParamGrad<T>> {
        let two = T::lit(2.0);
        let seed = match kind {
            PenaltyNorm::FrobSq => self.jt.map(|v| two * weight * v),
            PenaltyNorm::L11 => self.jt.map(|v| weight * sign(v)),
        };
        self.vjp(params, trace, seed)
    }
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn input_jacobian<T: Scalar>(params: &MlpParams<T>, trace: &ForwardTrace<T>) -> Result<Jacobian<T>> {
    let batch = trace.to_batch()?;
    Ok(batch_jacobian(params, &batch)?.jacobian(0))
}

/// `‖f(x) − J(x)ᵀx‖_∞`, which vanishes for positively homogeneous networks.
pub fn check_homogeneity_identity<T: Scalar>(params: &MlpParams<T>, x: &Vector<T>) -> Result<T> {
    let trace = forward(params, x)?;
    let jac = input_jacobian(params, &trace)?;
    let jt_x = jac.matrix.tr_mul_vec(x)?;
    Ok(trace.logits.sub(&jt_x).norm_inf())
}

pub fn penalty_grad_frob_sq<T: Scalar>(params: &MlpParams<T>, trace: &ForwardTrace<T>) -> Result<ParamGrad<T>> {
    let batch = trace.to_batch()?;
    batch_jacobian(params, &batch)?.penalty_grad(params, &batch, PenaltyNorm::FrobSq, T::one())
}

/// Subgradient of `‖J‖_{1,1}` with `sign(0) = 0`.
pub fn penalty_grad_l11<T: Scalar>(params: &MlpParams<T>, trace: &ForwardTrace<T>) -> Result<ParamGrad<T>> {
    let batch = trace.to_batch()?;
    batch_jacobian(params, &batch)?.penalty_grad(params, &batch, PenaltyNorm::L11, T::one())
}

/// Rows processed per stacked Jacobian in [`batch_stats`].
const STATS_CHUNK: usize = 256;

/// Means of `‖J‖²_F` and `‖J‖_{1,1}` over the rows of `xs`.
pub fn batch_stats<T: Scalar>(params: &MlpParams<T>, xs: &Matrix<T>) -> Result<JacobianStats<T>> {
    let n = xs.rows();
    if n == 0 {
        return Err(Error::Domain("batch_stats needs at least one sample".into()));
    }
    let (mut frob, mut l11) = (T::zero(), T::zero());
    for start in (0..n).step_by(STATS_CHUNK) {
        let end = (start + STATS_CHUNK).min(n);
        let chunk = xs.row_range(start, end);
        let trace = forward_batch(params, &chunk)?;
        let bj = batch_jacobian(params, &trace)?;
        for i in 0..end - start {
            frob += bj.frob_sq(i);
            l11 += bj.l11(i);
        }
    }
    let nt = T::lit(n as f64);
    Ok(JacobianStats {
        mean_frob_sq: frob / nt,
        mean_l11: l11 / nt,
        n,
    })
}
