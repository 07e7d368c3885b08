//! Bias-free fully connected networks `f(x) = θ_L σ(θ_{L-1} ⋯ σ(θ_1 x))`.
//!
//! Layer `l` (1-based) is a `d_l × d_{l-1}` matrix. Hidden layers apply the
//! activation; the last layer produces raw logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_into, Matrix, Rng, Trans, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Accepted by forward/backward; the bound formulas are only validated
    /// for `Relu`.
    LeakyRelu { slope: f64 },
}

impl Activation {
    /// Derivative used for masks. The derivative at exactly zero is taken
    /// from the negative side (0 for ReLU).
    fn slope_at<T: Scalar>(self, z: T) -> T {
        if z > T::zero() {
            T::one()
        } else {
            match self {
                Activation::Relu => T::zero(),
                Activation::LeakyRelu { slope } => T::lit(slope),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<Matrix<T>>,
    activation: Activation,
}

/// Gradient with respect to every layer matrix, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T> {
    pub layers: Vec<Matrix<T>>,
}

/// Cached quantities of one forward pass.
///
/// `acts[0]` is the input and `acts[l]` is `h_l` for hidden layer `l`;
/// `preacts[l-1]` and `masks[l-1]` belong to hidden layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub preacts: Vec<Vector<T>>,
    pub acts: Vec<Vector<T>>,
    pub masks: Vec<Vector<T>>,
    pub logits: Vector<T>,
}

/// Forward pass over a batch, one sample per row. Same layout as
/// [`ForwardTrace`].
#[derive(Clone, Debug)]
pub struct BatchTrace<T> {
    pub preacts: Vec<Matrix<T>>,
    pub acts: Vec<Matrix<T>>,
    pub masks: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `N(0, 2/d_{l-1})` entries.
    He,
    /// `N(0, 1/d_{l-1})` entries.
    Lecun,
    /// `U(−1/√d_{l-1}, 1/√d_{l-1})` entries.
    UniformFanIn,
    Zero,
}

impl<T: Scalar> MlpParams<T> {
    pub fn new(layers: Vec<Matrix<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("a network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::shape(
                    "MlpParams::new layer chaining",
                    format!("layer {} with {} columns", l + 2, pair[0].rows()),
                    pair[1].cols(),
                ));
            }
        }
        if layers.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("MlpParams::new"));
        }
        Ok(MlpParams { layers, activation })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Domain(format!("dims {dims:?} describe no layer")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        Self::new(layers, Activation::Relu)
    }

    pub fn layers(&self) -> &[Matrix<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(d_0, d_1, …, d_L)`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].cols()];
        dims.extend(self.layers.iter().map(|m| m.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// `sqrt(Σ_l ‖θ_l‖²_F)`.
    pub fn frobenius_total(&self) -> T {
        frobenius_total(self)
    }

    pub fn apply_update(&mut self, step: &ParamGrad<T>, alpha: T) -> Result<()> {
        for (p, g) in self.layers.iter_mut().zip(&step.layers) {
            p.axpy(alpha, g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|m| m.map_into(|v| U::lit(v.as_f64())))
                .collect(),
            activation: self.activation,
        }
    }
}

impl<T: Scalar> Matrix<T> {
    pub(crate) fn map_into<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix::from_fn(self.rows(), self.cols(), |i, j| f(self[(i, j)]))
    }
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        ParamGrad {
            layers: params
                .layers
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.layers.iter_mut().for_each(|m| m.scale(s));
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .map(|m| m.frobenius_sq())
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|m| m.is_finite())
    }
}

pub fn frobenius_total<T: Scalar>(params: &MlpParams<T>) -> T {
    params
        .layers
        .iter()
        .map(|m| m.frobenius_sq())
        .sum::<T>()
        .sqrt()
}

pub fn init_params<T: Scalar>(dims: &[usize], rng: &mut Rng, rule: ScaleRule) -> Result<MlpParams<T>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Domain(format!("invalid layer dims {dims:?}")));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(fan_out, fan_in, |_, _| match rule {
                ScaleRule::He => T::lit(2f64.sqrt() * scale * rng.normal()),
                ScaleRule::Lecun => T::lit(scale * rng.normal()),
                ScaleRule::UniformFanIn => T::lit(rng.uniform_range(-scale, scale)),
                ScaleRule::Zero => T::zero(),
            })
        })
        .collect();
    MlpParams::new(layers, Activation::Relu)
}

pub fn forward_batch<T: Scalar>(params: &MlpParams<T>, xs: &Matrix<T>) -> Result<BatchTrace<T>> {
    if xs.cols() != params.input_dim() {
        return Err(Error::shape("forward input", params.input_dim(), xs.cols()));
    }
    let depth = params.depth();
    let mut preacts = Vec::with_capacity(depth - 1);
    let mut masks = Vec::with_capacity(depth - 1);
    let mut acts = Vec::with_capacity(depth);
    acts.push(xs.clone());
    for theta in &params.layers[..depth - 1] {
        let z = gemm(acts.last().unwrap(), Trans::No, theta, Trans::Yes)?;
        let mask = z.map(|v| params.activation.slope_at(v));
        let mut h = z.clone();
        for (hv, &m) in h.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *hv *= m;
        }
        preacts.push(z);
        masks.push(mask);
        acts.push(h);
    }
    let logits = gemm(acts.last().unwrap(), Trans::No, &params.layers[depth - 1], Trans::Yes)?;
    Ok(BatchTrace {
        preacts,
        acts,
        masks,
        logits,
    })
}

/// Logits only, without keeping the intermediate activations.
pub fn logits_batch<T: Scalar>(params: &MlpParams<T>, xs: &Matrix<T>) -> Result<Matrix<T>> {
    if xs.cols() != params.input_dim() {
        return Err(Error::shape("forward input", params.input_dim(), xs.cols()));
    }
    let depth = params.depth();
    let mut h = xs.clone();
    for theta in &params.layers[..depth - 1] {
        let mut z = gemm(&h, Trans::No, theta, Trans::Yes)?;
        z.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= params.activation.slope_at(*v));
        h = z;
    }
    gemm(&h, Trans::No, &params.layers[depth - 1], Trans::Yes)
}

pub fn forward<T: Scalar>(params: &MlpParams<T>, x: &Vector<T>) -> Result<ForwardTrace<T>> {
    if x.len() != params.input_dim() {
        return Err(Error::shape("forward input", params.input_dim(), x.len()));
    }
    let xs = Matrix::from_vec(1, x.len(), x.as_slice().to_vec())?;
    Ok(forward_batch(params, &xs)?.sample(0))
}

impl<T: Scalar> BatchTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    pub fn sample(&self, i: usize) -> ForwardTrace<T> {
        ForwardTrace {
            preacts: self.preacts.iter().map(|m| m.row_vector(i)).collect(),
            acts: self.acts.iter().map(|m| m.row_vector(i)).collect(),
            masks: self.masks.iter().map(|m| m.row_vector(i)).collect(),
            logits: self.logits.row_vector(i),
        }
    }

    /// Smallest `|preactivation|` of sample `i` over all hidden units.
    pub fn min_abs_preact(&self, i: usize) -> T {
        self.preacts
            .iter()
            .flat_map(|m| m.row(i).iter())
            .fold(T::infinity(), |acc, v| acc.min(v.abs()))
    }
}

impl<T: Scalar> ForwardTrace<T> {
    pub(crate) fn to_batch(&self) -> Result<BatchTrace<T>> {
        let one = |v: &Vector<T>| Matrix::from_vec(1, v.len(), v.as_slice().to_vec());
        Ok(BatchTrace {
            preacts: self.preacts.iter().map(one).collect::<Result<_>>()?,
            acts: self.acts.iter().map(one).collect::<Result<_>>()?,
            masks: self.masks.iter().map(one).collect::<Result<_>>()?,
            logits: one(&self.logits)?,
        })
    }

    pub fn min_abs_preact(&self) -> T {
        self.preacts
            .iter()
            .flat_map(|v| v.as_slice().iter())
            .fold(T::infinity(), |acc, v| acc.min(v.abs()))
    }
}

pub(crate) fn check_trace<T: Scalar>(params: &MlpParams<T>, trace: &BatchTrace<T>) -> Result<()> {
    let depth = params.depth();
    if trace.acts.len() != depth || trace.masks.len() != depth - 1 {
        return Err(Error::shape(
            "trace depth",
            depth,
            format!("{} activations", trace.acts.len()),
        ));
    }
    for (l, theta) in params.layers.iter().enumerate() {
        if trace.acts[l].cols() != theta.cols() {
            return Err(Error::shape("trace width", theta.cols(), trace.acts[l].cols()));
        }
    }
    Ok(())
}

/// Backpropagates per-sample logit gradients (one row per sample).
///
/// Returns the parameter gradient summed over the batch and, when
/// requested, the per-sample input gradients `∇ₓℓ` (one row per sample).
pub fn backprop_batch<T: Scalar>(
    params: &MlpParams<T>,
    trace: &BatchTrace<T>,
    dlogits: &Matrix<T>,
    want_input_grad: bool,
) -> Result<(ParamGrad<T>, Option<Matrix<T>>)> {
    check_trace(params, trace)?;
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "backprop logit gradient",
            format!("{:?}", trace.logits.shape()),
            format!("{:?}", dlogits.shape()),
        ));
    }
    let depth = params.depth();
    let mut grads: Vec<Matrix<T>> = Vec::with_capacity(depth);
    let mut delta = dlogits.clone();
    let mut input_grad = None;
    for l in (0..depth).rev() {
        let theta = &params.layers[l];
        let mut g = Matrix::zeros(theta.rows(), theta.cols());
        gemm_into(T::one(), &delta, Trans::Yes, &trace.acts[l], Trans::No, T::zero(), &mut g)?;
        grads.push(g);
        if l > 0 {
            let mut next = gemm(&delta, Trans::No, theta, Trans::No)?;
            for (v, &m) in next.as_mut_slice().iter_mut().zip(trace.masks[l - 1].as_slice()) {
                *v *= m;
            }
            delta = next;
        } else if want_input_grad {
            input_grad = Some(gemm(&delta, Trans::No, theta, Trans::No)?);
        }
    }
    grads.reverse();
    Ok((ParamGrad { layers: grads }, input_grad))
}

/// Per-sample `∇ₓℓ` only, skipping the parameter gradients.
pub fn input_grad_batch<T: Scalar>(
    params: &MlpParams<T>,
    trace: &BatchTrace<T>,
    dlogits: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_trace(params, trace)?;
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "input gradient logit gradient",
            format!("{:?}", trace.logits.shape()),
            format!("{:?}", dlogits.shape()),
        ));
    }
    let mut delta = dlogits.clone();
    for l in (0..params.depth()).rev() {
        let mut next = gemm(&delta, Trans::No, &params.layers[l], Trans::No)?;
        if l > 0 {
            for (v, &m) in next.as_mut_slice().iter_mut().zip(trace.masks[l - 1].as_slice()) {
                *v *= m;
            }
        }
        delta = next;
    }
    Ok(delta)
}

/// `∂ℓ/∂θ_l` for every layer given `∂ℓ/∂f` at one sample.
pub fn backprop_loss<T: Scalar>(
    params: &MlpParams<T>,
    trace: &ForwardTrace<T>,
    dloss_dlogits: &Vector<T>,
) -> Result<ParamGrad<T>> {
    if dloss_dlogits.len() != params.output_dim() {
        return Err(Error::shape("backprop_loss", params.output_dim(), dloss_dlogits.len()));
    }
    let batch = trace.to_batch()?;
    let d = Matrix::from_vec(1, dloss_dlogits.len(), dloss_dlogits.as_slice().to_vec())?;
    Ok(backprop_batch(params, &batch, &d, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = MlpParams::<f64>::zeros(&[3, 4, 2]).unwrap();
        let t = forward(&p, &Vector::from(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(t.logits.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_relu_trace() {
        let p = MlpParams::new(vec![m(2, 1, &[1.0, -1.0]), m(1, 2, &[1.0, 1.0])], Activation::Relu)
            .unwrap();
        let t = forward(&p, &Vector::from(vec![2.0])).unwrap();
        assert_eq!(t.acts[1].as_slice(), &[2.0, 0.0]);
        assert_eq!(t.masks[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(t.logits.as_slice(), &[2.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let p = MlpParams::new(vec![m(1, 1, &[1.0]), m(1, 1, &[1.0])], Activation::Relu).unwrap();
        let t = forward(&p, &Vector::from(vec![0.0])).unwrap();
        assert_eq!(t.masks[0].as_slice(), &[0.0]);
    }

    #[test]
    fn leaky_relu_masks_carry_slope() {
        let p = MlpParams::new(
            vec![m(1, 1, &[1.0]), m(1, 1, &[1.0])],
            Activation::LeakyRelu { slope: 0.1 },
        )
        .unwrap();
        let t = forward(&p, &Vector::from(vec![-2.0])).unwrap();
        assert_eq!(t.masks[0].as_slice(), &[0.1]);
        assert!((t.logits[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_dloss_gives_zero_gradient() {
        let mut rng = Rng::new(1);
        let p = init_params::<f64>(&[4, 5, 3], &mut rng, ScaleRule::He).unwrap();
        let x = Vector::from(vec![0.3, -0.2, 0.9, 0.1]);
        let t = forward(&p, &x).unwrap();
        let g = backprop_loss(&p, &t, &Vector::zeros(3)).unwrap();
        assert!(g.layers.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn frobenius_total_examples() {
        assert_eq!(MlpParams::<f64>::zeros(&[2, 3, 1]).unwrap().frobenius_total(), 0.0);
        let p = MlpParams::new(vec![m(1, 1, &[3.0]), m(1, 1, &[4.0])], Activation::Relu).unwrap();
        assert_eq!(p.frobenius_total(), 5.0);
    }

    #[test]
    fn init_is_deterministic_and_zero_rule_is_zero() {
        let a = init_params::<f64>(&[5, 4, 3], &mut Rng::new(9), ScaleRule::He).unwrap();
        let b = init_params::<f64>(&[5, 4, 3], &mut Rng::new(9), ScaleRule::He).unwrap();
        assert_eq!(a, b);
        let z = init_params::<f64>(&[5, 4, 3], &mut Rng::new(9), ScaleRule::Zero).unwrap();
        assert_eq!(z.frobenius_total(), 0.0);
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let p = init_params::<f64>(&[1000, 1000], &mut Rng::new(17), ScaleRule::He).unwrap();
        let data = p.layers()[0].as_slice();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 1000.0;
        assert!((var - target).abs() <= 0.1 * target, "var {var}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = MlpParams::new(vec![m(2, 1, &[1.0, 1.0]), m(1, 3, &[1.0; 3])], Activation::Relu);
        assert!(matches!(bad, Err(Error::Shape { .. })));
        let p = MlpParams::<f64>::zeros(&[3, 2]).unwrap();
        assert!(forward(&p, &Vector::zeros(2)).is_err());
        let t = forward(&p, &Vector::zeros(3)).unwrap();
        assert!(backprop_loss(&p, &t, &Vector::zeros(3)).is_err());
    }
}
