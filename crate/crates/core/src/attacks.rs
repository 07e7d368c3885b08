//! Projected gradient ascent attacks under ℓ2 and ℓ∞ balls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::jacobian::PenaltyNorm;
use crate::losses::cross_entropy_batch;
use crate::network::{forward_batch, input_grad_batch, MlpParams};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Rng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    L2,
    Linf,
}

impl Geometry {
    /// Jacobian norm whose penalty is matched to this attack.
    pub fn matched_penalty(self) -> PenaltyNorm {
        match self {
            Geometry::L2 => PenaltyNorm::FrobSq,
            Geometry::Linf => PenaltyNorm::L11,
        }
    }

    pub fn norm<T: Scalar>(self, v: &[T]) -> T {
        match self {
            Geometry::L2 => v.iter().map(|&x| x * x).sum::<T>().sqrt(),
            Geometry::Linf => v.iter().fold(T::zero(), |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub geometry: Geometry,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub random_start: bool,
    /// Seed for random starts; sample `i` draws from stream `i`.
    pub seed: u64,
}

impl AttackConfig {
    /// ε = 0.5, 20 steps of size 0.1.
    pub fn l2_default() -> Self {
        AttackConfig {
            geometry: Geometry::L2,
            epsilon: 0.5,
            steps: 20,
            step_size: 0.1,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    /// ε = 0.03, 20 steps of size 0.01.
    pub fn linf_default() -> Self {
        AttackConfig {
            geometry: Geometry::Linf,
            epsilon: 0.03,
            steps: 20,
            step_size: 0.01,
            ..Self::l2_default()
        }
    }

    pub fn default_for(geometry: Geometry) -> Self {
        match geometry {
            Geometry::L2 => Self::l2_default(),
            Geometry::Linf => Self::linf_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::Domain(format!(
                "attack epsilon ({}) and step size ({}) must be nonnegative",
                self.epsilon, self.step_size
            )));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Domain(format!(
                "clamp range [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialExample<T> {
    pub x_adv: Vector<T>,
    pub loss_adv: T,
    pub predicted: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustMetrics {
    pub robust_accuracy: f64,
    pub robust_loss_mean: f64,
}

fn l2_dist<T: Scalar>(x: &[T], center: &[T]) -> T {
    x.iter()
        .zip(center)
        .map(|(&a, &c)| (a - c) * (a - c))
        .sum::<T>()
        .sqrt()
}

/// Projects in place. The result satisfies the ball constraint as
/// evaluated in floating point, not merely up to rounding, so projecting
/// twice changes nothing.
fn project_in_place<T: Scalar>(x: &mut [T], center: &[T], eps: T, geometry: Geometry) {
    let shrink = T::one() - T::epsilon();
    match geometry {
        Geometry::L2 => {
            let dist = l2_dist(x, center);
            if dist > eps {
                let orig = x.to_vec();
                let mut s = eps / dist;
                loop {
                    for ((a, &o), &c) in x.iter_mut().zip(&orig).zip(center) {
                        *a = c + (o - c) * s;
                    }
                    if l2_dist(x, center) <= eps {
                        break;
                    }
                    s = s * shrink;
                }
            }
        }
        Geometry::Linf => {
            for (a, &c) in x.iter_mut().zip(center) {
                let mut t = (*a - c).max(-eps).min(eps);
                let mut v = c + t;
                while (v - c).abs() > eps {
                    t = t * shrink;
                    v = c + t;
                }
                *a = v;
            }
        }
    }
}

fn clamp_in_place<T: Scalar>(x: &mut [T], lo: T, hi: T) {
    x.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
}

/// Box clamp, ball projection, box clamp. The last clamp only moves
/// coordinates toward the center's box, so it keeps ball feasibility.
fn make_feasible<T: Scalar>(x: &mut [T], center: &[T], eps: T, geometry: Geometry, lo: T, hi: T) {
    clamp_in_place(x, lo, hi);
    project_in_place(x, center, eps, geometry);
    clamp_in_place(x, lo, hi);
}

/// Nearest point of the ε-ball around `center` (radial scaling for ℓ2,
/// coordinate clipping for ℓ∞).
pub fn project_ball<T: Scalar>(x: &Vector<T>, center: &Vector<T>, epsilon: T, geometry: Geometry) -> Vector<T> {
    let mut out = x.as_slice().to_vec();
    project_in_place(&mut out, center.as_slice(), epsilon, geometry);
    Vector::from(out)
}

fn random_start_row<T: Scalar>(row: &mut [T], eps: f64, geometry: Geometry, rng: &mut Rng) {
    match geometry {
        Geometry::Linf => {
            for v in row.iter_mut() {
                *v += T::lit(rng.uniform_range(-eps, eps));
            }
        }
        Geometry::L2 => {
            let dir: Vec<f64> = (0..row.len()).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = eps * rng.uniform().powf(1.0 / row.len() as f64);
            if norm > 0.0 {
                for (v, d) in row.iter_mut().zip(dir) {
                    *v += T::lit(radius * d / norm);
                }
            }
        }
    }
}

/// Best iterates of a PGD run over a batch, rows aligned with the input.
#[derive(Clone, Debug)]
pub struct BatchAttack<T> {
    pub x_adv: Matrix<T>,
    pub loss_adv: Vec<T>,
    pub predicted: Vec<usize>,
}

/// Attacks every row of `xs`. Row `i` is treated as global sample
/// `first_index + i` for its random-start stream.
pub fn pgd_attack_batch<T: Scalar>(
    params: &MlpParams<T>,
    xs: &Matrix<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    first_index: usize,
) -> Result<BatchAttack<T>> {
    cfg.validate()?;
    if labels.len() != xs.rows() {
        return Err(Error::shape("pgd labels", xs.rows(), labels.len()));
    }
    let (lo, hi) = (T::lit(cfg.clamp_lo), T::lit(cfg.clamp_hi));
    let eps = T::lit(cfg.epsilon);
    let step = T::lit(cfg.step_size);
    let n = xs.rows();
    let mut x = xs.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for i in 0..n {
            let mut rng = Rng::with_stream(cfg.seed, (first_index + i) as u64);
            let row = x.row_mut(i);
            random_start_row(row, cfg.epsilon, cfg.geometry, &mut rng);
            make_feasible(row, xs.row(i), eps, cfg.geometry, lo, hi);
        }
    }
    let mut best = x.clone();
    let mut best_loss = vec![T::neg_infinity(); n];
    let mut predicted = vec![0usize; n];
    for it in 0..=cfg.steps {
        let trace = forward_batch(params, &x)?;
        let (losses, dlogits) = cross_entropy_batch(&trace.logits, labels)?;
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best.row_mut(i).copy_from_slice(x.row(i));
                predicted[i] = trace.logits.row_vector(i).argmax();
            }
        }
        if it == cfg.steps || cfg.epsilon == 0.0 {
            break;
        }
        let g = input_grad_batch(params, &trace, &dlogits)?;
        for i in 0..n {
            let gi = g.row(i);
            let row = x.row_mut(i);
            match cfg.geometry {
                Geometry::L2 => {
                    let norm = gi.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > T::zero() {
                        for (v, &d) in row.iter_mut().zip(gi) {
                            *v += step * d / norm;
                        }
                    }
                }
                Geometry::Linf => {
                    for (v, &d) in row.iter_mut().zip(gi) {
                        *v += step * crate::jacobian::sign(d);
                    }
                }
            }
            make_feasible(row, xs.row(i), eps, cfg.geometry, lo, hi);
        }
    }
    Ok(BatchAttack {
        x_adv: best,
        loss_adv: best_loss,
        predicted,
    })
}

/// Single-sample PGD; uses random-start stream 0.
pub fn pgd_attack<T: Scalar>(
    params: &MlpParams<T>,
    x0: &Vector<T>,
    label: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialExample<T>> {
    let xs = Matrix::from_vec(1, x0.len(), x0.as_slice().to_vec())?;
    let out = pgd_attack_batch(params, &xs, &[label], cfg, 0)?;
    Ok(AdversarialExample {
        x_adv: out.x_adv.row_vector(0),
        loss_adv: out.loss_adv[0],
        predicted: out.predicted[0],
    })
}

/// Rows per PGD batch in [`robust_metrics`]; fixed so results do not depend
/// on the worker count.
pub const ATTACK_CHUNK: usize = 500;

/// Accuracy and mean loss at the PGD best iterate of every sample.
pub fn robust_metrics<T: Scalar>(params: &MlpParams<T>, ds: &Dataset<T>, cfg: &AttackConfig) -> Result<RobustMetrics> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Domain("robust_metrics on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + ATTACK_CHUNK).min(n);
            let out = pgd_attack_batch(params, &ds.xs.row_range(s, e), &ds.ys[s..e], cfg, s)?;
            let correct = out
                .predicted
                .iter()
                .zip(&ds.ys[s..e])
                .filter(|(p, y)| p == y)
                .count();
            let loss: f64 = out.loss_adv.iter().map(|v| v.as_f64()).sum();
            Ok((correct, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, loss) = parts
        .into_iter()
        .fold((0usize, 0.0f64), |(c, l), (pc, pl)| (c + pc, l + pl));
    Ok(RobustMetrics {
        robust_accuracy: correct as f64 / n as f64,
        robust_loss_mean: loss / n as f64,
    })
}
