//! Randomized audits of the identities and inequalities the library relies
//! on: the homogeneity identity, finite-difference agreement of every
//! analytic derivative, the cross-entropy Lipschitz caps and the
//! output-norm bounds.
//!
//! Every audit draws from its own stream of the supplied seed, so a report
//! is a pure function of `(seed, sizes)`.

use std::fmt;

use crate::bounds::norm_bound_slacks;
use crate::data::Dataset;
use crate::error::Result;
use crate::jacobian::{batch_jacobian, input_jacobian, Jacobian, PenaltyNorm};
use crate::losses::{cross_entropy, RegConfig, LIP_L2, LIP_LINF};
use crate::network::{forward, forward_batch, init_params, Activation, MlpParams, ParamGrad, ScaleRule};
use crate::tensor::{Matrix, Rng, Vector};
use crate::trainer::objective_grad;

/// Computes the input Jacobian of a network at a traced point; swappable
/// so the audits can be pointed at a deliberately broken implementation.
pub type JacobianFn = fn(&MlpParams<f64>, &crate::network::ForwardTrace<f64>) -> Result<Jacobian<f64>>;

/// Smallest `|preactivation|` accepted as a generic (differentiable) point.
pub const GENERIC_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifySizes {
    pub identity_nets: usize,
    pub identity_inputs: usize,
    pub jacobian_nets: usize,
    pub penalty_nets: usize,
    pub penalty_probes: usize,
    pub logit_pairs: usize,
    pub bound_pairs: usize,
    pub objective_probes: usize,
}

impl VerifySizes {
    pub fn full() -> Self {
        VerifySizes {
            identity_nets: 1000,
            identity_inputs: 10,
            jacobian_nets: 200,
            penalty_nets: 100,
            penalty_probes: 20,
            logit_pairs: 1_000_000,
            bound_pairs: 500,
            objective_probes: 50,
        }
    }

    pub fn quick() -> Self {
        VerifySizes {
            identity_nets: 50,
            identity_inputs: 4,
            jacobian_nets: 20,
            penalty_nets: 10,
            penalty_probes: 10,
            logit_pairs: 20_000,
            bound_pairs: 40,
            objective_probes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Largest observed error (or most negative slack, negated).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: &'static str, tolerance: f64) -> Self {
        CheckOutcome {
            name,
            trials: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
        }
    }

    /// Records an error value; NaN counts as a failure.
    fn record(&mut self, err: f64) {
        self.trials += 1;
        if err.is_nan() || err > self.tolerance {
            self.failures += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} ok, worst {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.trials - self.failures,
            self.trials,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let passed = self.checks.iter().filter(|c| c.passed()).count();
        write!(f, "{passed}/{} checks passed", self.checks.len())
    }
}

/// Random ReLU net with depth in `depths`, every width in `1..=max_width`
/// and He-scaled Gaussian weights.
pub fn random_net(rng: &mut Rng, depths: std::ops::RangeInclusive<usize>, max_width: usize) -> Result<MlpParams<f64>> {
    let depth = depths.start() + rng.below(depths.end() - depths.start() + 1);
    let dims: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(max_width)).collect();
    init_params(&dims, rng, ScaleRule::He)
}

fn gaussian_vector(rng: &mut Rng, n: usize) -> Vector<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Draws inputs until every preactivation clears [`GENERIC_MARGIN`].
fn generic_input(params: &MlpParams<f64>, rng: &mut Rng, tries: usize) -> Result<Option<Vector<f64>>> {
    for _ in 0..tries {
        let x = gaussian_vector(rng, params.input_dim());
        if forward(params, &x)?.min_abs_preact() > GENERIC_MARGIN {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

/// A random net together with a generic input for it.
fn generic_pair(rng: &mut Rng, depths: std::ops::RangeInclusive<usize>, max_width: usize) -> Result<(MlpParams<f64>, Vector<f64>)> {
    loop {
        let p = random_net(rng, depths.clone(), max_width)?;
        if let Some(x) = generic_input(&p, rng, 50)? {
            return Ok((p, x));
        }
    }
}

/// `max ‖f(x) − J(x)ᵀx‖_∞ / (1 + ‖f(x)‖_∞)` over random nets of depth
/// 2..=6 and width ≤ 64.
pub fn audit_homogeneity(seed: u64, nets: usize, inputs: usize, jac: JacobianFn) -> Result<CheckOutcome> {
    let mut rng = Rng::with_stream(seed, 1);
    let mut out = CheckOutcome::new("homogeneity identity f(x) = J(x)ᵀx", 1e-9);
    for _ in 0..nets {
        let p = random_net(&mut rng, 2..=6, 64)?;
        for _ in 0..inputs {
            let x = gaussian_vector(&mut rng, p.input_dim());
            let trace = forward(&p, &x)?;
            let j = jac(&p, &trace)?;
            let jt_x = j.matrix.tr_mul_vec(&x)?;
            let f = &trace.logits;
            out.record(f.sub(&jt_x).norm_inf() / (1.0 + f.norm_inf()));
        }
    }
    Ok(out)
}

/// Central differences of the logits against the analytic Jacobian.
pub fn audit_jacobian_fd(seed: u64, nets: usize, jac: JacobianFn) -> Result<CheckOutcome> {
    let mut rng = Rng::with_stream(seed, 2);
    let mut out = CheckOutcome::new("input Jacobian vs finite differences", 1e-6);
    let h = 1e-6;
    for _ in 0..nets {
        let (p, x) = generic_pair(&mut rng, 2..=6, 64)?;
        let j = jac(&p, &forward(&p, &x)?)?;
        let mut worst = 0.0f64;
        for col in 0..x.len() {
            let mut xp = x.as_slice().to_vec();
            let mut xm = xp.clone();
            xp[col] += h;
            xm[col] -= h;
            let fp = forward(&p, &Vector::from(xp))?.logits;
            let fm = forward(&p, &Vector::from(xm))?.logits;
            for out_j in 0..fp.len() {
                let fd = (fp[out_j] - fm[out_j]) / (2.0 * h);
                worst = worst.max((fd - j.matrix[(col, out_j)]).abs());
            }
        }
        out.record(worst);
    }
    Ok(out)
}

fn entry_mut(params: &mut MlpParams<f64>, layer: usize, idx: usize) -> &mut f64 {
    &mut params.layers_mut()[layer].as_mut_slice()[idx]
}

fn random_probe(rng: &mut Rng, params: &MlpParams<f64>) -> (usize, usize) {
    let layer = rng.below(params.depth());
    let len = params.layers()[layer].as_slice().len();
    (layer, rng.below(len))
}

/// Relative error of one probed derivative, measured against the scale of
/// the whole gradient so that entries that are zero up to rounding do not
/// dominate.
fn probe_rel_err(analytic: f64, fd: f64, grad_scale: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-6 * grad_scale).max(f64::MIN_POSITIVE);
    (analytic - fd).abs() / denom
}

fn grad_scale(g: &ParamGrad<f64>) -> f64 {
    g.layers
        .iter()
        .flat_map(|m| m.as_slice().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

fn same_masks(a: &crate::network::ForwardTrace<f64>, b: &crate::network::ForwardTrace<f64>) -> bool {
    a.masks == b.masks
}

/// Finite differences of `‖J‖²_F` or `‖J‖_{1,1}` with respect to randomly
/// probed weights. Probes whose perturbation flips an activation or the
/// sign of a Jacobian entry are redrawn.
pub fn audit_penalty_fd(seed: u64, nets: usize, probes: usize, kind: PenaltyNorm) -> Result<CheckOutcome> {
    let (stream, name) = match kind {
        PenaltyNorm::FrobSq => (3, "‖J‖²_F parameter gradient vs finite differences"),
        PenaltyNorm::L11 => (4, "‖J‖₁,₁ parameter gradient vs finite differences"),
    };
    let mut rng = Rng::with_stream(seed, stream);
    let mut out = CheckOutcome::new(name, 1e-4);
    let h = 1e-6;
    for _ in 0..nets {
        let (p, x) = generic_pair(&mut rng, 2..=6, 32)?;
        let trace = forward(&p, &x)?;
        let batch = forward_batch(&p, &Matrix::from_vec(1, x.len(), x.as_slice().to_vec())?)?;
        let bj = batch_jacobian(&p, &batch)?;
        let g = bj.penalty_grad(&p, &batch, kind, 1.0)?;
        let scale = grad_scale(&g);
        let signs = bj.stacked_transpose().map(crate::jacobian::sign);
        let mut worst = 0.0f64;
        let mut done = 0;
        let mut attempts = 0;
        while done < probes && attempts < 20 * probes {
            attempts += 1;
            let (layer, idx) = random_probe(&mut rng, &p);
            let eval = |delta: f64| -> Result<Option<f64>> {
                let mut q = p.clone();
                *entry_mut(&mut q, layer, idx) += delta;
                let t = forward(&q, &x)?;
                if !same_masks(&t, &trace) {
                    return Ok(None);
                }
                let jq = input_jacobian(&q, &t)?;
                if kind == PenaltyNorm::L11 {
                    let qs = jq.matrix.transpose().map(crate::jacobian::sign);
                    if qs.as_slice() != signs.as_slice() {
                        return Ok(None);
                    }
                }
                Ok(Some(jq.norm(kind)))
            };
            let (Some(up), Some(down)) = (eval(h)?, eval(-h)?) else {
                continue;
            };
            let fd = (up - down) / (2.0 * h);
            let analytic = g.layers[layer].as_slice()[idx];
            worst = worst.max(probe_rel_err(analytic, fd, scale));
            done += 1;
        }
        out.record(worst);
    }
    Ok(out)
}

/// Finite differences of the batch surrogate objective (loss plus weighted
/// penalty) against [`objective_grad`].
pub fn audit_objective_fd(seed: u64, probes: usize, reg: &RegConfig) -> Result<CheckOutcome> {
    let mut rng = Rng::with_stream(seed, 5 + reg.norm as u64);
    let mut out = CheckOutcome::new(
        match reg.norm {
            PenaltyNorm::FrobSq => "surrogate objective gradient (‖J‖²_F) vs finite differences",
            PenaltyNorm::L11 => "surrogate objective gradient (‖J‖₁,₁) vs finite differences",
        },
        1e-4,
    );
    let h = 1e-6;
    let (p, xs, ys) = loop {
        let p = random_net(&mut rng, 3..=4, 16)?;
        let k = p.output_dim();
        let xs = Matrix::from_fn(6, p.input_dim(), |_, _| rng.normal());
        let ys: Vec<usize> = (0..6).map(|_| rng.below(k)).collect();
        let t = forward_batch(&p, &xs)?;
        let generic = (0..6).all(|i| t.min_abs_preact(i) > GENERIC_MARGIN);
        if generic && batch_jacobian(&p, &t)?.stacked_transpose().as_slice().iter().all(|v| v.abs() > 1e-6) {
            break (p, xs, ys);
        }
    };
    let obj = objective_grad(&p, &xs, &ys, reg)?;
    let scale = grad_scale(&obj.grad);
    let base = forward_batch(&p, &xs)?;
    let base_signs = batch_jacobian(&p, &base)?.stacked_transpose().map(crate::jacobian::sign);
    let mut attempts = 0;
    while out.trials < probes && attempts < 20 * probes {
        attempts += 1;
        let (layer, idx) = random_probe(&mut rng, &p);
        let eval = |delta: f64| -> Result<Option<f64>> {
            let mut q = p.clone();
            *entry_mut(&mut q, layer, idx) += delta;
            let t = forward_batch(&q, &xs)?;
            let signs = batch_jacobian(&q, &t)?.stacked_transpose().map(crate::jacobian::sign);
            if t.masks != base.masks || signs.as_slice() != base_signs.as_slice() {
                return Ok(None);
            }
            Ok(Some(objective_grad(&q, &xs, &ys, reg)?.surrogate))
        };
        let (Some(up), Some(down)) = (eval(h)?, eval(-h)?) else {
            continue;
        };
        let fd = (up - down) / (2.0 * h);
        out.record(probe_rel_err(obj.grad.layers[layer].as_slice()[idx], fd, scale));
    }
    Ok(out)
}

/// Cross-entropy logit gradients never exceed `√2` in ℓ2 or `1` in ℓ∞.
/// Also returns the largest ℓ2 norm seen.
pub fn audit_lipschitz(seed: u64, pairs: usize) -> Result<(CheckOutcome, CheckOutcome, f64)> {
    let mut rng = Rng::with_stream(seed, 7);
    let mut l2 = CheckOutcome::new("‖∇ cross entropy‖₂ ≤ √2", 0.0);
    let mut linf = CheckOutcome::new("‖∇ cross entropy‖_∞ ≤ 1", 0.0);
    let mut sup = 0.0f64;
    for _ in 0..pairs {
        let spread = 10f64.powf(rng.uniform_range(-1.0, 2.0));
        let z: Vector<f64> = (0..10).map(|_| spread * rng.normal()).collect();
        let g = cross_entropy(&z, rng.below(10))?.grad_logits;
        let (a, b) = (g.norm_l2(), g.norm_inf());
        sup = sup.max(a);
        l2.record(a - LIP_L2);
        linf.record(b - LIP_LINF);
    }
    Ok((l2, linf, sup))
}

/// Slacks of the four output-norm inequalities on random nets and random
/// batches in `[0, 1]^d`; the recorded error is `−slack`.
pub fn audit_norm_bounds(seed: u64, pairs: usize) -> Result<CheckOutcome> {
    let mut rng = Rng::with_stream(seed, 8);
    let mut out = CheckOutcome::new("output-norm bound slacks ≥ −1e−9", 1e-9);
    for _ in 0..pairs {
        let p = random_net(&mut rng, 1..=5, 32)?;
        let n = 1 + rng.below(16);
        let xs = Matrix::from_fn(n, p.input_dim(), |_, _| rng.uniform());
        let ys = (0..n).map(|_| rng.below(p.output_dim())).collect();
        let ds = Dataset::new(xs, ys, p.output_dim())?;
        let s = norm_bound_slacks(&p, &ds)?;
        let worst = [s.output_slack_l2, s.output_slack_l1, s.loss_slack_l2, s.loss_slack_l1]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        out.record(-worst);
    }
    Ok(out)
}

/// Single-layer rank-one net with every input on its right-singular
/// direction: the ℓ2 output-norm bound is attained. Returns
/// `slack / rhs`.
pub fn norm_bound_tightness(seed: u64) -> Result<f64> {
    let mut rng = Rng::with_stream(seed, 9);
    let d = 20;
    let v: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let theta = Matrix::from_vec(1, d, v.clone())?;
    let p = MlpParams::new(vec![theta], Activation::Relu)?;
    let c = 0.9 * vnorm / v.iter().fold(0.0f64, |m, a| m.max(*a));
    let x: Vec<f64> = v.iter().map(|a| c * a / vnorm).collect();
    let n = 8;
    let xs = Matrix::from_fn(n, d, |_, j| x[j]);
    let ds = Dataset::new(xs, vec![0; n], 1)?;
    let s = norm_bound_slacks(&p, &ds)?;
    Ok(s.output_slack_l2 / s.output_rhs_l2)
}

/// `εL‖J‖_F ≤ ½ε + ½εL²‖J‖²_F` on Jacobians of random nets.
pub fn audit_am_gm(seed: u64, nets: usize) -> Result<CheckOutcome> {
    let mut rng = Rng::with_stream(seed, 10);
    let mut out = CheckOutcome::new("εL‖J‖_F ≤ ½ε + ½εL²‖J‖²_F", 0.0);
    for _ in 0..nets {
        let p = random_net(&mut rng, 2..=4, 32)?;
        let x = gaussian_vector(&mut rng, p.input_dim());
        let j = input_jacobian(&p, &forward(&p, &x)?)?;
        let eps = rng.uniform();
        let lhs = eps * LIP_L2 * j.frob_sq.sqrt();
        let rhs = 0.5 * eps + 0.5 * eps * LIP_L2 * LIP_L2 * j.frob_sq;
        out.record(lhs - rhs - 1e-12 * rhs);
    }
    Ok(out)
}

/// Runs every audit at the given sizes.
pub fn run_all(seed: u64, sizes: &VerifySizes, jac: JacobianFn) -> Result<VerifyReport> {
    let mut checks = vec![
        audit_homogeneity(seed, sizes.identity_nets, sizes.identity_inputs, jac)?,
        audit_jacobian_fd(seed, sizes.jacobian_nets, jac)?,
        audit_penalty_fd(seed, sizes.penalty_nets, sizes.penalty_probes, PenaltyNorm::FrobSq)?,
        audit_penalty_fd(seed, sizes.penalty_nets, sizes.penalty_probes, PenaltyNorm::L11)?,
    ];
    for reg in [
        RegConfig::new(PenaltyNorm::FrobSq, 0.5, 0.4)?,
        RegConfig::new(PenaltyNorm::L11, 0.03, 0.5)?,
    ] {
        checks.push(audit_objective_fd(seed, sizes.objective_probes, &reg)?);
    }
    let (l2, linf, sup) = audit_lipschitz(seed, sizes.logit_pairs)?;
    checks.push(l2);
    checks.push(linf);
    let mut approach = CheckOutcome::new("sup ‖∇ cross entropy‖₂ approaches √2 (> 1.35)", 0.0);
    approach.record(1.35 - sup);
    approach.worst = sup;
    checks.push(approach);
    checks.push(audit_norm_bounds(seed, sizes.bound_pairs)?);
    let mut tight = CheckOutcome::new("rank-one tightness: slack ≤ 1e−6·rhs", 1e-6);
    tight.record(norm_bound_tightness(seed)?);
    checks.push(tight);
    checks.push(audit_am_gm(seed, sizes.identity_nets.min(200))?);
    Ok(VerifyReport { checks })
}

/// The library's own Jacobian, the default for [`run_all`].
pub fn library_jacobian(params: &MlpParams<f64>, trace: &crate::network::ForwardTrace<f64>) -> Result<Jacobian<f64>> {
    input_jacobian(params, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = run_all(11, &VerifySizes::quick(), library_jacobian).unwrap();
        assert!(report.all_passed(), "{report}");
    }

    fn scaled_jacobian(params: &MlpParams<f64>, trace: &crate::network::ForwardTrace<f64>) -> Result<Jacobian<f64>> {
        let mut j = input_jacobian(params, trace)?;
        j.matrix.scale(1.01);
        Ok(j)
    }

    #[test]
    fn corrupted_jacobian_is_caught() {
        let c = audit_homogeneity(3, 5, 3, scaled_jacobian).unwrap();
        assert!(!c.passed());
    }

    #[test]
    fn outcome_counts_nan_as_failure() {
        let mut c = CheckOutcome::new("x", 1.0);
        c.record(f64::NAN);
        assert_eq!((c.trials, c.failures), (1, 1));
        assert!(c.worst.is_infinite());
    }
}
