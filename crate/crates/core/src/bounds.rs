//! Closed-form complexity constants and generalization-gap bounds for
//! Jacobian-regularized ReLU networks.
//!
//! Everything here is a pure function of [`DatasetStats`] and
//! [`BoundInputs`]. Powers of `R_Θ/√(L−1)` are formed in log space so deep
//! or large-norm configurations overflow only in the reported Lipschitz
//! constants, never inside the logarithms of the complexity bounds.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::io::Write;

use crate::data::{Dataset, DatasetStats};
use crate::error::{Error, Result};
use crate::jacobian::{batch_jacobian, PenaltyNorm};
use crate::losses::{cross_entropy_batch, LIP_L2, LIP_LINF};
use crate::network::{forward_batch, MlpParams};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Frobenius radius `R_Θ` of the parameters.
    pub r_theta: f64,
    /// Total parameter count `P`.
    pub num_params: usize,
    /// Depth `L ≥ 2`.
    pub depth: usize,
    /// Bound on the sample mean of `‖J‖_{1,1}`.
    pub r1: f64,
    /// Bound on the sample mean of `‖J‖²_F`.
    pub r2: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Range of the loss.
    pub b: f64,
    /// Range of `‖J‖_{1,1}`.
    pub b1: f64,
    /// Range of `‖J‖²_F`.
    pub b2: f64,
    /// Confidence parameter in (0, 1).
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Mean `‖J‖²_F ≤ r₂`.
    R2,
    /// Mean `‖J‖_{1,1} ≤ r₁`.
    R1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzConstants {
    pub lip_loss: f64,
    pub lip_frob: f64,
    pub lip_l11: f64,
    pub ln_lip_loss: f64,
    pub ln_lip_frob: f64,
    pub ln_lip_l11: f64,
}

impl LipschitzConstants {
    /// True when a constant overflowed `f64` and is reported as `+∞`.
    pub fn overflowed(&self) -> bool {
        [self.lip_loss, self.lip_frob, self.lip_l11]
            .iter()
            .any(|v| v.is_infinite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateComplexity {
    pub rad_surrogate_l2: f64,
    pub rad_surrogate_linf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapBounds {
    pub gap_bound_l2: f64,
    pub gap_bound_linf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lip_loss: f64,
    pub lip_frob: f64,
    pub lip_l11: f64,
    pub rad_loss_r2: f64,
    pub rad_loss_r1: f64,
    pub rad_jac_frob: f64,
    pub rad_jac_l11: f64,
    pub rad_surrogate_l2: f64,
    pub rad_surrogate_linf: f64,
    pub gap_bound_l2: f64,
    pub gap_bound_linf: f64,
    /// Names of the fields whose value exceeds the range of the quantity it
    /// bounds (and so carries no information).
    pub vacuous: Vec<&'static str>,
    pub lip_overflow: bool,
}

fn validate(stats: &DatasetStats, inp: &BoundInputs) -> Result<()> {
    if inp.depth < 2 {
        return Err(Error::Domain(format!("depth must be at least 2, got {}", inp.depth)));
    }
    if stats.n == 0 {
        return Err(Error::Domain("bounds need n ≥ 1".into()));
    }
    let named = [
        ("r_theta", inp.r_theta),
        ("r1", inp.r1),
        ("r2", inp.r2),
        ("lambda", inp.lambda),
        ("epsilon", inp.epsilon),
        ("b", inp.b),
        ("b1", inp.b1),
        ("b2", inp.b2),
        ("mean_x_l2", stats.mean_x_l2),
        ("mean_x_l2_sq", stats.mean_x_l2_sq),
        ("r_x", stats.r_x),
    ];
    for (name, v) in named {
        if !(v >= 0.0) || v.is_infinite() {
            return Err(Error::Domain(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", inp.delta)));
    }
    Ok(())
}

/// `L^ℓ`, `L^F` and `L^1`: how fast the loss and the two Jacobian norms can
/// move per unit Frobenius change of the parameters.
pub fn lipschitz_param_constants(stats: &DatasetStats, inp: &BoundInputs) -> Result<LipschitzConstants> {
    validate(stats, inp)?;
    let l = inp.depth as f64;
    let ln_ratio = inp.r_theta.ln() - 0.5 * (l - 1.0).ln();
    let ln_lip_loss = 0.5 * l.ln() + LIP_L2.ln() + stats.mean_x_l2.ln() + (l - 1.0) * ln_ratio;
    let ln_lip_frob = LN_2 + 0.5 * l.ln() + (2.0 * l - 1.0) * ln_ratio;
    let ln_lip_l11 = 0.5 * (l * stats.k as f64 * stats.d as f64).ln() + (l - 1.0) * ln_ratio;
    Ok(LipschitzConstants {
        lip_loss: ln_lip_loss.exp(),
        lip_frob: ln_lip_frob.exp(),
        lip_l11: ln_lip_l11.exp(),
        ln_lip_loss,
        ln_lip_frob,
        ln_lip_l11,
    })
}

/// `12·scale·√(P/n)·(√|ln_arg| + √(π/2))`.
fn dudley_form(scale: f64, ln_arg: f64, p: usize, n: usize) -> f64 {
    12.0 * scale * (p as f64 / n as f64).sqrt() * (ln_arg.abs().sqrt() + FRAC_PI_2.sqrt())
}

/// Complexity of the cross-entropy class restricted by a Jacobian budget.
pub fn rademacher_loss_bound(stats: &DatasetStats, inp: &BoundInputs, regime: Regime) -> Result<f64> {
    let lip = lipschitz_param_constants(stats, inp)?;
    let scale = match regime {
        Regime::R2 => {
            if !(inp.r2 > 0.0) {
                return Err(Error::Domain(format!("r2 must be positive, got {}", inp.r2)));
            }
            (2.0 * inp.r2 * stats.mean_x_l2_sq).sqrt()
        }
        Regime::R1 => {
            if !(inp.r1 > 0.0) {
                return Err(Error::Domain(format!("r1 must be positive, got {}", inp.r1)));
            }
            inp.r1 * stats.r_x
        }
    };
    if !(scale > 0.0) {
        return Err(Error::Domain("all-zero inputs make the loss bound degenerate".into()));
    }
    let ln_arg = 3f64.ln() + inp.r_theta.ln() + lip.ln_lip_loss - scale.ln();
    Ok(dudley_form(scale, ln_arg, inp.num_params, stats.n))
}

/// Complexity of the Jacobian-penalty class itself.
pub fn rademacher_jacobian_bound(stats: &DatasetStats, inp: &BoundInputs, regime: Regime) -> Result<f64> {
    let lip = lipschitz_param_constants(stats, inp)?;
    let (r, ln_lip) = match regime {
        Regime::R2 => (inp.r2, lip.ln_lip_frob),
        Regime::R1 => (inp.r1, lip.ln_lip_l11),
    };
    if !(r > 0.0) {
        return Err(Error::Domain(format!("Jacobian radius must be positive, got {r}")));
    }
    let ln_arg = 3f64.ln() + inp.r_theta.ln() + ln_lip - r.ln();
    Ok(dudley_form(r, ln_arg, inp.num_params, stats.n))
}

/// `a + w·b`, treating `w = 0` as switching the second term off even when
/// `b` is infinite.
fn weighted(a: f64, w: f64, b: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * b
    }
}

fn weight_l2(inp: &BoundInputs) -> f64 {
    0.5 * inp.lambda * inp.epsilon * LIP_L2 * LIP_L2
}

fn weight_linf(inp: &BoundInputs) -> f64 {
    inp.lambda * inp.epsilon * LIP_LINF
}

pub fn surrogate_complexity(stats: &DatasetStats, inp: &BoundInputs) -> Result<SurrogateComplexity> {
    let loss_r2 = rademacher_loss_bound(stats, inp, Regime::R2)?;
    let loss_r1 = rademacher_loss_bound(stats, inp, Regime::R1)?;
    let jac_frob = rademacher_jacobian_bound(stats, inp, Regime::R2)?;
    let jac_l11 = rademacher_jacobian_bound(stats, inp, Regime::R1)?;
    Ok(combine_surrogate(inp, loss_r2, loss_r1, jac_frob, jac_l11))
}

fn combine_surrogate(inp: &BoundInputs, loss_r2: f64, loss_r1: f64, jac_frob: f64, jac_l11: f64) -> SurrogateComplexity {
    SurrogateComplexity {
        rad_surrogate_l2: weighted(loss_r2, weight_l2(inp), jac_frob),
        rad_surrogate_linf: weighted(loss_r1, weight_linf(inp), jac_l11),
    }
}

/// Loss ranges `C₂ = B + ½λεL²_{ℓ2}B₂` and `C_∞ = B + λεL_{ℓ∞}B₁` of the
/// surrogate losses.
pub fn surrogate_ranges(inp: &BoundInputs) -> (f64, f64) {
    (
        weighted(inp.b, weight_l2(inp), inp.b2),
        weighted(inp.b, weight_linf(inp), inp.b1),
    )
}

/// `3C·√(log(2/δ)/(2n))`.
pub fn confidence_term(c: f64, delta: f64, n: usize) -> f64 {
    3.0 * c * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Excess of expected over empirical surrogate risk: `2·complexity +
/// 3C·√(log(2/δ)/(2n))`.
pub fn generalization_gap_bound(stats: &DatasetStats, inp: &BoundInputs) -> Result<GapBounds> {
    let surr = surrogate_complexity(stats, inp)?;
    Ok(gap_from(stats, inp, &surr))
}

fn gap_from(stats: &DatasetStats, inp: &BoundInputs, surr: &SurrogateComplexity) -> GapBounds {
    let (c2, cinf) = surrogate_ranges(inp);
    GapBounds {
        gap_bound_l2: 2.0 * surr.rad_surrogate_l2 + confidence_term(c2, inp.delta, stats.n),
        gap_bound_linf: 2.0 * surr.rad_surrogate_linf + confidence_term(cinf, inp.delta, stats.n),
    }
}

pub fn bound_report(stats: &DatasetStats, inp: &BoundInputs) -> Result<BoundReport> {
    let lip = lipschitz_param_constants(stats, inp)?;
    let rad_loss_r2 = rademacher_loss_bound(stats, inp, Regime::R2)?;
    let rad_loss_r1 = rademacher_loss_bound(stats, inp, Regime::R1)?;
    let rad_jac_frob = rademacher_jacobian_bound(stats, inp, Regime::R2)?;
    let rad_jac_l11 = rademacher_jacobian_bound(stats, inp, Regime::R1)?;
    let surr = combine_surrogate(inp, rad_loss_r2, rad_loss_r1, rad_jac_frob, rad_jac_l11);
    let gap = gap_from(stats, inp, &surr);
    let (c2, cinf) = surrogate_ranges(inp);
    let checks = [
        ("rad_loss_r2", rad_loss_r2, inp.b),
        ("rad_loss_r1", rad_loss_r1, inp.b),
        ("rad_jac_frob", rad_jac_frob, inp.b2),
        ("rad_jac_l11", rad_jac_l11, inp.b1),
        ("rad_surrogate_l2", surr.rad_surrogate_l2, c2),
        ("rad_surrogate_linf", surr.rad_surrogate_linf, cinf),
        ("gap_bound_l2", gap.gap_bound_l2, c2),
        ("gap_bound_linf", gap.gap_bound_linf, cinf),
    ];
    let vacuous = checks
        .iter()
        .filter(|(_, v, range)| !(v <= range))
        .map(|(name, _, _)| *name)
        .collect();
    Ok(BoundReport {
        lip_loss: lip.lip_loss,
        lip_frob: lip.lip_frob,
        lip_l11: lip.lip_l11,
        rad_loss_r2,
        rad_loss_r1,
        rad_jac_frob,
        rad_jac_l11,
        rad_surrogate_l2: surr.rad_surrogate_l2,
        rad_surrogate_linf: surr.rad_surrogate_linf,
        gap_bound_l2: gap.gap_bound_l2,
        gap_bound_linf: gap.gap_bound_linf,
        vacuous,
        lip_overflow: lip.overflowed(),
    })
}

/// Fixed column order of bound CSV files.
pub const CSV_HEADER: &str = "depth,r_theta,n,r1,r2,lambda,epsilon,lip_loss,lip_frob,lip_l11,\
rad_loss_r2,rad_loss_r1,rad_jac_frob,rad_jac_l11,rad_surrogate_l2,rad_surrogate_linf,\
gap_bound_l2,gap_bound_linf,vacuous";

impl BoundReport {
    pub fn csv_row(&self, stats: &DatasetStats, inp: &BoundInputs) -> String {
        let vals = [
            self.lip_loss,
            self.lip_frob,
            self.lip_l11,
            self.rad_loss_r2,
            self.rad_loss_r1,
            self.rad_jac_frob,
            self.rad_jac_l11,
            self.rad_surrogate_l2,
            self.rad_surrogate_linf,
            self.gap_bound_l2,
            self.gap_bound_linf,
        ];
        let mut row = format!(
            "{},{},{},{},{},{},{}",
            inp.depth, inp.r_theta, stats.n, inp.r1, inp.r2, inp.lambda, inp.epsilon
        );
        for v in vals {
            row.push_str(&format!(",{v}"));
        }
        row.push(',');
        row.push_str(&self.vacuous.join(";"));
        row
    }
}

/// Axes of a bound sweep; every combination becomes one CSV row.
#[derive(Clone, Debug, Default)]
pub struct SweepGrid {
    pub depths: Vec<usize>,
    pub r_thetas: Vec<f64>,
    pub ns: Vec<usize>,
    pub r1s: Vec<f64>,
    pub r2s: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
}

/// Evaluates every grid point, holding the remaining fields of `stats`
/// and `base` fixed, and writes header plus rows to `out`.
pub fn write_sweep(out: &mut impl Write, stats: &DatasetStats, base: &BoundInputs, grid: &SweepGrid) -> Result<usize> {
    let io = |e| Error::io("sweep output", e);
    writeln!(out, "{CSV_HEADER}").map_err(io)?;
    let mut rows = 0;
    for &depth in &grid.depths {
        for &r_theta in &grid.r_thetas {
            for &n in &grid.ns {
                for &r1 in &grid.r1s {
                    for &r2 in &grid.r2s {
                        for &lambda in &grid.lambdas {
                            for &epsilon in &grid.epsilons {
                                let s = DatasetStats { n, ..*stats };
                                let inp = BoundInputs {
                                    depth,
                                    r_theta,
                                    r1,
                                    r2,
                                    lambda,
                                    epsilon,
                                    ..*base
                                };
                                let report = bound_report(&s, &inp)?;
                                writeln!(out, "{}", report.csv_row(&s, &inp)).map_err(io)?;
                                rows += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Slack (`rhs − lhs`) of the four output-norm inequalities, evaluated with
/// the measured `r₁`, `r₂` and `R_x` of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBoundSlacks {
    /// `√r₂·√(mean ‖x‖²) − mean ‖f‖₂`.
    pub output_slack_l2: f64,
    /// `r₁·R_x − mean ‖f‖₁`.
    pub output_slack_l1: f64,
    /// `L_{ℓ2}·√r₂·√(mean ‖x‖²) − mean |ℓ(f) − ℓ(f_0)|`.
    pub loss_slack_l2: f64,
    /// `L_{ℓ∞}·r₁·R_x − mean |ℓ(f) − ℓ(f_0)|`.
    pub loss_slack_l1: f64,
    pub output_rhs_l2: f64,
}

pub fn norm_bound_slacks<T: Scalar>(params: &MlpParams<T>, ds: &Dataset<T>) -> Result<NormBoundSlacks> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Domain("norm_bound_slacks needs samples".into()));
    }
    let trace = forward_batch(params, &ds.xs)?;
    let bj = batch_jacobian(params, &trace)?;
    let (losses, _) = cross_entropy_batch(&trace.logits, &ds.ys)?;
    let loss_at_zero = (params.output_dim() as f64).ln();
    let nf = n as f64;
    let (mut f_l2, mut f_l1, mut dev, mut r2, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let row = trace.logits.row(i);
        f_l2 += row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        f_l1 += row.iter().map(|v| v.as_f64().abs()).sum::<f64>();
        dev += (losses[i].as_f64() - loss_at_zero).abs();
        r2 += bj.norm(i, PenaltyNorm::FrobSq).as_f64();
        r1 += bj.norm(i, PenaltyNorm::L11).as_f64();
    }
    let (f_l2, f_l1, dev, r2, r1) = (f_l2 / nf, f_l1 / nf, dev / nf, r2 / nf, r1 / nf);
    let s = &ds.stats;
    let rhs_l2 = r2.sqrt() * s.mean_x_l2_sq.sqrt();
    let rhs_l1 = r1 * s.r_x;
    Ok(NormBoundSlacks {
        output_slack_l2: rhs_l2 - f_l2,
        output_slack_l1: rhs_l1 - f_l1,
        loss_slack_l2: LIP_L2 * rhs_l2 - dev,
        loss_slack_l1: LIP_LINF * rhs_l1 - dev,
        output_rhs_l2: rhs_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize) -> DatasetStats {
        DatasetStats {
            n,
            mean_x_l2: 1.0,
            mean_x_l2_sq: 1.0,
            r_x: 1.0,
            d: 1,
            k: 1,
        }
    }

    fn inputs() -> BoundInputs {
        BoundInputs {
            r_theta: 2.0,
            num_params: 10,
            depth: 2,
            r1: 1.0,
            r2: 1.0,
            lambda: 0.1,
            epsilon: 0.5,
            b: 5.0,
            b1: 10.0,
            b2: 10.0,
            delta: 0.05,
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn hand_evaluated_constants() {
        let lip = lipschitz_param_constants(&stats(100), &inputs()).unwrap();
        assert!(close(lip.lip_loss, 4.0, 1e-14));
        assert!(close(lip.lip_frob, 16.0 * 2f64.sqrt(), 1e-14));
        assert!(close(lip.lip_l11, 2.0 * 2f64.sqrt(), 1e-14));
    }

    #[test]
    fn unit_ratio_collapse() {
        for depth in 2..7 {
            let inp = BoundInputs {
                depth,
                r_theta: ((depth - 1) as f64).sqrt(),
                ..inputs()
            };
            let s = DatasetStats { mean_x_l2: 3.0, d: 4, k: 5, ..stats(10) };
            let lip = lipschitz_param_constants(&s, &inp).unwrap();
            let l = depth as f64;
            assert!(close(lip.lip_loss, l.sqrt() * 2f64.sqrt() * 3.0, 1e-13));
            assert!(close(lip.lip_frob, 2.0 * l.sqrt(), 1e-13));
            assert!(close(lip.lip_l11, (l * 20.0).sqrt(), 1e-13));
        }
    }

    #[test]
    fn doubling_radius_scales_frob_constant() {
        for depth in 2..6 {
            let a = lipschitz_param_constants(&stats(5), &BoundInputs { depth, ..inputs() }).unwrap();
            let b = lipschitz_param_constants(&stats(5), &BoundInputs { depth, r_theta: 4.0, ..inputs() }).unwrap();
            assert!(close(b.lip_frob / a.lip_frob, 2f64.powi(2 * depth as i32 - 1), 1e-12));
        }
    }

    #[test]
    fn vanishing_log_leaves_pi_term() {
        // Choose R_Θ so that 3·R_Θ·L^F/r₂ = 1 at depth 2: 3·R·2√2·R³ = 1.
        let r = (1.0 / (6.0 * 2f64.sqrt())).powf(0.25);
        let inp = BoundInputs { r_theta: r, ..inputs() };
        let v = rademacher_jacobian_bound(&stats(100), &inp, Regime::R2).unwrap();
        assert!(close(v, 12.0 * (0.1f64).sqrt() * FRAC_PI_2.sqrt(), 1e-7));
    }

    #[test]
    fn overflow_is_reported_not_nan() {
        let inp = BoundInputs { depth: 200, r_theta: 1e6, ..inputs() };
        let report = bound_report(&stats(100), &inp).unwrap();
        assert!(report.lip_overflow);
        assert!(report.lip_frob.is_infinite());
        assert!(report.rad_jac_frob.is_finite());
        assert!(report.vacuous.contains(&"rad_jac_frob"));
    }

    #[test]
    fn domain_errors() {
        let s = stats(100);
        assert!(rademacher_loss_bound(&s, &BoundInputs { r2: 0.0, ..inputs() }, Regime::R2).is_err());
        assert!(rademacher_jacobian_bound(&s, &BoundInputs { r1: 0.0, ..inputs() }, Regime::R1).is_err());
        assert!(bound_report(&s, &BoundInputs { delta: 1.0, ..inputs() }).is_err());
        assert!(bound_report(&s, &BoundInputs { depth: 1, ..inputs() }).is_err());
        assert!(bound_report(&s, &BoundInputs { b: f64::NAN, ..inputs() }).is_err());
    }

    #[test]
    fn surrogate_combination() {
        let inp = inputs();
        let s = combine_surrogate(&inp, 1.0, 1.0, 2.0, 2.0);
        assert!(close(s.rad_surrogate_l2, 1.1, 1e-15));
        let zero = combine_surrogate(&BoundInputs { lambda: 0.0, ..inp }, 1.0, 3.0, f64::INFINITY, 2.0);
        assert_eq!((zero.rad_surrogate_l2, zero.rad_surrogate_linf), (1.0, 3.0));
    }

    #[test]
    fn confidence_term_forms() {
        let delta = 2.0 / std::f64::consts::E.powi(2);
        assert!(close(confidence_term(1.5, delta, 400), 3.0 * 1.5 / 20.0, 1e-14));
        let big = stats(1_000_000_000_000);
        let inp = inputs();
        let gap = generalization_gap_bound(&big, &inp).unwrap();
        let surr = surrogate_complexity(&big, &inp).unwrap();
        let excess = gap.gap_bound_l2 - 2.0 * surr.rad_surrogate_l2;
        assert!(excess > 0.0 && excess < 1e-4);
        assert!(close(excess, confidence_term(5.5, 0.05, big.n), 1e-9));
    }

    #[test]
    fn sweep_writes_every_combination() {
        let grid = SweepGrid {
            depths: vec![2, 3],
            r_thetas: vec![1.0, 2.0],
            ns: vec![100, 1000],
            r1s: vec![1.0],
            r2s: vec![1.0, 2.0],
            lambdas: vec![0.1],
            epsilons: vec![0.5],
        };
        let mut buf = Vec::new();
        let rows = write_sweep(&mut buf, &stats(1), &inputs(), &grid).unwrap();
        assert_eq!(rows, 16);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 17);
        let cols = CSV_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
    }
}
