use std::f64::consts::{FRAC_PI_2, SQRT_2};

use jacreg::bounds::{
    norm_bound_slacks, generalization_gap_bound, lipschitz_param_constants, rademacher_jacobian_bound,
    rademacher_loss_bound, surrogate_complexity, surrogate_ranges,
};
use jacreg::data::{compute_stats, parse_idx_images, to_idx_bytes};
use jacreg::verify::random_net;
use jacreg::{bound_report, load_idx, subsample, BoundInputs, Dataset, DatasetStats, Matrix, Regime, Rng};
use proptest::prelude::*;

fn unit_stats(n: usize) -> DatasetStats {
    DatasetStats {
        n,
        mean_x_l2: 1.0,
        mean_x_l2_sq: 1.0,
        r_x: 1.0,
        d: 1,
        k: 1,
    }
}

fn golden_inputs() -> BoundInputs {
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

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// `12·scale·√(P/n)·(√ln(arg) + √(π/2))` at P = 10, n = 100.
fn dudley(scale: f64, arg: f64) -> f64 {
    12.0 * scale * 0.1f64.sqrt() * (arg.ln().sqrt() + FRAC_PI_2.sqrt())
}

#[test]
fn golden_values_at_the_reference_point() {
    // L = 2, R_Θ = 2, n = 100, P = 10, r₁ = r₂ = 1, k = d = 1, unit inputs.
    let s = unit_stats(100);
    let inp = golden_inputs();
    let lip = lipschitz_param_constants(&s, &inp).unwrap();
    // √L·L_ℓ2·mean‖x‖·R = √2·√2·2; 2√L·R³ = 16√2; √(Lkd)·R = 2√2.
    assert!(rel(lip.lip_loss, 4.0) <= 1e-12);
    assert!(rel(lip.lip_frob, 16.0 * SQRT_2) <= 1e-12);
    assert!(rel(lip.lip_l11, 2.0 * SQRT_2) <= 1e-12);

    // Loss class: scale √(2·r₂·mean‖x‖²) = √2 or r₁·R_x = 1; argument 3·R·L^ℓ/scale.
    let loss_r2 = dudley(SQRT_2, 24.0 / SQRT_2);
    let loss_r1 = dudley(1.0, 24.0);
    assert!(rel(rademacher_loss_bound(&s, &inp, Regime::R2).unwrap(), loss_r2) <= 1e-12);
    assert!(rel(rademacher_loss_bound(&s, &inp, Regime::R1).unwrap(), loss_r1) <= 1e-12);

    // Jacobian classes: scale r, argument 3·R·L^F/r₂ = 96√2 and 3·R·L^1/r₁ = 12√2.
    let jac_frob = dudley(1.0, 96.0 * SQRT_2);
    let jac_l11 = dudley(1.0, 12.0 * SQRT_2);
    assert!(rel(rademacher_jacobian_bound(&s, &inp, Regime::R2).unwrap(), jac_frob) <= 1e-12);
    assert!(rel(rademacher_jacobian_bound(&s, &inp, Regime::R1).unwrap(), jac_l11) <= 1e-12);

    // Surrogates: weights ½·0.1·0.5·2 = 0.05 and 0.1·0.5·1 = 0.05; ranges 5 + 0.05·10.
    let surr = surrogate_complexity(&s, &inp).unwrap();
    assert!(rel(surr.rad_surrogate_l2, loss_r2 + 0.05 * jac_frob) <= 1e-12);
    assert!(rel(surr.rad_surrogate_linf, loss_r1 + 0.05 * jac_l11) <= 1e-12);
    assert_eq!(surrogate_ranges(&inp), (5.5, 5.5));
    let conf = 3.0 * 5.5 * (40f64.ln() / 200.0).sqrt();
    let gap = generalization_gap_bound(&s, &inp).unwrap();
    assert!(rel(gap.gap_bound_l2, 2.0 * (loss_r2 + 0.05 * jac_frob) + conf) <= 1e-12);
    assert!(rel(gap.gap_bound_linf, 2.0 * (loss_r1 + 0.05 * jac_l11) + conf) <= 1e-12);
}

#[test]
fn report_flags_vacuous_fields() {
    let report = bound_report(&unit_stats(100), &golden_inputs()).unwrap();
    // Every complexity term exceeds its tiny range at n = 100.
    assert!(report.vacuous.contains(&"gap_bound_l2"));
    let big = bound_report(&unit_stats(1_000_000_000), &BoundInputs { b: 100.0, b1: 1e3, b2: 1e3, ..golden_inputs() }).unwrap();
    assert!(big.vacuous.is_empty(), "{:?}", big.vacuous);
    assert!(!big.lip_overflow);
}

#[test]
fn zero_radii_are_domain_errors() {
    let s = unit_stats(10);
    let zero = BoundInputs { r1: 0.0, r2: 0.0, ..golden_inputs() };
    assert!(bound_report(&s, &zero).is_err());
    let lip = lipschitz_param_constants(&s, &zero).unwrap();
    assert!(lip.lip_loss.is_finite());
}

fn report_fields(s: &DatasetStats, inp: &BoundInputs) -> [f64; 8] {
    let r = bound_report(s, inp).unwrap();
    [
        r.rad_loss_r2,
        r.rad_loss_r1,
        r.rad_jac_frob,
        r.rad_jac_l11,
        r.rad_surrogate_l2,
        r.rad_surrogate_linf,
        r.gap_bound_l2,
        r.gap_bound_linf,
    ]
}

fn inputs_strategy() -> impl Strategy<Value = (BoundInputs, DatasetStats)> {
    (
        2usize..8,
        0.5f64..8.0,
        1usize..100_000,
        0.01f64..100.0,
        0.01f64..100.0,
        0.0f64..10.0,
        0.0f64..1.0,
        (0.1f64..30.0, 0.1f64..1.0, 1usize..800, 2usize..12),
    )
        .prop_map(|(depth, r_theta, p, r1, r2, lambda, epsilon, (mean_sq, r_x, d, k))| {
            let inp = BoundInputs { depth, r_theta, num_params: p, r1, r2, lambda, epsilon, ..golden_inputs() };
            let s = DatasetStats { n: 1000, mean_x_l2: mean_sq.sqrt() * 0.9, mean_x_l2_sq: mean_sq, r_x, d, k };
            (inp, s)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bounds_grow_with_parameter_count((inp, s) in inputs_strategy(), extra in 1usize..10_000) {
        let a = report_fields(&s, &inp);
        let b = report_fields(&s, &BoundInputs { num_params: inp.num_params + extra, ..inp });
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x, "{} < {}", y, x);
        }
    }

    #[test]
    fn bounds_shrink_with_sample_count((inp, s) in inputs_strategy(), n in 1usize..100_000, extra in 1usize..100_000) {
        let a = report_fields(&DatasetStats { n, ..s }, &inp);
        let b = report_fields(&DatasetStats { n: n + extra, ..s }, &inp);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y <= x, "{} > {}", y, x);
        }
    }

    #[test]
    fn jacobian_bound_ratio_under_radius_doubling((inp, s) in inputs_strategy()) {
        // value(2r)/value(r) = 2·(√|ℓ − ln 2| + √(π/2)) / (√|ℓ| + √(π/2)) with ℓ = ln(3R·L^F/r).
        let lip = lipschitz_param_constants(&s, &inp).unwrap();
        let ell = (3.0 * inp.r_theta).ln() + lip.ln_lip_frob - inp.r2.ln();
        let c = FRAC_PI_2.sqrt();
        let want = 2.0 * ((ell - 2f64.ln()).abs().sqrt() + c) / (ell.abs().sqrt() + c);
        let one = rademacher_jacobian_bound(&s, &inp, Regime::R2).unwrap();
        let two = rademacher_jacobian_bound(&s, &BoundInputs { r2: 2.0 * inp.r2, ..inp }, Regime::R2).unwrap();
        prop_assert!(rel(two / one, want) <= 1e-12);
    }

    #[test]
    fn bounds_are_pure((inp, s) in inputs_strategy()) {
        prop_assert_eq!(bound_report(&s, &inp).unwrap(), bound_report(&s, &inp).unwrap());
    }

    #[test]
    fn output_norm_inequalities_hold_on_random_nets(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = random_net(&mut rng, 2..=5, 24).unwrap();
        let n = 1 + rng.below(40);
        let xs = Matrix::from_fn(n, p.input_dim(), |_, _| rng.uniform_range(0.0, 1.0));
        let ys = (0..n).map(|_| rng.below(p.output_dim())).collect();
        let ds = Dataset::new(xs, ys, p.output_dim()).unwrap();
        let s = norm_bound_slacks(&p, &ds).unwrap();
        for slack in [s.output_slack_l2, s.output_slack_l1, s.loss_slack_l2, s.loss_slack_l1] {
            prop_assert!(slack >= -1e-9);
        }
    }

    #[test]
    fn jensen_on_input_norms(seed in any::<u64>(), n in 1usize..50, d in 1usize..30) {
        let mut rng = Rng::new(seed);
        let xs = Matrix::from_fn(n, d, |_, _| rng.uniform_range(0.0, 1.0));
        let ds = Dataset::new(xs, vec![0; n], 10).unwrap();
        let s = compute_stats(&ds);
        prop_assert!(s.mean_x_l2 * s.mean_x_l2 <= s.mean_x_l2_sq * (1.0 + 1e-12));
        prop_assert!(s.r_x <= 1.0);
    }

    #[test]
    fn idx_round_trip_preserves_pixels(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let xs = Matrix::from_fn(n, 16, |_, _| rng.below(256) as f64 / 255.0);
        let ys: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let ds = Dataset::new(xs, ys, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = to_idx_bytes(&ds);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let back: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(&back.xs, &ds.xs);
        prop_assert_eq!(&back.ys, &ds.ys);
    }
}

#[test]
fn truncated_and_mislabeled_idx_files_are_rejected() {
    let ds = Dataset::new(Matrix::from_fn(3, 4, |i, j| ((i + j) % 2) as f64), vec![1, 2, 3], 10).unwrap();
    let (img, lab) = to_idx_bytes(&ds);
    let path = std::path::Path::new("fixture");
    assert!(parse_idx_images(&img[..img.len() - 1], path).is_err());
    assert!(parse_idx_images(&lab, path).is_err());
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab[..lab.len() - 1]).unwrap();
    assert!(load_idx::<f64>(&ip, &lp).is_err());
}

#[test]
fn subsample_is_seeded_and_without_replacement() {
    let n = 500;
    let ds = Dataset::new(Matrix::from_fn(n, 1, |i, _| i as f64 / n as f64), vec![0; n], 10).unwrap();
    let a = subsample(&ds, 100, &mut Rng::with_stream(3, 2)).unwrap();
    let b = subsample(&ds, 100, &mut Rng::with_stream(3, 2)).unwrap();
    assert_eq!(a.xs, b.xs);
    let mut seen: Vec<f64> = a.xs.as_slice().to_vec();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    assert_eq!(seen.len(), 100);
    assert!(subsample(&ds, n + 1, &mut Rng::new(0)).is_err());
}
