//! Subcommand implementations. Each returns its textual report so callers
//! (the binary, tests) decide where it goes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use jacreg::bounds::{bound_report, norm_bound_slacks, write_sweep, BoundInputs, SweepGrid, CSV_HEADER};
use jacreg::checkpoint::Checkpoint;
use jacreg::data::DatasetStats;
use jacreg::jacobian::batch_jacobian;
use jacreg::losses::cross_entropy_batch;
use jacreg::trainer::{evaluate, train, write_log_csv, Evaluation};
use jacreg::verify::{run_all, JacobianFn, VerifySizes};
use jacreg::{forward_batch, AttackConfig, Dataset, MlpParams, RegConfig, Rng};
use serde::Serialize;

use crate::config::{load_split, ExperimentConfig, Split};
use crate::reproduce::{
    curve_csv, dominance_violations, run_curve, run_table, table_csv, table_markdown, table_spec, ModelCache, TableId,
};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.jreg";
pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.toml";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Final metrics of a trained model, written beside the checkpoint.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_surrogate: f64,
    pub train_mean_frob_sq: f64,
    pub train_mean_l11: f64,
    pub test_mean_frob_sq: f64,
    pub test_mean_l11: f64,
    pub robust_train_acc: f64,
    pub robust_test_acc: f64,
    pub robust_train_loss: f64,
    pub robust_test_loss: f64,
    pub r_theta: f64,
}

fn summarize(params: &MlpParams<f64>, split: &Split, reg: &RegConfig, attack: &AttackConfig) -> Result<Summary, CliError> {
    let tr = evaluate(params, &split.train, reg, Some(attack))?;
    let te = evaluate(params, &split.test, reg, Some(attack))?;
    let rob = |e: &Evaluation| e.robust.expect("attack given");
    Ok(Summary {
        train_acc: tr.acc,
        test_acc: te.acc,
        train_loss: tr.loss_mean,
        test_loss: te.loss_mean,
        train_surrogate: tr.surrogate_mean,
        train_mean_frob_sq: tr.mean_frob_sq,
        train_mean_l11: tr.mean_l11,
        test_mean_frob_sq: te.mean_frob_sq,
        test_mean_l11: te.mean_l11,
        robust_train_acc: rob(&tr).robust_accuracy,
        robust_test_acc: rob(&te).robust_accuracy,
        robust_train_loss: rob(&tr).robust_loss_mean,
        robust_test_loss: rob(&te).robust_loss_mean,
        r_theta: params.frobenius_total(),
    })
}

/// Trains per `cfg`, writing the config echo, checkpoint, epoch log and
/// summary into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    cfg.train.validate()?;
    cfg.eval_attack.validate()?;
    let split = load_split(&cfg.data_dir, cfg.n_train, cfg.subset_seed)?;
    cfg.write_echo(out)?;
    let outcome = train(&split.train, &split.test, &cfg.train, cfg.log_attack.as_ref())?;
    let ckpt = Checkpoint {
        params: outcome.params.clone(),
        rng_id: Rng::new(cfg.train.seed).id(),
        seed: cfg.train.seed,
    };
    ckpt.save(out.join(CHECKPOINT_FILE))?;
    let mut log = Vec::new();
    write_log_csv(&mut log, &outcome.logs).expect("writing to memory");
    write_file(&out.join(LOG_FILE), log)?;
    let summary = summarize(&outcome.params, &split, &cfg.train.reg, &cfg.eval_attack)?;
    let text = toml::to_string(&summary).expect("summary is plain data");
    write_file(&out.join(SUMMARY_FILE), &text)?;
    Ok(format!("wrote {}\n{text}", out.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(Checkpoint::<f64>::load(path)?.params)
}

/// Standard and PGD metrics of a checkpoint on the training subset and the
/// test set.
pub fn cmd_attack(checkpoint: &Path, split: &Split, attack: &AttackConfig) -> Result<String, CliError> {
    attack.validate()?;
    let params = load_checkpoint(checkpoint)?;
    let reg = RegConfig::unregularized(attack.geometry.matched_penalty());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "attack {:?} eps={} steps={} step_size={} random_start={}",
        attack.geometry, attack.epsilon, attack.steps, attack.step_size, attack.random_start
    );
    for (name, ds) in [("train", &split.train), ("test", &split.test)] {
        let ev = evaluate(&params, ds, &reg, Some(attack))?;
        let r = ev.robust.expect("attack given");
        let _ = writeln!(
            s,
            "{name}: n={} standard_acc={} robust_acc={} loss={} robust_loss={}",
            ds.len(),
            ev.acc,
            r.robust_accuracy,
            ev.loss_mean,
            r.robust_loss_mean
        );
    }
    Ok(s)
}

/// Loss and Jacobian-norm ranges observed on a dataset: `(B, B₁, B₂)` and
/// the means `(r₁, r₂)`.
pub fn empirical_ranges(params: &MlpParams<f64>, ds: &Dataset<f64>) -> Result<([f64; 3], [f64; 2]), CliError> {
    let (mut b, mut b1, mut b2, mut r1, mut r2) = (0.0f64, 0.0f64, 0.0f64, 0.0, 0.0);
    for start in (0..ds.len()).step_by(250) {
        let end = (start + 250).min(ds.len());
        let trace = forward_batch(params, &ds.xs.row_range(start, end))?;
        let (losses, _) = cross_entropy_batch(&trace.logits, &ds.ys[start..end])?;
        let bj = batch_jacobian(params, &trace)?;
        for (i, loss) in losses.iter().enumerate() {
            let (l11, fsq) = (bj.l11(i), bj.frob_sq(i));
            b = b.max(*loss);
            b1 = b1.max(l11);
            b2 = b2.max(fsq);
            r1 += l11;
            r2 += fsq;
        }
    }
    let n = ds.len() as f64;
    Ok(([b, b1, b2], [r1 / n, r2 / n]))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BoundOverrides {
    pub b: Option<f64>,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
}

/// Bound report for a checkpoint, with `r₁`, `r₂`, `R_Θ` and the ranges
/// measured on the training subset.
pub fn cmd_bounds(
    checkpoint: &Path,
    train_ds: &Dataset<f64>,
    delta: f64,
    reg: &RegConfig,
    overrides: BoundOverrides,
) -> Result<String, CliError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must lie in (0, 1), got {delta}")));
    }
    let params = load_checkpoint(checkpoint)?;
    let ([b, b1, b2], [r1, r2]) = empirical_ranges(&params, train_ds)?;
    let inp = BoundInputs {
        r_theta: params.frobenius_total(),
        num_params: params.num_params(),
        depth: params.depth(),
        r1,
        r2,
        lambda: reg.lambda,
        epsilon: reg.epsilon,
        b: overrides.b.unwrap_or(b),
        b1: overrides.b1.unwrap_or(b1),
        b2: overrides.b2.unwrap_or(b2),
        delta,
    };
    let stats = train_ds.stats;
    let report = bound_report(&stats, &inp)?;
    let slacks = norm_bound_slacks(&params, train_ds)?;
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    let _ = writeln!(s, "{}", report.csv_row(&stats, &inp));
    let _ = writeln!(s, "ranges: B={} B1={} B2={} (C2, Cinf)={:?}", inp.b, inp.b1, inp.b2, jacreg::bounds::surrogate_ranges(&inp));
    if report.lip_overflow {
        let _ = writeln!(s, "note: a Lipschitz constant overflowed f64 and is reported as inf");
    }
    if report.vacuous.is_empty() {
        let _ = writeln!(s, "vacuous: none");
    } else {
        let _ = writeln!(s, "vacuous: {}", report.vacuous.join(", "));
    }
    let _ = writeln!(
        s,
        "output-norm slacks: l2={} l1={} loss_l2={} loss_l1={}",
        slacks.output_slack_l2, slacks.output_slack_l1, slacks.loss_slack_l2, slacks.loss_slack_l1
    );
    Ok(s)
}

pub fn cmd_sweep(out: &mut impl std::io::Write, stats: &DatasetStats, base: &BoundInputs, grid: &SweepGrid) -> Result<usize, CliError> {
    if !(base.delta > 0.0 && base.delta < 1.0) {
        return Err(CliError::Usage(format!("--delta must lie in (0, 1), got {}", base.delta)));
    }
    Ok(write_sweep(out, stats, base, grid)?)
}

/// Runs the randomized audits against `jac`; the flag is true iff every
/// check passed.
pub fn cmd_verify(seed: u64, quick: bool, jac: JacobianFn) -> Result<(String, bool), CliError> {
    let sizes = if quick { VerifySizes::quick() } else { VerifySizes::full() };
    let report = run_all(seed, &sizes, jac)?;
    Ok((format!("{report}\n"), report.all_passed()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReproduceTarget {
    T1,
    T2,
    Fig1,
    All,
}

/// Runs the requested experiments, writing tables and curves into `out`.
pub fn cmd_reproduce(
    target: ReproduceTarget,
    split: &Split,
    base: &jacreg::TrainConfig,
    curve_log_every: usize,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<String, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut cache = ModelCache::default();
    let mut summary = String::new();
    let tables: &[TableId] = match target {
        ReproduceTarget::T1 => &[TableId::T1],
        ReproduceTarget::T2 => &[TableId::T2],
        ReproduceTarget::Fig1 => &[],
        ReproduceTarget::All => &[TableId::T1, TableId::T2],
    };
    for &id in tables {
        let spec = table_spec(id);
        let points = run_table(split, &spec, base, &mut cache, |p| {
            progress(&format!(
                "{id:?} λ̃={}: jac={:.2} test_std={:.1}% test_rob={:.1}%",
                p.effective_lambda, p.jac_norm, p.test_std, p.test_rob
            ))
        })?;
        let md = table_markdown(&spec, &points);
        let stem = format!("{id:?}").to_lowercase();
        write_file(&out.join(format!("{stem}.md")), &md)?;
        write_file(&out.join(format!("{stem}.csv")), table_csv(&points))?;
        let _ = writeln!(summary, "{id:?}\n{md}");
    }
    if matches!(target, ReproduceTarget::Fig1 | ReproduceTarget::All) {
        let logs = run_curve(split, base, curve_log_every)?;
        write_file(&out.join("fig1.csv"), curve_csv(&logs))?;
        let _ = writeln!(
            summary,
            "Fig1: {} logged epochs, {} of {} points with PGD loss above the surrogate",
            logs.len(),
            dominance_violations(&logs),
            2 * logs.len()
        );
    }
    Ok(summary)
}
