//! Mini-batch SGD with heavy-ball momentum on the Jacobian-regularized
//! objective, plus the evaluation pass used for logging.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{robust_metrics, AttackConfig, RobustMetrics};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::jacobian::{batch_jacobian, PenaltyNorm};
use crate::losses::{cross_entropy_batch, RegConfig};
use crate::network::{backprop_batch, forward_batch, init_params, MlpParams, ParamGrad, ScaleRule};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Rng};

/// Samples per gradient work item. Fixed so the reduction order, and with
/// it every bit of the result, is independent of the worker count.
pub const GRAD_CHUNK: usize = 100;
/// Samples per evaluation work item.
pub const EVAL_CHUNK: usize = 250;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub reg: RegConfig,
    pub seed: u64,
    /// Evaluate and log every this many epochs; the last epoch is always
    /// logged. Zero logs only the last epoch.
    pub log_every: usize,
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub init: ScaleRule,
}

impl TrainConfig {
    /// 1000 epochs of full-batch (n = 1000) momentum SGD on a network with
    /// four hidden layers of width 100, He-initialized.
    pub fn reference_default(reg: RegConfig, seed: u64) -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 1000,
            learning_rate: 0.1,
            momentum: 0.9,
            reg,
            seed,
            log_every: 100,
            hidden: vec![100; 4],
            init: ScaleRule::He,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.learning_rate.is_infinite() {
            return Err(Error::Domain(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Domain(format!("hidden widths {:?} contain zero", self.hidden)));
        }
        Ok(())
    }

    pub fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(&self.hidden);
        dims.push(output);
        dims
    }
}

/// One logged epoch. Metrics are evaluated on the full train and test sets
/// at the parameters reached at the end of the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_surrogate: f64,
    /// Mean of the regime-matched Jacobian norm.
    pub train_jac_norm: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub robust_train_acc: Option<f64>,
    pub robust_test_acc: Option<f64>,
    /// Mean PGD loss on the training set.
    pub robust_loss: Option<f64>,
    pub test_loss: f64,
    pub test_surrogate: f64,
    /// Mean PGD loss on the test set.
    pub robust_test_loss: Option<f64>,
}

pub const LOG_CSV_HEADER: &str =
    "epoch,train_loss,train_surrogate,train_jac_norm,train_acc,test_acc,robust_train_acc,robust_test_acc,robust_loss";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_surrogate,
            self.train_jac_norm,
            self.train_acc,
            self.test_acc,
            opt(self.robust_train_acc),
            opt(self.robust_test_acc),
            opt(self.robust_loss)
        )
    }
}

pub fn write_log_csv(out: &mut impl Write, logs: &[EpochLog]) -> std::io::Result<()> {
    writeln!(out, "{LOG_CSV_HEADER}")?;
    for log in logs {
        writeln!(out, "{}", log.csv_row())?;
    }
    Ok(())
}

/// Batch means of the loss and the surrogate, with the gradient of the
/// surrogate mean.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub loss: T,
    pub surrogate: T,
    pub grad: ParamGrad<T>,
}

struct ChunkSums<T> {
    loss: T,
    penalty: T,
    grad: ParamGrad<T>,
}

fn chunk_objective<T: Scalar>(
    params: &MlpParams<T>,
    xs: &Matrix<T>,
    ys: &[usize],
    reg: &RegConfig,
) -> Result<ChunkSums<T>> {
    let trace = forward_batch(params, xs)?;
    let (losses, dlogits) = cross_entropy_batch(&trace.logits, ys)?;
    let (mut grad, _) = backprop_batch(params, &trace, &dlogits, false)?;
    let loss = losses.into_iter().sum();
    let weight = reg.penalty_weight();
    let mut penalty = T::zero();
    if weight > 0.0 {
        let w = T::lit(weight);
        let bj = batch_jacobian(params, &trace)?;
        penalty = (0..xs.rows()).map(|i| bj.norm(i, reg.norm)).sum::<T>() * w;
        let pg = bj.penalty_grad(params, &trace, reg.norm, w)?;
        grad.axpy(T::one(), &pg)?;
    }
    Ok(ChunkSums { loss, penalty, grad })
}

/// Mean cross entropy plus `weight · mean ‖J‖` over the batch, and its
/// gradient (penalty subgradient for the ℓ1,1 norm).
pub fn objective_grad<T: Scalar>(
    params: &MlpParams<T>,
    xs: &Matrix<T>,
    ys: &[usize],
    reg: &RegConfig,
) -> Result<Objective<T>> {
    let n = xs.rows();
    if n == 0 {
        return Err(Error::Domain("objective_grad on an empty batch".into()));
    }
    if ys.len() != n {
        return Err(Error::shape("objective_grad labels", n, ys.len()));
    }
    let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + GRAD_CHUNK).min(n);
            chunk_objective(params, &xs.row_range(s, e), &ys[s..e], reg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let mut total = parts.next().expect("n > 0 gives one chunk");
    for p in parts {
        total.loss += p.loss;
        total.penalty += p.penalty;
        total.grad.axpy(T::one(), &p.grad)?;
    }
    let inv = T::one() / T::lit(n as f64);
    total.grad.scale(inv);
    let loss = total.loss * inv;
    Ok(Objective {
        loss,
        surrogate: loss + total.penalty * inv,
        grad: total.grad,
    })
}

/// Clean metrics of a model on a dataset, optionally with PGD metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub acc: f64,
    pub loss_mean: f64,
    pub surrogate_mean: f64,
    pub mean_frob_sq: f64,
    pub mean_l11: f64,
    pub robust: Option<RobustMetrics>,
}

impl Evaluation {
    pub fn jac_mean(&self, kind: PenaltyNorm) -> f64 {
        match kind {
            PenaltyNorm::FrobSq => self.mean_frob_sq,
            PenaltyNorm::L11 => self.mean_l11,
        }
    }
}

pub fn evaluate<T: Scalar>(
    params: &MlpParams<T>,
    ds: &Dataset<T>,
    reg: &RegConfig,
    attack: Option<&AttackConfig>,
) -> Result<Evaluation> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Domain("evaluate on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_CHUNK).min(n);
            let ys = &ds.ys[s..e];
            let trace = forward_batch(params, &ds.xs.row_range(s, e))?;
            let (losses, _) = cross_entropy_batch(&trace.logits, ys)?;
            let bj = batch_jacobian(params, &trace)?;
            let mut acc = [0.0f64; 4];
            for (i, &y) in ys.iter().enumerate() {
                if trace.logits.row_vector(i).argmax() == y {
                    acc[0] += 1.0;
                }
                acc[1] += losses[i].as_f64();
                acc[2] += bj.frob_sq(i).as_f64();
                acc[3] += bj.l11(i).as_f64();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = [0.0f64; 4];
    for p in parts {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    let nf = n as f64;
    let (acc, loss_mean, mean_frob_sq, mean_l11) = (sums[0] / nf, sums[1] / nf, sums[2] / nf, sums[3] / nf);
    let penalty = match reg.norm {
        PenaltyNorm::FrobSq => mean_frob_sq,
        PenaltyNorm::L11 => mean_l11,
    };
    let weight = reg.penalty_weight();
    let surrogate_mean = if weight > 0.0 { loss_mean + weight * penalty } else { loss_mean };
    let robust = attack.map(|cfg| robust_metrics(params, ds, cfg)).transpose()?;
    Ok(Evaluation {
        acc,
        loss_mean,
        surrogate_mean,
        mean_frob_sq,
        mean_l11,
        robust,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: MlpParams<T>,
    pub logs: Vec<EpochLog>,
}

/// Trains from the seeded initialization described by `cfg`.
pub fn train<T: Scalar>(
    train_ds: &Dataset<T>,
    test_ds: &Dataset<T>,
    cfg: &TrainConfig,
    attack_for_logging: Option<&AttackConfig>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let dims = cfg.dims(train_ds.stats.d, train_ds.stats.k);
    let params = init_params(&dims, &mut Rng::with_stream(cfg.seed, STREAM_INIT), cfg.init)?;
    train_from(params, train_ds, test_ds, cfg, attack_for_logging)
}

/// Trains starting from `params`. The weights follow `v ← μv − ηg`,
/// `θ ← θ + v` with `v₀ = 0`.
pub fn train_from<T: Scalar>(
    mut params: MlpParams<T>,
    train_ds: &Dataset<T>,
    test_ds: &Dataset<T>,
    cfg: &TrainConfig,
    attack_for_logging: Option<&AttackConfig>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = train_ds.len();
    if n == 0 {
        return Err(Error::Domain("training set is empty".into()));
    }
    if let Some(a) = attack_for_logging {
        a.validate()?;
    }
    let mut shuffle_rng = Rng::with_stream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = ParamGrad::zeros_like(&params);
    let (mu, eta) = (T::lit(cfg.momentum), T::lit(cfg.learning_rate));
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let xs = train_ds.xs.select_rows(batch);
            let ys: Vec<usize> = batch.iter().map(|&i| train_ds.ys[i]).collect();
            let obj = objective_grad(&params, &xs, &ys, &cfg.reg)?;
            if !obj.surrogate.is_finite() || !obj.grad.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("objective {} with gradient norm {}", obj.surrogate, obj.grad.norm()),
                });
            }
            velocity.scale(mu);
            velocity.axpy(-eta, &obj.grad)?;
            params.apply_update(&velocity, T::one())?;
        }
        let logged = epoch == cfg.epochs || (cfg.log_every > 0 && epoch % cfg.log_every == 0);
        if logged {
            logs.push(epoch_log(epoch, &params, train_ds, test_ds, &cfg.reg, attack_for_logging)?);
        }
    }
    Ok(TrainOutcome { params, logs })
}

fn epoch_log<T: Scalar>(
    epoch: usize,
    params: &MlpParams<T>,
    train_ds: &Dataset<T>,
    test_ds: &Dataset<T>,
    reg: &RegConfig,
    attack: Option<&AttackConfig>,
) -> Result<EpochLog> {
    let tr = evaluate(params, train_ds, reg, attack)?;
    let te = evaluate(params, test_ds, reg, attack)?;
    if !tr.loss_mean.is_finite() {
        return Err(Error::Diverged {
            epoch,
            detail: format!("train loss {}", tr.loss_mean),
        });
    }
    Ok(EpochLog {
        epoch,
        train_loss: tr.loss_mean,
        train_surrogate: tr.surrogate_mean,
        train_jac_norm: tr.jac_mean(reg.norm),
        train_acc: tr.acc,
        test_acc: te.acc,
        robust_train_acc: tr.robust.map(|r| r.robust_accuracy),
        robust_test_acc: te.robust.map(|r| r.robust_accuracy),
        robust_loss: tr.robust.map(|r| r.robust_loss_mean),
        test_loss: te.loss_mean,
        test_surrogate: te.surrogate_mean,
        robust_test_loss: te.robust.map(|r| r.robust_loss_mean),
    })
}
