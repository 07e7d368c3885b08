//! The MNIST experiment grid: two λ̃ sweeps (ℓ2 and ℓ∞) and the training
//! curve comparing the surrogate loss with the PGD loss.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use jacreg::trainer::{train, EpochLog, TrainOutcome};
use jacreg::{evaluate, AttackConfig, Geometry, MlpParams, PenaltyNorm, RegConfig, TrainConfig};

use crate::config::Split;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TableId {
    /// ℓ2 attacks, ε = 0.5, Frobenius penalty.
    T1,
    /// ℓ∞ attacks, ε = 0.03, ℓ1,1 penalty.
    T2,
}

/// Reference values for one λ̃ of a sweep, accuracies in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceColumn {
    pub effective_lambda: f64,
    pub jac_norm: f64,
    pub train_std: f64,
    pub train_rob: f64,
    pub test_std: f64,
    pub test_rob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableSpec {
    pub id: TableId,
    pub geometry: Geometry,
    pub epsilon: f64,
    pub reference: [ReferenceColumn; 3],
}

const fn col(effective_lambda: f64, jac_norm: f64, acc: [f64; 4]) -> ReferenceColumn {
    ReferenceColumn {
        effective_lambda,
        jac_norm,
        train_std: acc[0],
        train_rob: acc[1],
        test_std: acc[2],
        test_rob: acc[3],
    }
}

pub fn table_spec(id: TableId) -> TableSpec {
    match id {
        TableId::T1 => TableSpec {
            id,
            geometry: Geometry::L2,
            epsilon: 0.5,
            reference: [
                col(0.0, 1280.0, [100.0, 81.8, 89.5, 69.2]),
                col(0.01, 10.3, [100.0, 100.0, 93.3, 86.7]),
                col(0.1, 3.1, [99.4, 98.9, 93.6, 87.6]),
            ],
        },
        TableId::T2 => TableSpec {
            id,
            geometry: Geometry::Linf,
            epsilon: 0.03,
            reference: [
                col(0.0, 2289.0, [100.0, 84.7, 89.5, 70.3]),
                col(0.001, 138.9, [100.0, 100.0, 92.7, 87.2]),
                col(0.005, 76.7, [100.0, 99.7, 92.8, 88.7]),
            ],
        },
    }
}

/// Measured counterpart of a [`ReferenceColumn`], accuracies in percent.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub effective_lambda: f64,
    /// Test-set mean of the regime-matched Jacobian norm.
    pub jac_norm: f64,
    pub train_jac_norm: f64,
    pub train_std: f64,
    pub train_rob: f64,
    pub test_std: f64,
    pub test_rob: f64,
    pub r_theta: f64,
}

fn penalty_of(geometry: Geometry) -> PenaltyNorm {
    geometry.matched_penalty()
}

/// Training config for one grid entry; the caller's `base` supplies
/// everything but the regularizer.
pub fn grid_config(base: &TrainConfig, geometry: Geometry, epsilon: f64, effective_lambda: f64) -> Result<TrainConfig, CliError> {
    let reg = RegConfig::from_effective(penalty_of(geometry), epsilon, effective_lambda)?;
    Ok(TrainConfig { reg, ..base.clone() })
}

/// Trained models keyed by regularizer. The unregularized model is shared
/// by both tables since its training does not depend on the geometry.
#[derive(Default)]
pub struct ModelCache {
    models: HashMap<String, Arc<TrainOutcome<f64>>>,
}

fn cache_key(cfg: &TrainConfig) -> String {
    if cfg.reg.penalty_weight() == 0.0 {
        format!("plain/seed{}", cfg.seed)
    } else {
        format!("{:?}/{}/{}/seed{}", cfg.reg.norm, cfg.reg.epsilon, cfg.reg.lambda, cfg.seed)
    }
}

impl ModelCache {
    pub fn get_or_train(&mut self, split: &Split, cfg: &TrainConfig) -> Result<Arc<TrainOutcome<f64>>, CliError> {
        let key = cache_key(cfg);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let out = Arc::new(train(&split.train, &split.test, cfg, None)?);
        self.models.insert(key, out.clone());
        Ok(out)
    }
}

pub fn measure(params: &MlpParams<f64>, split: &Split, geometry: Geometry, effective_lambda: f64) -> Result<GridPoint, CliError> {
    let attack = AttackConfig::default_for(geometry);
    let reg = RegConfig::unregularized(penalty_of(geometry));
    let tr = evaluate(params, &split.train, &reg, Some(&attack))?;
    let te = evaluate(params, &split.test, &reg, Some(&attack))?;
    let pct = |v: f64| 100.0 * v;
    Ok(GridPoint {
        effective_lambda,
        jac_norm: te.jac_mean(reg.norm),
        train_jac_norm: tr.jac_mean(reg.norm),
        train_std: pct(tr.acc),
        train_rob: pct(tr.robust.expect("attack given").robust_accuracy),
        test_std: pct(te.acc),
        test_rob: pct(te.robust.expect("attack given").robust_accuracy),
        r_theta: params.frobenius_total(),
    })
}

/// Trains (or reuses) the three models of a table and measures them.
pub fn run_table(
    split: &Split,
    spec: &TableSpec,
    base: &TrainConfig,
    cache: &mut ModelCache,
    mut progress: impl FnMut(&GridPoint),
) -> Result<Vec<GridPoint>, CliError> {
    let mut points = Vec::with_capacity(3);
    for reference in &spec.reference {
        let cfg = grid_config(base, spec.geometry, spec.epsilon, reference.effective_lambda)?;
        let model = cache.get_or_train(split, &cfg)?;
        let point = measure(&model.params, split, spec.geometry, reference.effective_lambda)?;
        progress(&point);
        points.push(point);
    }
    Ok(points)
}

/// Markdown table with measured values first and reference values in
/// parentheses.
pub fn table_markdown(spec: &TableSpec, points: &[GridPoint]) -> String {
    let norm = match spec.geometry {
        Geometry::L2 => "‖J‖²_F",
        Geometry::Linf => "‖J‖₁,₁",
    };
    let mut s = String::new();
    let _ = writeln!(s, "| Effective lambda | Jacobian norm ({norm}) | Train standard | Train robust | Test standard | Test robust |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for (p, r) in points.iter().zip(&spec.reference) {
        let _ = writeln!(
            s,
            "| {} | {:.1} ({}) | {:.1}% ({}%) | {:.1}% ({}%) | {:.1}% ({}%) | {:.1}% ({}%) |",
            p.effective_lambda,
            p.jac_norm,
            r.jac_norm,
            p.train_std,
            r.train_std,
            p.train_rob,
            r.train_rob,
            p.test_std,
            r.test_std,
            p.test_rob,
            r.test_rob
        );
    }
    s
}

pub const TABLE_CSV_HEADER: &str =
    "effective_lambda,jac_norm,train_jac_norm,train_std,train_rob,test_std,test_rob,r_theta";

pub fn table_csv(points: &[GridPoint]) -> String {
    let mut s = format!("{TABLE_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.effective_lambda, p.jac_norm, p.train_jac_norm, p.train_std, p.train_rob, p.test_std, p.test_rob, p.r_theta
        );
    }
    s
}

/// Penalty weight λ of the curve run; with ε = 0.5 this is λ̃ = 0.5.
pub const CURVE_LAMBDA: f64 = 1.0;
pub const CURVE_EPSILON: f64 = 0.5;

/// ℓ2-matched run logging surrogate and PGD losses every `log_every`
/// epochs. PGD starts at the clean input.
pub fn curve_configs(base: &TrainConfig, log_every: usize) -> Result<(TrainConfig, AttackConfig), CliError> {
    let reg = RegConfig::new(PenaltyNorm::FrobSq, CURVE_EPSILON, CURVE_LAMBDA)?;
    let cfg = TrainConfig {
        reg,
        log_every,
        ..base.clone()
    };
    let attack = AttackConfig {
        epsilon: CURVE_EPSILON,
        random_start: false,
        ..AttackConfig::l2_default()
    };
    Ok((cfg, attack))
}

pub fn run_curve(split: &Split, base: &TrainConfig, log_every: usize) -> Result<Vec<EpochLog>, CliError> {
    let (cfg, attack) = curve_configs(base, log_every)?;
    Ok(train(&split.train, &split.test, &cfg, Some(&attack))?.logs)
}

pub const CURVE_CSV_HEADER: &str = "epoch,train_surrogate,train_adv_loss,test_surrogate,test_adv_loss";

pub fn curve_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{CURVE_CSV_HEADER}\n");
    for l in logs {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            l.epoch,
            l.train_surrogate,
            opt(l.robust_loss),
            l.test_surrogate,
            opt(l.robust_test_loss)
        );
    }
    s
}

/// Logged points where the PGD loss exceeds the surrogate, train and test
/// counted separately, out of `2·logs.len()`.
pub fn dominance_violations(logs: &[EpochLog]) -> usize {
    logs.iter()
        .map(|l| {
            let train = l.robust_loss.is_some_and(|r| r > l.train_surrogate);
            let test = l.robust_test_loss.is_some_and(|r| r > l.test_surrogate);
            usize::from(train) + usize::from(test)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_grids() {
        let t1 = table_spec(TableId::T1);
        let l: Vec<f64> = t1.reference.iter().map(|c| c.effective_lambda).collect();
        assert_eq!(l, vec![0.0, 0.01, 0.1]);
        assert_eq!((t1.geometry, t1.epsilon), (Geometry::L2, 0.5));
        let t2 = table_spec(TableId::T2);
        let l: Vec<f64> = t2.reference.iter().map(|c| c.effective_lambda).collect();
        assert_eq!(l, vec![0.0, 0.001, 0.005]);
        assert_eq!((t2.geometry, t2.epsilon), (Geometry::Linf, 0.03));
    }

    #[test]
    fn unregularized_models_share_a_key() {
        let base = TrainConfig::reference_default(RegConfig::unregularized(PenaltyNorm::FrobSq), 3);
        let a = grid_config(&base, Geometry::L2, 0.5, 0.0).unwrap();
        let b = grid_config(&base, Geometry::Linf, 0.03, 0.0).unwrap();
        assert_eq!(cache_key(&a), cache_key(&b));
        let c = grid_config(&base, Geometry::L2, 0.5, 0.01).unwrap();
        assert_ne!(cache_key(&a), cache_key(&c));
    }
}
