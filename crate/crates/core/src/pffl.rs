//! End-to-end fair federated training: outer dual epochs around FedAvg
//! rounds, the averaged iterate, and the final feasibility gate.

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dataset::FederatedSplit;
use crate::dual::{default_eta_theta, lambda_from_theta, DualState};
use crate::error::{FairFedError, Result};
use crate::fed_engine::{
    run_epoch, BatchMode, BatchSampler, PfflObjective, RoundConfig, RoundView, ScheduleState,
};
use crate::linear_model::{cross_entropy, LossSpec, ModelParams};
use crate::metrics::{gap, saddle_value, saddle_value_and_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfflConfig {
    /// Outer epochs `E`.
    pub epochs: usize,
    pub round: RoundConfig,
    pub beta: f64,
    /// Dual budget `B`.
    pub bound: f64,
    /// Saddle-point accuracy target `ν`.
    pub nu: f64,
    /// Bound `M` on the risk used by the gate.
    pub m_bound: f64,
    /// `None` selects `ν / (2ρ²B)`.
    pub eta_theta: Option<f64>,
    pub seed: u64,
    pub loss: LossSpec,
    /// When false the gate is reported but never nulls the model.
    pub gate: bool,
    /// Experimental: average only the last `k` epochs' iterates.
    pub tail_average: Option<usize>,
    pub record_rounds: bool,
    pub record_iterates: bool,
    /// Evaluate the duality gap of the running averages after every epoch.
    pub record_gap: Option<f64>,
}

impl Default for PfflConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            round: RoundConfig {
                local_steps: 1,
                rounds: 10,
                schedule: crate::fed_engine::StepSchedule::Constant { eta: 0.5 },
                batch: BatchMode::Full,
            },
            beta: 1.0,
            bound: 1.0,
            nu: 0.05,
            m_bound: std::f64::consts::LN_2,
            eta_theta: None,
            seed: 0,
            loss: LossSpec::logistic(0.01, true),
            gate: true,
            tail_average: None,
            record_rounds: false,
            record_iterates: false,
            record_gap: None,
        }
    }
}

impl PfflConfig {
    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(FairFedError::Config("epochs must be ≥ 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FairFedError::Config(format!(
                "beta must be ≥ 0, got {}",
                self.beta
            )));
        }
        for (name, v) in [("B", self.bound), ("nu", self.nu), ("M", self.m_bound)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FairFedError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(eta) = self.eta_theta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(FairFedError::Config(format!(
                    "eta_theta must be positive, got {eta}"
                )));
            }
        }
        if self.tail_average == Some(0) {
            return Err(FairFedError::Config("tail_average must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Agnostic minmax weighting: `β = 0`, `B = 1`, one round per epoch, no
    /// gate (the ζ = 0 threshold is vacuous). Constraints must be built with
    /// `ConstraintKind::MinMax`.
    pub fn fedminmax_preset(mut self) -> Self {
        self.beta = 0.0;
        self.bound = 1.0;
        self.round.rounds = 1;
        self.gate = false;
        self
    }

    pub fn total_rounds(&self) -> Result<usize> {
        self.epochs
            .checked_mul(self.round.rounds)
            .ok_or_else(|| FairFedError::Config("E·T overflows".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Feasible,
    Infeasible,
    /// Gate disabled by the method; the model is always returned.
    Ungated,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Feasible => "feasible",
            Verdict::Infeasible => "infeasible",
            Verdict::Ungated => "ungated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub verdict: Verdict,
    /// `max_z r_z(w̄)_+`.
    pub max_violation: f64,
    /// `(M + 2ν) / B`.
    pub threshold: f64,
}

pub fn check_gate(r_bar: &[f64], m_bound: f64, nu: f64, bound: f64) -> GateOutcome {
    let max_violation = r_bar.iter().fold(0.0f64, |acc, &r| acc.max(r));
    let threshold = (m_bound + 2.0 * nu) / bound;
    let verdict = if max_violation <= threshold {
        Verdict::Feasible
    } else {
        Verdict::Infeasible
    };
    GateOutcome {
        verdict,
        max_violation,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Logits in force during the epoch.
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Constraint values at the epoch's last iterate, used for the ascent.
    pub r_epoch: Vec<f64>,
    /// `G(w^T; λ)` at the epoch's last iterate.
    pub g_value: f64,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub round: usize,
    pub global_step: u64,
    pub eta: f64,
    pub g_value: f64,
    pub grad_norm: f64,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    /// `Some(w̄)` unless the gate rejected it.
    pub model: Option<ModelParams>,
    pub w_bar: ModelParams,
    pub verdict: Verdict,
    pub max_violation: f64,
    pub threshold: f64,
    /// `r(w̄)` on the training data.
    pub r_bar: Vec<f64>,
    /// `λ̄`: mean of the per-epoch multipliers (each held for `T` rounds).
    pub lambda_bar: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub bound: f64,
    pub eta_theta: f64,
    pub rho: f64,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    /// Every post-aggregation iterate, when recorded.
    pub iterates: Option<Vec<ModelParams>>,
}

impl RunResult {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `λ̄` recomputed from the logged logits.
    pub fn lambda_bar_from_trace(&self) -> Option<Vec<f64>> {
        average_lambda(self.epochs.iter().map(|e| e.theta.as_slice()), self.bound)
    }

    /// Per-epoch trace as CSV: epoch, G, then θ_z, λ_z and r_z columns.
    pub fn write_epoch_trace(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let z = self.r_bar.len();
        let mut header = vec![
            "epoch".to_string(),
            "g_value".to_string(),
            "gap".to_string(),
        ];
        for prefix in ["theta", "lambda", "r"] {
            header.extend((0..z).map(|i| format!("{prefix}_{i}")));
        }
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.g_value.to_string(),
                e.gap.map(|g| g.to_string()).unwrap_or_default(),
            ];
            for v in e.theta.iter().chain(&e.lambda).chain(&e.r_epoch) {
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-round trace: epoch, round, global_step, eta, G, ‖∇G‖, r_z.
    pub fn write_round_trace(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let z = self.r_bar.len();
        let mut header: Vec<String> = [
            "epoch",
            "round",
            "global_step",
            "eta",
            "g_value",
            "grad_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..z).map(|i| format!("r_{i}")));
        w.write_record(&header)?;
        for r in &self.rounds {
            let mut row = vec![
                r.epoch.to_string(),
                r.round.to_string(),
                r.global_step.to_string(),
                r.eta.to_string(),
                r.g_value.to_string(),
                r.grad_norm.to_string(),
            ];
            row.extend(r.r.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn average_lambda<'a>(
    thetas: impl Iterator<Item = &'a [f64]>,
    bound: f64,
) -> Option<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for theta in thetas {
        let l = lambda_from_theta(theta, bound);
        match sum.as_mut() {
            None => sum = Some(l),
            Some(s) => s.iter_mut().zip(&l).for_each(|(a, b)| *a += b),
        }
        n += 1;
    }
    sum.map(|s| s.into_iter().map(|v| v / n as f64).collect())
}

/// Largest per-group unregularized loss at `w0`: a data-driven suggestion
/// for `M`.
pub fn suggest_m_bound(split: &FederatedSplit, w0: &ModelParams) -> f64 {
    let mut sums = vec![0.0; split.num_groups()];
    for e in split.examples() {
        sums[e.a] += cross_entropy(w0, &e.x, e.y);
    }
    sums.iter()
        .zip(split.group_counts())
        .filter(|(_, &m)| m > 0)
        .map(|(s, &m)| s / m as f64)
        .fold(0.0, f64::max)
}

pub fn run(split: &FederatedSplit, cs: &ConstraintSet, cfg: &PfflConfig) -> Result<RunResult> {
    run_from(
        split,
        cs,
        cfg,
        &ModelParams::zeros(split.num_features(), cfg.loss.bias),
    )
}

pub fn run_from(
    split: &FederatedSplit,
    cs: &ConstraintSet,
    cfg: &PfflConfig,
    w0: &ModelParams,
) -> Result<RunResult> {
    cfg.validate()?;
    if cs.num_clients() != split.num_clients() {
        return Err(FairFedError::Config(format!(
            "constraints were built for {} clients but the split has {}",
            cs.num_clients(),
            split.num_clients()
        )));
    }
    let total = cfg.total_rounds()?;
    let eta_theta = match cfg.eta_theta {
        Some(eta) => eta,
        None => default_eta_theta(cfg.nu, cs.rho(), cfg.bound)?,
    };
    let mut dual = DualState::new(cs.len(), cfg.bound, eta_theta)?;
    let mut sched = ScheduleState::for_config(&cfg.round, split, &cfg.loss, cfg.beta, cfg.bound)?;
    let mut sampler = BatchSampler::new(seeded_batch(cfg), split.num_clients());
    let tail_from = cfg.tail_average.map_or(0, |k| cfg.epochs.saturating_sub(k));

    let mut w = w0.clone();
    let mut w_sum = vec![0.0; w.dim()];
    let mut averaged = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut rounds = Vec::new();
    let mut iterates = cfg.record_iterates.then(|| Vec::with_capacity(total));

    for epoch in 0..cfg.epochs {
        let theta = dual.theta().to_vec();
        let lambda = dual.lambda();
        let objective = PfflObjective {
            beta: cfg.beta,
            spec: &cfg.loss,
            constraints: cs,
            lambda: &lambda,
        };
        let mut record_round = |view: RoundView<'_>| {
            let (g_value, grad) =
                saddle_value_and_grad(split, cs, &cfg.loss, cfg.beta, view.w, &lambda);
            rounds.push(RoundRecord {
                epoch,
                round: view.round,
                global_step: view.global_step,
                eta: view.eta,
                g_value,
                grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
                r: cs.eval_global(split, view.w),
            });
        };
        let observer: Option<&mut dyn FnMut(RoundView<'_>)> = if cfg.record_rounds {
            Some(&mut record_round)
        } else {
            None
        };
        let out = run_epoch(
            split,
            &w,
            &objective,
            &cfg.round,
            &mut sched,
            &mut sampler,
            observer,
        )?;

        if epoch >= tail_from {
            for it in &out.iterates {
                for (s, v) in w_sum.iter_mut().zip(&it.w) {
                    *s += v;
                }
            }
            averaged += out.iterates.len();
        }
        w = out.last().clone();
        let g_value = saddle_value(split, cs, &cfg.loss, cfg.beta, &w, &lambda);
        if let Some(its) = iterates.as_mut() {
            its.extend(out.iterates);
        }
        dual.ascend(&out.r_epoch);

        let mut record = EpochRecord {
            epoch,
            theta,
            lambda,
            r_epoch: out.r_epoch,
            g_value,
            gap: None,
        };
        if let Some(tol) = cfg.record_gap {
            epochs.push(record.clone());
            let w_running = ModelParams::from_vec(
                w_sum.iter().map(|s| s / averaged.max(1) as f64).collect(),
                w.bias,
            );
            let lambda_running =
                average_lambda(epochs.iter().map(|e| e.theta.as_slice()), cfg.bound)
                    .unwrap_or_default();
            let est = gap(
                &w_running,
                &lambda_running,
                split,
                cs,
                &cfg.loss,
                cfg.beta,
                cfg.bound,
                tol,
            )?;
            record.gap = Some(est.gap);
            epochs.pop();
        }
        epochs.push(record);
    }

    let w_bar = ModelParams::from_vec(w_sum.iter().map(|s| s / averaged as f64).collect(), w.bias);
    let r_bar = cs.eval_global(split, &w_bar);
    let mut outcome = check_gate(&r_bar, cfg.m_bound, cfg.nu, cfg.bound);
    if !cfg.gate {
        outcome.verdict = Verdict::Ungated;
    }
    let lambda_bar =
        average_lambda(epochs.iter().map(|e| e.theta.as_slice()), cfg.bound).unwrap_or_default();
    Ok(RunResult {
        method: "pffl".into(),
        model: (outcome.verdict != Verdict::Infeasible).then(|| w_bar.clone()),
        w_bar,
        verdict: outcome.verdict,
        max_violation: outcome.max_violation,
        threshold: outcome.threshold,
        r_bar,
        lambda_bar,
        final_theta: dual.theta().to_vec(),
        bound: cfg.bound,
        eta_theta,
        rho: cs.rho(),
        epochs,
        rounds,
        iterates,
    })
}

pub(crate) fn seeded_batch(cfg: &PfflConfig) -> BatchMode {
    match cfg.round.batch {
        BatchMode::Full => BatchMode::Full,
        BatchMode::Minibatch { size, seed } => BatchMode::Minibatch {
            size,
            seed: seed.wrapping_add(cfg.seed),
        },
    }
}

/// Heuristic default for the unobservable convergence constant `C`.
pub const DEFAULT_C_HAT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// Real-valued lower bound on `T`.
    pub t_min: f64,
    /// Smallest integer `T` satisfying the bound.
    pub rounds: u64,
    pub eta_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub nu: f64,
    pub rho: f64,
    pub bound: f64,
    pub epochs: usize,
    pub kappa: f64,
    pub c_hat: f64,
    pub gamma: f64,
    /// Number of constraints `Z`.
    pub num_constraints: usize,
}

/// Rounds per epoch sufficient for a `ν`-approximate saddle point:
/// `T ≥ [4ρ²B² log(Z+1)(γ+1)/(νE) + 2κC(γ−1)] / [ν(γ+1) − 2κC]`.
pub fn plan_rounds(p: &PlanInputs) -> Result<RoundPlan> {
    let eta_theta = default_eta_theta(p.nu, p.rho, p.bound)?;
    if p.epochs == 0 {
        return Err(FairFedError::Planning("E must be ≥ 1".into()));
    }
    let denom = p.nu * (p.gamma + 1.0) - 2.0 * p.kappa * p.c_hat;
    if denom <= 0.0 {
        return Err(FairFedError::Planning(format!(
            "ν(γ+1) = {:.4} does not exceed 2κC = {:.4}; the bound is vacuous, increase ν",
            p.nu * (p.gamma + 1.0),
            2.0 * p.kappa * p.c_hat
        )));
    }
    let dual_term = 4.0
        * p.rho.powi(2)
        * p.bound.powi(2)
        * ((p.num_constraints + 1) as f64).ln()
        * (p.gamma + 1.0)
        / (p.nu * p.epochs as f64);
    let primal_term = 2.0 * p.kappa * p.c_hat * (p.gamma - 1.0);
    let t_min = (dual_term + primal_term) / denom;
    Ok(RoundPlan {
        t_min,
        rounds: t_min.ceil().max(1.0) as u64,
        eta_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{BuildOptions, ConstraintKind};
    use crate::dataset::make_synthetic_hetero;
    use crate::fed_engine::StepSchedule;
    use approx::assert_relative_eq;

    #[test]
    fn gate_arithmetic() {
        let g = check_gate(&[-0.3, -0.1], 1.0, 0.1, 10.0);
        assert_eq!(g.verdict, Verdict::Feasible);
        assert_eq!(g.max_violation, 0.0);

        let g = check_gate(&[0.2, -0.1], 1.0, 0.1, 10.0);
        assert_relative_eq!(g.threshold, 0.12, epsilon = 1e-15);
        assert_eq!(g.verdict, Verdict::Infeasible);

        let g = check_gate(&[0.2, -0.1], 1.0, 0.1, 5.0);
        assert_relative_eq!(g.threshold, 0.24, epsilon = 1e-15);
        assert_eq!(g.verdict, Verdict::Feasible);
    }

    /// Written independently of `plan_rounds` from the closed form.
    #[allow(clippy::too_many_arguments)]
    fn t_bound(nu: f64, rho: f64, b: f64, z: f64, gamma: f64, kappa: f64, c: f64, e: f64) -> f64 {
        let lhs = 1.0 / (nu * (gamma + 1.0) - 2.0 * kappa * c);
        lhs * (4.0 * rho * rho * b * b * (z + 1.0).ln() * (gamma + 1.0) / (nu * e)
            + 2.0 * kappa * c * (gamma - 1.0))
    }

    #[test]
    fn plan_matches_reimplementation() {
        let inputs = PlanInputs {
            nu: 0.2,
            rho: 1.0,
            bound: 1.0,
            epochs: 10,
            kappa: 2.0,
            c_hat: 0.5,
            gamma: 16.0,
            num_constraints: 1,
        };
        let plan = plan_rounds(&inputs).unwrap();
        assert_relative_eq!(
            plan.t_min,
            t_bound(0.2, 1.0, 1.0, 1.0, 16.0, 2.0, 0.5, 10.0),
            max_relative = 1e-14
        );
        assert_relative_eq!(plan.t_min, 38.262_145_813_598_664, max_relative = 1e-12);
        assert_eq!(plan.rounds, 39);
        assert_relative_eq!(plan.eta_theta, default_eta_theta(0.2, 1.0, 1.0).unwrap());

        let doubled = plan_rounds(&PlanInputs {
            epochs: 20,
            ..inputs
        })
        .unwrap();
        let denom = 0.2 * 17.0 - 2.0;
        let first = |e: f64| 4.0 * 2f64.ln() * 17.0 / (0.2 * e) / denom;
        assert_relative_eq!(
            plan.t_min - doubled.t_min,
            first(10.0) - first(20.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(first(10.0), 2.0 * first(20.0));
    }

    #[test]
    fn plan_reports_vacuous_bound() {
        let inputs = PlanInputs {
            nu: 0.01,
            rho: 1.0,
            bound: 1.0,
            epochs: 10,
            kappa: 20.0,
            c_hat: 1.0,
            gamma: 160.0,
            num_constraints: 2,
        };
        assert!(matches!(
            plan_rounds(&inputs),
            Err(FairFedError::Planning(_))
        ));
    }

    fn small_problem() -> (FederatedSplit, PfflConfig) {
        let (_, split) = make_synthetic_hetero(3, 60, 3, 0.5, 8).unwrap();
        let cfg = PfflConfig {
            epochs: 5,
            round: RoundConfig {
                local_steps: 2,
                rounds: 4,
                schedule: StepSchedule::Constant { eta: 0.3 },
                batch: BatchMode::Full,
            },
            record_iterates: true,
            ..PfflConfig::default()
        };
        (split, cfg)
    }

    #[test]
    fn averaged_iterate_is_mean_of_all_iterates() {
        let (split, cfg) = small_problem();
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.5 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let res = run(&split, &cs, &cfg).unwrap();
        let its = res.iterates.as_ref().unwrap();
        assert_eq!(its.len(), 20);
        for j in 0..w0.dim() {
            let mean = its.iter().map(|m| m.w[j]).sum::<f64>() / its.len() as f64;
            assert_relative_eq!(res.w_bar.w[j], mean, epsilon = 1e-12);
        }
        let lb = res.lambda_bar_from_trace().unwrap();
        assert_eq!(lb, res.lambda_bar);
        assert!(res.lambda_bar.iter().sum::<f64>() <= cfg.bound);
    }

    #[test]
    fn no_constraints_is_plain_fedavg() {
        let (split, cfg) = small_problem();
        let cs = ConstraintSet::empty(split.num_clients(), split.num_groups());
        let res = run(&split, &cs, &cfg).unwrap();
        assert_eq!(res.verdict, Verdict::Feasible);
        assert!(res.model.is_some());
        assert!(res.r_bar.is_empty());
    }

    #[test]
    fn zero_threshold_with_huge_budget_returns_null() {
        let (split, mut cfg) = small_problem();
        cfg.bound = 1e4;
        cfg.round.schedule = StepSchedule::Constant { eta: 1e-4 };
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.0 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let res = run(&split, &cs, &cfg).unwrap();
        assert_eq!(res.verdict, Verdict::Infeasible);
        assert!(res.model.is_none());
        assert!(res.max_violation > res.threshold);
    }

    #[test]
    fn tail_average_uses_last_epochs_only() {
        let (split, mut cfg) = small_problem();
        cfg.tail_average = Some(2);
        let cs = ConstraintSet::empty(split.num_clients(), split.num_groups());
        let res = run(&split, &cs, &cfg).unwrap();
        let its = res.iterates.as_ref().unwrap();
        let mean = its[12..].iter().map(|m| m.w[0]).sum::<f64>() / 8.0;
        assert_relative_eq!(res.w_bar.w[0], mean, epsilon = 1e-12);
    }

    #[test]
    fn round_trace_and_json_round_trip() {
        let (split, mut cfg) = small_problem();
        cfg.record_rounds = true;
        cfg.record_gap = Some(1e-6);
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.5 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let res = run(&split, &cs, &cfg).unwrap();
        assert_eq!(res.rounds.len(), 20);
        assert_eq!(res.rounds.last().unwrap().global_step, 20);
        assert!(res.epochs.iter().all(|e| e.gap.is_some_and(|g| g > -1e-6)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        res.save_json(&path).unwrap();
        assert_eq!(RunResult::load_json(&path).unwrap(), res);
        res.write_epoch_trace(&dir.path().join("epochs.csv"))
            .unwrap();
        res.write_round_trace(&dir.path().join("rounds.csv"))
            .unwrap();
        let text = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn suggested_m_at_zero_is_log_two() {
        let (split, _) = small_problem();
        assert_relative_eq!(
            suggest_m_bound(&split, &ModelParams::zeros(3, true)),
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (split, cfg) = small_problem();
        let cs = ConstraintSet::empty(split.num_clients(), split.num_groups());
        for bad in [
            PfflConfig {
                epochs: 0,
                ..cfg.clone()
            },
            PfflConfig {
                bound: 0.0,
                ..cfg.clone()
            },
            PfflConfig {
                nu: -1.0,
                ..cfg.clone()
            },
            PfflConfig {
                eta_theta: Some(0.0),
                ..cfg.clone()
            },
        ] {
            assert!(matches!(
                run(&split, &cs, &bad),
                Err(FairFedError::Config(_))
            ));
        }
        let wrong_k = ConstraintSet::empty(7, 2);
        assert!(run(&split, &wrong_k, &cfg).is_err());
    }
}
