//! Re-checks a finished run's guarantees from the raw data.
//!
//! Nothing cached in the [`RunResult`] is trusted except `w̄` and the logged
//! logits: constraint values, the gate threshold, `λ̄` and the duality gap are
//! all recomputed. Each check records the measured quantity next to its
//! pass/fail flag, and an oracle failure in one check does not abort the
//! others.

use serde::{Deserialize, Serialize};

use crate::constraints::{BuildOptions, ConstraintSet};
use crate::dataset::FederatedSplit;
use crate::dual::lambda_from_theta;
use crate::error::Result;
use crate::fed_engine::{
    run_epoch, BatchMode, BatchSampler, PfflObjective, RoundConfig, ScheduleState, StepSchedule,
};
use crate::linear_model::{cross_entropy, smoothness_constants, ModelParams};
use crate::metrics::{gap, saddle_value_and_grad};
use crate::pffl::{check_gate, PfflConfig, RunResult, Verdict};

/// Slack allowed when re-evaluating the gate.
pub const GATE_SLACK: f64 = 1e-9;
/// Slack for the CBGL ⇒ BGL identity.
pub const IDENTITY_SLACK: f64 = 1e-12;
/// Steps compared in the GD-equivalence probe.
pub const GD_PROBE_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Check {
    /// True when the run claimed feasibility, i.e. the bound must hold.
    pub applies: bool,
    pub max_violation: f64,
    pub threshold: f64,
    /// `threshold − max_violation`.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub gap: Option<f64>,
    pub nu: f64,
    pub oracle_tol: f64,
    pub pass: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbglCheck {
    pub cbgl_feasible: bool,
    /// `max_a` of the group loss minus the implied level `Σ_y (m_{a,y}/m_a) ζ_y`.
    pub implied_bgl_max: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub monotone: bool,
    /// `η_0 (β+B) L`; at most 1/4 under the theory schedule.
    pub first_step_scaled: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub lemma3: Lemma3Check,
    /// Only present when requested (it needs the minimization oracle) and
    /// the method has a server-side dual.
    pub gap_vs_nu: Option<GapCheck>,
    /// Only present for conditional constraints.
    pub cbgl_implies_bgl: Option<CbglCheck>,
    pub schedule_descent: ScheduleCheck,
    pub gd_equivalence_maxerr: f64,
}

impl GuaranteeReport {
    pub fn all_pass(&self) -> bool {
        self.lemma3.holds
            && self.gap_vs_nu.as_ref().is_none_or(|g| g.pass)
            && self.cbgl_implies_bgl.as_ref().is_none_or(|c| c.holds)
            && self.schedule_descent.holds
            && self.gd_equivalence_maxerr <= 1e-12
    }
}

/// `λ̄` from the logged per-epoch logits, or from the final logits when the
/// trace has been dropped.
pub fn reconstruct_lambda_bar(result: &RunResult) -> Option<Vec<f64>> {
    result.lambda_bar_from_trace().or_else(|| {
        (!result.final_theta.is_empty())
            .then(|| lambda_from_theta(&result.final_theta, result.bound))
    })
}

pub fn verify_run(
    result: &RunResult,
    split: &FederatedSplit,
    cs: &ConstraintSet,
    cfg: &PfflConfig,
    gap_tol: Option<f64>,
) -> Result<GuaranteeReport> {
    let w_bar = &result.w_bar;
    let r_bar = cs.eval_global(split, w_bar);
    let gate = check_gate(&r_bar, cfg.m_bound, cfg.nu, result.bound);
    let applies = result.verdict == Verdict::Feasible;
    let margin = gate.threshold - gate.max_violation;
    let lemma3 = Lemma3Check {
        applies,
        max_violation: gate.max_violation,
        threshold: gate.threshold,
        margin,
        holds: !applies || margin >= -GATE_SLACK,
    };

    let gap_vs_nu = match (gap_tol, reconstruct_lambda_bar(result)) {
        (Some(tol), Some(lambda_bar)) if lambda_bar.len() == cs.len() => Some(
            match gap(
                w_bar,
                &lambda_bar,
                split,
                cs,
                &cfg.loss,
                cfg.beta,
                result.bound,
                tol,
            ) {
                Ok(g) => GapCheck {
                    gap: Some(g.gap),
                    nu: cfg.nu,
                    oracle_tol: tol,
                    pass: g.gap <= cfg.nu,
                    error: None,
                },
                Err(e) => GapCheck {
                    gap: None,
                    nu: cfg.nu,
                    oracle_tol: tol,
                    pass: false,
                    error: Some(e.to_string()),
                },
            },
        ),
        _ => None,
    };

    let cbgl_implies_bgl = cs.implied_bgl_levels(split).map(|levels| {
        let cbgl_feasible = r_bar.iter().all(|&v| v <= 0.0);
        let implied_bgl_max = group_losses(split, w_bar)
            .iter()
            .zip(&levels)
            .filter_map(|(l, z)| l.map(|l| l - z))
            .fold(f64::NEG_INFINITY, f64::max);
        CbglCheck {
            cbgl_feasible,
            implied_bgl_max,
            holds: !cbgl_feasible || implied_bgl_max <= IDENTITY_SLACK,
        }
    });

    Ok(GuaranteeReport {
        lemma3,
        gap_vs_nu,
        cbgl_implies_bgl,
        schedule_descent: check_schedule(split, cfg, result.bound)?,
        gd_equivalence_maxerr: gd_equivalence_error(split, cs, cfg, result, GD_PROBE_STEPS)?,
    })
}

fn group_losses(split: &FederatedSplit, w: &ModelParams) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; split.num_groups()];
    for e in split.examples() {
        sum[e.a] += cross_entropy(w, &e.x, e.y);
    }
    sum.iter()
        .zip(split.group_counts())
        .map(|(s, &m)| (m > 0).then(|| s / m as f64))
        .collect()
}

fn check_schedule(split: &FederatedSplit, cfg: &PfflConfig, bound: f64) -> Result<ScheduleCheck> {
    let mut sched = ScheduleState::for_config(&cfg.round, split, &cfg.loss, cfg.beta, bound)?;
    let total = cfg.total_rounds()?;
    let first = sched.step_size();
    let mut prev = first;
    let mut monotone = first > 0.0 && first.is_finite();
    for _ in 1..total {
        sched.advance();
        let eta = sched.step_size();
        monotone &= eta > 0.0 && eta <= prev;
        prev = eta;
    }
    let first_step_scaled = if cfg.loss.ridge_mu > 0.0 {
        first * (cfg.beta + bound) * smoothness_constants(split, &cfg.loss)?.l
    } else {
        f64::NAN
    };
    let holds = match cfg.round.schedule {
        StepSchedule::Theory => monotone && first_step_scaled <= 0.25 + 1e-12,
        StepSchedule::Constant { .. } => monotone,
    };
    Ok(ScheduleCheck {
        monotone,
        first_step_scaled,
        holds,
    })
}

/// Runs `steps` single-client, single-local-step, full-batch rounds at `λ̄`
/// on the pooled data and compares them with centralized gradient descent on
/// `G(·; λ̄)`.
fn gd_equivalence_error(
    split: &FederatedSplit,
    cs: &ConstraintSet,
    cfg: &PfflConfig,
    result: &RunResult,
    steps: usize,
) -> Result<f64> {
    let pooled = split.merged();
    let w0 = ModelParams::zeros(split.num_features(), cfg.loss.bias);
    let pooled_cs = match cs.kind() {
        Some(kind) => ConstraintSet::build(
            kind,
            &pooled,
            BuildOptions {
                rho: Some(cs.rho()),
                ..Default::default()
            },
            &w0,
        )?,
        None => ConstraintSet::empty(1, split.num_groups()),
    };
    let lambda = reconstruct_lambda_bar(result)
        .filter(|l| l.len() == pooled_cs.len())
        .unwrap_or_else(|| vec![0.0; pooled_cs.len()]);
    let eta = 0.1;
    let round = RoundConfig {
        local_steps: 1,
        rounds: steps,
        schedule: StepSchedule::Constant { eta },
        batch: BatchMode::Full,
    };
    let objective = PfflObjective {
        beta: cfg.beta,
        spec: &cfg.loss,
        constraints: &pooled_cs,
        lambda: &lambda,
    };
    let mut sched = ScheduleState::constant(eta);
    let mut sampler = BatchSampler::new(BatchMode::Full, 1);
    let fed = run_epoch(
        &pooled,
        &w0,
        &objective,
        &round,
        &mut sched,
        &mut sampler,
        None,
    )?;

    let mut w = w0;
    let mut max_err = 0.0f64;
    for it in &fed.iterates {
        let (_, g) = saddle_value_and_grad(&pooled, &pooled_cs, &cfg.loss, cfg.beta, &w, &lambda);
        w.w.iter_mut().zip(&g).for_each(|(v, gi)| *v -= eta * gi);
        let err =
            w.w.iter()
                .zip(&it.w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintKind;
    use crate::dataset::make_synthetic_hetero;
    use crate::pffl::run;

    fn cfg() -> PfflConfig {
        PfflConfig {
            epochs: 8,
            round: RoundConfig {
                local_steps: 2,
                rounds: 4,
                schedule: StepSchedule::Theory,
                batch: BatchMode::Full,
            },
            bound: 5.0,
            m_bound: 1.0,
            loss: crate::linear_model::LossSpec::logistic(0.1, true),
            ..PfflConfig::default()
        }
    }

    #[test]
    fn feasible_run_passes_lemma3_and_is_reproducible() {
        let (_, split) = make_synthetic_hetero(3, 60, 4, 0.5, 4).unwrap();
        let w0 = ModelParams::zeros(4, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.6 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let res = run(&split, &cs, &cfg()).unwrap();
        assert_eq!(res.verdict, Verdict::Feasible);
        let report = verify_run(&res, &split, &cs, &cfg(), Some(1e-8)).unwrap();
        assert!(report.lemma3.applies && report.lemma3.holds && report.lemma3.margin >= 0.0);
        assert!(
            report.schedule_descent.holds,
            "{:?}",
            report.schedule_descent
        );
        assert!(report.gd_equivalence_maxerr <= 1e-12);
        assert!(report.gap_vs_nu.as_ref().unwrap().gap.unwrap() >= -1e-8);
        assert!(report.cbgl_implies_bgl.is_none());
        assert_eq!(
            report,
            verify_run(&res, &split, &cs, &cfg(), Some(1e-8)).unwrap()
        );
    }

    #[test]
    fn verdicts_survive_trace_deletion() {
        let (_, split) = make_synthetic_hetero(3, 60, 4, 0.5, 4).unwrap();
        let w0 = ModelParams::zeros(4, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.5 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let res = run(&split, &cs, &cfg()).unwrap();
        let mut stripped = res.clone();
        stripped.epochs.clear();
        stripped.rounds.clear();
        stripped.r_bar.clear();
        stripped.max_violation = f64::NAN;
        let a = verify_run(&res, &split, &cs, &cfg(), None).unwrap();
        let b = verify_run(&stripped, &split, &cs, &cfg(), None).unwrap();
        assert_eq!(a.lemma3, b.lemma3);
        assert_eq!(a.schedule_descent, b.schedule_descent);
        assert_eq!(a.cbgl_implies_bgl, b.cbgl_implies_bgl);
    }

    #[test]
    fn cbgl_identity_reported() {
        let (_, split) = make_synthetic_hetero(3, 60, 4, 0.5, 9).unwrap();
        let w0 = ModelParams::zeros(4, true);
        let kind = ConstraintKind::Cbgl {
            zeta_by_label: [0.9, 0.9],
        };
        let cs = ConstraintSet::build(kind, &split, BuildOptions::default(), &w0).unwrap();
        let res = run(&split, &cs, &cfg()).unwrap();
        let report = verify_run(&res, &split, &cs, &cfg(), None).unwrap();
        let check = report.cbgl_implies_bgl.unwrap();
        assert!(check.cbgl_feasible);
        assert!(check.holds && check.implied_bgl_max <= 0.0);
    }

    #[test]
    fn lambda_bar_falls_back_to_final_theta() {
        let (_, split) = make_synthetic_hetero(3, 40, 3, 0.5, 1).unwrap();
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.2 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let mut res = run(&split, &cs, &cfg()).unwrap();
        assert_eq!(reconstruct_lambda_bar(&res), res.lambda_bar_from_trace());
        res.epochs.clear();
        assert_eq!(
            reconstruct_lambda_bar(&res).unwrap(),
            lambda_from_theta(&res.final_theta, res.bound)
        );
    }
}
