//! Utility and fairness metrics plus the saddle-point oracles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dataset::{Dataset, FederatedSplit, NUM_LABELS};
use crate::error::{FairFedError, Result};
use crate::linear_model::{
    add_cross_entropy_grad, add_cross_entropy_hessian, cross_entropy, empirical_risk,
    empirical_risk_grad, predict_prob, LossSpec, ModelParams,
};

/// Probability at or above which the classifier predicts 1.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub error_rate: f64,
    pub mean_loss: f64,
    /// Mean unregularized loss per group; `None` for groups absent from the data.
    pub group_losses: Vec<Option<f64>>,
    pub max_group_loss: f64,
    pub group_label_losses: Vec<[Option<f64>; NUM_LABELS]>,
    pub delta_dp: f64,
    pub delta_eo: f64,
}

/// 0/1 predictions at [`DECISION_THRESHOLD`]; losses are threshold-free.
pub fn evaluate(m: &ModelParams, data: &Dataset) -> EvalReport {
    let g = data.num_groups();
    let mut loss_sum = vec![[0.0; NUM_LABELS]; g];
    let mut count = vec![[0usize; NUM_LABELS]; g];
    let mut positives = vec![[0usize; NUM_LABELS]; g];
    let mut errors = 0usize;
    let mut total_loss = 0.0;
    for e in data.examples() {
        let y = e.y as usize;
        let pred = u8::from(predict_prob(m, &e.x) >= DECISION_THRESHOLD);
        let l = cross_entropy(m, &e.x, e.y);
        loss_sum[e.a][y] += l;
        count[e.a][y] += 1;
        positives[e.a][y] += pred as usize;
        errors += usize::from(pred != e.y);
        total_loss += l;
    }

    let ratio = |num: f64, den: usize| (den > 0).then(|| num / den as f64);
    let group_losses: Vec<Option<f64>> = (0..g)
        .map(|a| ratio(loss_sum[a].iter().sum(), count[a].iter().sum()))
        .collect();
    for (a, l) in group_losses.iter().enumerate() {
        if l.is_none() {
            log::warn!(
                "group {a} ({}) absent from evaluation data",
                data.group_names()[a]
            );
        }
    }
    let group_label_losses = (0..g)
        .map(|a| {
            [
                ratio(loss_sum[a][0], count[a][0]),
                ratio(loss_sum[a][1], count[a][1]),
            ]
        })
        .collect();
    let positive_rate: Vec<Option<f64>> = (0..g)
        .map(|a| {
            ratio(
                positives[a].iter().sum::<usize>() as f64,
                count[a].iter().sum(),
            )
        })
        .collect();
    let true_positive_rate: Vec<Option<f64>> = (0..g)
        .map(|a| ratio(positives[a][1] as f64, count[a][1]))
        .collect();

    EvalReport {
        n: data.len(),
        error_rate: errors as f64 / data.len() as f64,
        mean_loss: total_loss / data.len() as f64,
        max_group_loss: group_losses
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        group_losses,
        group_label_losses,
        delta_dp: max_pairwise_gap(&positive_rate),
        delta_eo: max_pairwise_gap(&true_positive_rate),
    }
}

/// `|rate_0 − rate_1|` for two groups; the largest pairwise difference among
/// present groups otherwise.
fn max_pairwise_gap(rates: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = rates.iter().flatten().copied().collect();
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    if present.len() < 2 {
        0.0
    } else {
        hi - lo
    }
}

/// `G(w; λ) = βF(w) + λᵀ r(w)`.
pub fn saddle_value(
    split: &FederatedSplit,
    cs: &ConstraintSet,
    spec: &LossSpec,
    beta: f64,
    w: &ModelParams,
    lambda: &[f64],
) -> f64 {
    let risk = if beta != 0.0 {
        beta * empirical_risk(split, w, spec)
    } else {
        0.0
    };
    risk + dot(lambda, &cs.eval_global(split, w))
}

pub fn saddle_value_and_grad(
    split: &FederatedSplit,
    cs: &ConstraintSet,
    spec: &LossSpec,
    beta: f64,
    w: &ModelParams,
    lambda: &[f64],
) -> (f64, Vec<f64>) {
    let value = saddle_value(split, cs, spec, beta, w, lambda);
    let mut g: Vec<f64> = empirical_risk_grad(split, w, spec)
        .into_iter()
        .map(|v| beta * v)
        .collect();
    cs.add_weighted_grad(split.examples(), w, lambda, 1.0, &mut g);
    (value, g)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed form of `max_{λ ≥ 0, ‖λ‖₁ ≤ B} βF(w) + λᵀr(w)`:
/// `βF(w) + B · max(max_z r_z(w), 0)`.
pub fn max_over_lambda_closed_form(beta_f: f64, r: &[f64], bound: f64) -> f64 {
    beta_f + bound * r.iter().fold(0.0f64, |acc, &v| acc.max(v))
}

pub fn max_over_lambda(
    w: &ModelParams,
    cs: &ConstraintSet,
    split: &FederatedSplit,
    spec: &LossSpec,
    beta: f64,
    bound: f64,
) -> f64 {
    let beta_f = if beta != 0.0 {
        beta * empirical_risk(split, w, spec)
    } else {
        0.0
    };
    max_over_lambda_closed_form(beta_f, &cs.eval_global(split, w), bound)
}

/// Twice-differentiable objective for the Newton oracle.
pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
    /// Row-major `dim × dim`.
    fn hessian(&self, w: &[f64]) -> Vec<f64>;
}

/// `w ↦ G(w; λ)` over the full federated training data.
pub struct SaddleObjective<'a> {
    pub split: &'a FederatedSplit,
    pub cs: &'a ConstraintSet,
    pub spec: &'a LossSpec,
    pub beta: f64,
    pub lambda: &'a [f64],
}

impl SaddleObjective<'_> {
    fn model(&self, w: &[f64]) -> ModelParams {
        ModelParams::from_vec(w.to_vec(), self.spec.bias)
    }
}

impl SmoothObjective for SaddleObjective<'_> {
    fn dim(&self) -> usize {
        self.split.num_features() + usize::from(self.spec.bias)
    }

    fn value(&self, w: &[f64]) -> f64 {
        saddle_value(
            self.split,
            self.cs,
            self.spec,
            self.beta,
            &self.model(w),
            self.lambda,
        )
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let m = self.model(w);
        let mut g: Vec<f64> =
            m.w.iter()
                .map(|v| self.beta * self.spec.ridge_mu * v)
                .collect();
        let k = self.split.num_clients() as f64;
        for shard in self.split.shards() {
            let scale = self.beta / (k * shard.len() as f64);
            if scale != 0.0 {
                for e in shard {
                    add_cross_entropy_grad(&m, &e.x, e.y, scale, &mut g);
                }
            }
        }
        self.cs
            .add_weighted_grad(self.split.examples(), &m, self.lambda, 1.0, &mut g);
        g
    }

    fn hessian(&self, w: &[f64]) -> Vec<f64> {
        let m = self.model(w);
        let d = m.dim();
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            h[i * d + i] = self.beta * self.spec.ridge_mu;
        }
        let k = self.split.num_clients() as f64;
        for shard in self.split.shards() {
            let scale = self.beta / (k * shard.len() as f64);
            for e in shard {
                let mut c = scale;
                if let Some(z) = self.cs.constraint_of(e) {
                    c += self.lambda[z] / self.cs.counts()[z] as f64;
                }
                if c != 0.0 {
                    add_cross_entropy_hessian(&m, &e.x, c, &mut h);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Iteration cap of the Newton oracle.
pub const MAX_NEWTON_ITERS: usize = 500;

/// Damped Newton with Armijo backtracking until `‖∇f‖ ≤ tol`.
pub fn minimize_newton(obj: &dyn SmoothObjective, start: &[f64], tol: f64) -> Result<Minimum> {
    let d = obj.dim();
    let mut w = start.to_vec();
    let mut f = obj.value(&w);
    for iter in 0..MAX_NEWTON_ITERS {
        let g = obj.gradient(&w);
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() || !f.is_finite() {
            return Err(FairFedError::OracleFailure(
                "non-finite objective during minimization".into(),
            ));
        }
        if grad_norm <= tol {
            return Ok(Minimum {
                point: w,
                value: f,
                grad_norm,
                iterations: iter,
            });
        }
        let h = DMatrix::from_row_slice(d, d, &obj.hessian(&w));
        let rhs = DVector::from_iterator(d, g.iter().map(|v| -v));
        let mut damping = 0.0;
        let step = loop {
            let shifted = &h + DMatrix::identity(d, d) * damping;
            if let Some(chol) = shifted.cholesky() {
                break chol.solve(&rhs);
            }
            damping = if damping == 0.0 {
                1e-10
            } else {
                damping * 10.0
            };
            if damping > 1e10 {
                return Err(FairFedError::OracleFailure(
                    "Hessian could not be regularized".into(),
                ));
            }
        };
        let slope: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ft = obj.value(&trial);
            if ft <= f + 1e-4 * t * slope {
                w = trial;
                f = ft;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(FairFedError::OracleFailure(format!(
                    "line search stalled at ‖∇‖ = {grad_norm:.3e} (tol {tol:.1e})"
                )));
            }
        }
    }
    Err(FairFedError::OracleFailure(format!(
        "no convergence to ‖∇‖ ≤ {tol:.1e} within {MAX_NEWTON_ITERS} Newton iterations"
    )))
}

/// `min_w G(w; λ)` computed centrally (a verification oracle, not part of
/// the federated algorithm).
#[allow(clippy::too_many_arguments)]
pub fn min_over_w(
    lambda: &[f64],
    split: &FederatedSplit,
    beta: f64,
    cs: &ConstraintSet,
    spec: &LossSpec,
    tol: f64,
    start: Option<&ModelParams>,
) -> Result<Minimum> {
    if beta * spec.ridge_mu <= 0.0 {
        return Err(FairFedError::OracleFailure(
            "min over w needs a strongly convex objective (β·μ > 0)".into(),
        ));
    }
    let obj = SaddleObjective {
        split,
        cs,
        spec,
        beta,
        lambda,
    };
    let zeros = vec![0.0; obj.dim()];
    minimize_newton(&obj, start.map_or(&zeros, |m| &m.w), tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `max_λ G(w̄; λ)`.
    pub upper: f64,
    /// `min_w G(w; λ̄)` (up to the oracle tolerance).
    pub lower: f64,
    pub gap: f64,
    pub oracle_tol: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn gap(
    w_bar: &ModelParams,
    lambda_bar: &[f64],
    split: &FederatedSplit,
    cs: &ConstraintSet,
    spec: &LossSpec,
    beta: f64,
    bound: f64,
    tol: f64,
) -> Result<GapEstimate> {
    let upper = max_over_lambda(w_bar, cs, split, spec, beta, bound);
    let lower = min_over_w(lambda_bar, split, beta, cs, spec, tol, Some(w_bar))?.value;
    Ok(GapEstimate {
        upper,
        lower,
        gap: upper - lower,
        oracle_tol: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{BuildOptions, ConstraintKind};
    use crate::dataset::{make_synthetic_hetero, Example};
    use approx::assert_relative_eq;

    fn toy_eight() -> Dataset {
        // x = ±1 splits labels perfectly; group 0 has 3 positives of 4,
        // group 1 has 1 of 4.
        let ex = |x: f64, y: u8, a: usize| Example::new(vec![x], y, a);
        Dataset::from_examples(
            vec![
                ex(1.0, 1, 0),
                ex(1.0, 1, 0),
                ex(1.0, 1, 0),
                ex(-1.0, 0, 0),
                ex(1.0, 1, 1),
                ex(-1.0, 0, 1),
                ex(-1.0, 0, 1),
                ex(-1.0, 0, 1),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn perfect_classifier_metrics() {
        let r = evaluate(&ModelParams::from_vec(vec![5.0], false), &toy_eight());
        assert_eq!(r.error_rate, 0.0);
        assert_relative_eq!(r.delta_dp, 0.5);
        assert_eq!(r.delta_eo, 0.0);
    }

    #[test]
    fn constant_positive_predictor_has_no_disparity() {
        let ds = toy_eight();
        let r = evaluate(&ModelParams::from_vec(vec![0.0, 10.0], true), &ds);
        assert_eq!(r.delta_dp, 0.0);
        assert_eq!(r.delta_eo, 0.0);
        assert_relative_eq!(r.error_rate, 0.5);
    }

    #[test]
    fn zero_model_group_losses_are_log_two() {
        let r = evaluate(&ModelParams::zeros(1, false), &toy_eight());
        for l in r.group_losses.iter().flatten() {
            assert_relative_eq!(*l, 2f64.ln(), epsilon = 1e-15);
        }
        assert_relative_eq!(r.max_group_loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn disparity_is_symmetric_in_group_labels() {
        let ds = toy_eight();
        let swapped = Dataset::from_examples(
            ds.examples()
                .iter()
                .map(|e| Example::new(e.x.clone(), e.y, 1 - e.a))
                .collect(),
            2,
        )
        .unwrap();
        let m = ModelParams::from_vec(vec![0.8, 0.6], true);
        let (a, b) = (evaluate(&m, &ds), evaluate(&m, &swapped));
        assert_eq!(a.delta_dp, b.delta_dp);
        assert_eq!(a.delta_eo, b.delta_eo);
    }

    #[test]
    fn absent_group_is_skipped() {
        let ds = Dataset::with_groups(
            vec![Example::new(vec![1.0], 1, 0)],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let r = evaluate(&ModelParams::zeros(1, false), &ds);
        assert_eq!(r.group_losses[1], None);
        assert_eq!(r.delta_dp, 0.0);
    }

    #[test]
    fn closed_form_lambda_max() {
        assert_relative_eq!(max_over_lambda_closed_form(1.0, &[0.3, 0.1], 2.0), 1.6);
        assert_eq!(max_over_lambda_closed_form(0.7, &[-0.3, -0.1], 2.0), 0.7);
    }

    /// 1-D quadratic `a/2 (w − c)²` with its analytic minimum at `c`.
    struct Quadratic {
        a: f64,
        c: f64,
    }

    impl SmoothObjective for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, w: &[f64]) -> f64 {
            0.5 * self.a * (w[0] - self.c).powi(2)
        }
        fn gradient(&self, w: &[f64]) -> Vec<f64> {
            vec![self.a * (w[0] - self.c)]
        }
        fn hessian(&self, _w: &[f64]) -> Vec<f64> {
            vec![self.a]
        }
    }

    #[test]
    fn newton_solves_quadratic() {
        let m = minimize_newton(&Quadratic { a: 3.0, c: -1.25 }, &[10.0], 1e-12).unwrap();
        assert!((m.point[0] + 1.25).abs() <= 1e-8);
        assert!(m.value.abs() <= 1e-8);
    }

    #[test]
    fn zero_lambda_oracle_is_erm() {
        let (_, split) = make_synthetic_hetero(3, 50, 3, 0.3, 5).unwrap();
        let spec = LossSpec::logistic(0.1, true);
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.3 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let min = min_over_w(&[0.0, 0.0], &split, 1.0, &cs, &spec, 1e-10, None).unwrap();
        let w = ModelParams::from_vec(min.point.clone(), true);
        assert_relative_eq!(
            min.value,
            empirical_risk(&split, &w, &spec),
            epsilon = 1e-14
        );
        let g = empirical_risk_grad(&split, &w, &spec);
        assert!(g.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn saddle_gradient_matches_finite_differences() {
        let (_, split) = make_synthetic_hetero(3, 30, 3, 0.6, 6).unwrap();
        let spec = LossSpec::logistic(0.2, true);
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Cbgl {
                zeta_by_label: [0.2, 0.4],
            },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        let lambda = [0.1, 0.4, 0.2, 0.3];
        let obj = SaddleObjective {
            split: &split,
            cs: &cs,
            spec: &spec,
            beta: 0.8,
            lambda: &lambda,
        };
        let w = vec![0.3, -0.2, 0.5, 0.1];
        let g = obj.gradient(&w);
        let (_, g2) = saddle_value_and_grad(
            &split,
            &cs,
            &spec,
            0.8,
            &ModelParams::from_vec(w.clone(), true),
            &lambda,
        );
        let h = obj.hessian(&w);
        for j in 0..4 {
            let mut plus = w.clone();
            plus[j] += 1e-6;
            let mut minus = w.clone();
            minus[j] -= 1e-6;
            let fd = (obj.value(&plus) - obj.value(&minus)) / 2e-6;
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0));
            assert_relative_eq!(g[j], g2[j], epsilon = 1e-14);
            let gp = obj.gradient(&plus);
            let gm = obj.gradient(&minus);
            for i in 0..4 {
                let fd = (gp[i] - gm[i]) / 2e-6;
                assert!((fd - h[i * 4 + j]).abs() <= 1e-6 * h[i * 4 + j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn unregularized_oracle_is_refused() {
        let (_, split) = make_synthetic_hetero(2, 10, 2, 0.0, 1).unwrap();
        let cs = ConstraintSet::empty(2, 2);
        let spec = LossSpec::logistic(0.0, false);
        assert!(matches!(
            min_over_w(&[], &split, 1.0, &cs, &spec, 1e-6, None),
            Err(FairFedError::OracleFailure(_))
        ));
    }
}
