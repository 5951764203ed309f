//! Dual player: logits `θ` and the multipliers
//! `λ_z = B·exp(θ_z) / (1 + Σ_z' exp(θ_z'))` on the `B`-scaled simplex with an
//! implicit slack coordinate (logit 0).

use serde::{Deserialize, Serialize};

use crate::error::{FairFedError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    theta: Vec<f64>,
    bound: f64,
    eta_theta: f64,
}

impl DualState {
    /// `θ⁰ = 0` for `z` constraints.
    pub fn new(z: usize, bound: f64, eta_theta: f64) -> Result<Self> {
        Self::from_theta(vec![0.0; z], bound, eta_theta)
    }

    pub fn from_theta(theta: Vec<f64>, bound: f64, eta_theta: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(FairFedError::Config(format!(
                "B must be positive, got {bound}"
            )));
        }
        if !(eta_theta > 0.0 && eta_theta.is_finite()) {
            return Err(FairFedError::Config(format!(
                "eta_theta must be positive, got {eta_theta}"
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(FairFedError::Validation("theta must be finite".into()));
        }
        Ok(Self {
            theta,
            bound,
            eta_theta,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn eta_theta(&self) -> f64 {
        self.eta_theta
    }

    pub fn lambda(&self) -> Vec<f64> {
        lambda_from_theta(&self.theta, self.bound)
    }

    /// Exponentiated-gradient ascent step `θ ← θ + η_θ r`.
    pub fn ascend(&mut self, r_global: &[f64]) {
        debug_assert_eq!(r_global.len(), self.theta.len());
        for (t, r) in self.theta.iter_mut().zip(r_global) {
            *t += self.eta_theta * r;
        }
    }
}

/// Closed form with the slack logit; shifting every logit (slack included)
/// by `max(θ, 0)` keeps the exponentials in range for any finite `θ`.
pub fn lambda_from_theta(theta: &[f64], bound: f64) -> Vec<f64> {
    let shift = theta.iter().copied().fold(0.0f64, f64::max);
    let exps: Vec<f64> = theta.iter().map(|t| (t - shift).exp()).collect();
    let denom = (-shift).exp() + exps.iter().sum::<f64>();
    exps.into_iter().map(|e| bound * e / denom).collect()
}

/// Dual step size `ν / (2ρ²B)`.
pub fn default_eta_theta(nu: f64, rho: f64, bound: f64) -> Result<f64> {
    for (name, v) in [("nu", nu), ("rho", rho), ("B", bound)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(FairFedError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    Ok(nu / (2.0 * rho * rho * bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn symmetric_logits() {
        let l = lambda_from_theta(&[0.0, 0.0], 1.0);
        assert_relative_eq!(l[0], 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(l[1], 1.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn hand_evaluated_closed_form() {
        let l = lambda_from_theta(&[2f64.ln(), 0.0], 3.0);
        assert_relative_eq!(l[0], 1.5, max_relative = 1e-15);
        assert_relative_eq!(l[1], 0.75, max_relative = 1e-15);
    }

    #[test]
    fn dominant_logit_takes_whole_budget() {
        let l = lambda_from_theta(&[800.0, 0.0, -5.0], 2.0);
        assert_relative_eq!(l[0], 2.0, max_relative = 1e-15);
        assert!(l[1] < 1e-300 && l[2] < 1e-300);
        assert!(lambda_from_theta(&[], 2.0).is_empty());
    }

    #[test]
    fn ascent_steps() {
        let mut d = DualState::new(2, 1.0, 0.1).unwrap();
        d.ascend(&[0.0, 0.0]);
        assert_eq!(d.theta(), &[0.0, 0.0]);
        d.ascend(&[1.0, -1.0]);
        assert_relative_eq!(d.theta()[0], 0.1);
        assert_relative_eq!(d.theta()[1], -0.1);
    }

    #[test]
    fn constant_positive_violation_drives_lambda_to_bound() {
        let mut d = DualState::new(2, 4.0, 0.5).unwrap();
        let mut prev = d.lambda()[0];
        for _ in 0..100 {
            d.ascend(&[0.3, -0.1]);
            let l = d.lambda()[0];
            assert!(l > prev);
            prev = l;
        }
        // Independent evaluation of the closed form after 100 steps.
        let t0: f64 = 100.0 * 0.5 * 0.3;
        let t1: f64 = 100.0 * 0.5 * -0.1;
        let expected = 4.0 / (1.0 + (-t0).exp() + (t1 - t0).exp());
        assert_relative_eq!(prev, expected, max_relative = 1e-12);
    }

    #[test]
    fn eta_theta_formula() {
        assert_relative_eq!(default_eta_theta(0.1, 1.0, 1.0).unwrap(), 0.05);
        assert_relative_eq!(default_eta_theta(0.1, 1.0, 10.0).unwrap(), 0.005);
        let a = default_eta_theta(0.2, 0.7, 3.0).unwrap();
        let b = default_eta_theta(0.2, 1.4, 3.0).unwrap();
        assert_relative_eq!(a / b, 4.0, max_relative = 1e-14);
        assert!(default_eta_theta(0.0, 1.0, 1.0).is_err());
        assert!(default_eta_theta(0.1, -1.0, 1.0).is_err());
    }

    #[test]
    fn constructor_validates() {
        assert!(DualState::new(2, 0.0, 0.1).is_err());
        assert!(DualState::new(2, 1.0, 0.0).is_err());
        assert!(DualState::from_theta(vec![f64::NAN], 1.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn lambda_stays_in_scaled_simplex(
            theta in prop::collection::vec(-1e3f64..1e3, 0..6),
            bound in 1e-3f64..1e3,
        ) {
            let l = lambda_from_theta(&theta, bound);
            prop_assert!(l.iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!(l.iter().sum::<f64>() <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn lambda_preserves_logit_order(theta in prop::collection::vec(-30f64..30.0, 2..6)) {
            let l = lambda_from_theta(&theta, 1.0);
            for i in 0..theta.len() {
                for j in 0..theta.len() {
                    if theta[i] > theta[j] {
                        prop_assert!(l[i] > l[j]);
                    }
                }
            }
        }

        #[test]
        fn stabilization_matches_naive_formula(theta in prop::collection::vec(-20f64..20.0, 1..5)) {
            let l = lambda_from_theta(&theta, 2.5);
            let denom = 1.0 + theta.iter().map(|t| t.exp()).sum::<f64>();
            for (v, t) in l.iter().zip(&theta) {
                let naive = 2.5 * t.exp() / denom;
                prop_assert!((v - naive).abs() <= 1e-12 * naive.max(1e-300));
            }
        }
    }
}
