//! Logistic predictor with optional ridge term and analytic gradients.
//!
//! The per-example loss is binary cross-entropy plus `(mu/2)‖w‖²`, so every
//! client objective `f_k` (a mean of per-example losses) is `mu`-strongly
//! convex. Fairness constraints use the unregularized cross-entropy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, FederatedSplit};
use crate::error::{FairFedError, Result};

/// Probability clamp keeping the cross-entropy finite.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Feature weights, followed by the intercept when `bias` is set.
    pub w: Vec<f64>,
    pub bias: bool,
}

impl ModelParams {
    pub fn zeros(num_features: usize, bias: bool) -> Self {
        Self {
            w: vec![0.0; num_features + usize::from(bias)],
            bias,
        }
    }

    pub fn from_vec(w: Vec<f64>, bias: bool) -> Self {
        Self { w, bias }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }

    /// `w·x̃` where `x̃` is `x` with a trailing 1 when the model has a bias.
    pub fn score(&self, x: &[f64]) -> f64 {
        let dot: f64 = self.w.iter().zip(x).map(|(w, v)| w * v).sum();
        if self.bias {
            dot + self.w[x.len()]
        } else {
            dot
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Strong-convexity coefficient `mu ≥ 0`.
    pub ridge_mu: f64,
    pub bias: bool,
}

impl LossSpec {
    pub fn logistic(ridge_mu: f64, bias: bool) -> Self {
        Self {
            kind: LossKind::Logistic,
            ridge_mu,
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_mu >= 0.0 && self.ridge_mu.is_finite()) {
            return Err(FairFedError::Config(format!(
                "ridge_mu must be ≥ 0, got {}",
                self.ridge_mu
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn predict_prob(m: &ModelParams, x: &[f64]) -> f64 {
    sigmoid(m.score(x))
}

/// Unregularized binary cross-entropy, evaluated as a softplus of the score
/// (no cancellation for confident predictions) and clamped to the values at
/// probabilities `ε` and `1 − ε`.
pub fn cross_entropy(m: &ModelParams, x: &[f64], y: u8) -> f64 {
    let z = m.score(x);
    let t = if y == 1 { -z } else { z };
    let softplus = t.max(0.0) + (-t.abs()).exp().ln_1p();
    softplus.clamp(-(-PROB_EPS).ln_1p(), -PROB_EPS.ln())
}

pub fn loss(m: &ModelParams, x: &[f64], y: u8, spec: &LossSpec) -> f64 {
    cross_entropy(m, x, y) + 0.5 * spec.ridge_mu * m.norm_sq()
}

/// Adds `scale · ∇_w CE(w; x, y) = scale · (σ(w·x) − y) x̃` into `out`.
pub fn add_cross_entropy_grad(m: &ModelParams, x: &[f64], y: u8, scale: f64, out: &mut [f64]) {
    let residual = scale * (predict_prob(m, x) - f64::from(y));
    for (o, v) in out.iter_mut().zip(x) {
        *o += residual * v;
    }
    if m.bias {
        out[x.len()] += residual;
    }
}

pub fn grad_loss(m: &ModelParams, x: &[f64], y: u8, spec: &LossSpec) -> Vec<f64> {
    let mut g: Vec<f64> = m.w.iter().map(|w| spec.ridge_mu * w).collect();
    add_cross_entropy_grad(m, x, y, 1.0, &mut g);
    g
}

/// Adds `scale · σ'(w·x) x̃ x̃ᵀ` into a dense row-major `dim × dim` matrix.
pub fn add_cross_entropy_hessian(m: &ModelParams, x: &[f64], scale: f64, out: &mut [f64]) {
    let p = predict_prob(m, x);
    let c = scale * p * (1.0 - p);
    let dim = m.dim();
    let aug = |j: usize| if j < x.len() { x[j] } else { 1.0 };
    for i in 0..dim {
        let ci = c * aug(i);
        for j in 0..dim {
            out[i * dim + j] += ci * aug(j);
        }
    }
}

/// Client objective `f_k(w)`: mean regularized loss over a shard.
pub fn client_risk(shard: &[Example], m: &ModelParams, spec: &LossSpec) -> f64 {
    let ce: f64 = shard.iter().map(|e| cross_entropy(m, &e.x, e.y)).sum();
    ce / shard.len() as f64 + 0.5 * spec.ridge_mu * m.norm_sq()
}

pub fn client_risk_grad(shard: &[Example], m: &ModelParams, spec: &LossSpec) -> Vec<f64> {
    let mut g: Vec<f64> = m.w.iter().map(|w| spec.ridge_mu * w).collect();
    let scale = 1.0 / shard.len() as f64;
    for e in shard {
        add_cross_entropy_grad(m, &e.x, e.y, scale, &mut g);
    }
    g
}

/// Federated empirical risk `F(w) = (1/K) Σ_k f_k(w)`.
pub fn empirical_risk(split: &FederatedSplit, m: &ModelParams, spec: &LossSpec) -> f64 {
    let total: f64 = split.shards().iter().map(|s| client_risk(s, m, spec)).sum();
    total / split.num_clients() as f64
}

pub fn empirical_risk_grad(split: &FederatedSplit, m: &ModelParams, spec: &LossSpec) -> Vec<f64> {
    let k = split.num_clients() as f64;
    let mut g = vec![0.0; m.dim()];
    for shard in split.shards() {
        for (acc, v) in g.iter_mut().zip(client_risk_grad(shard, m, spec)) {
            *acc += v / k;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub mu: f64,
    pub l: f64,
    pub kappa: f64,
}

/// `mu` from the ridge term and `L = mu + max_i ‖x̃_i‖² / 4` (the logistic
/// curvature is at most 1/4).
pub fn smoothness_constants(split: &FederatedSplit, spec: &LossSpec) -> Result<Smoothness> {
    if spec.ridge_mu <= 0.0 {
        return Err(FairFedError::Config(
            "the theory step-size schedule requires ridge_mu > 0".into(),
        ));
    }
    let bias = f64::from(u8::from(spec.bias));
    let max_norm_sq = split
        .examples()
        .map(|e| e.x.iter().map(|v| v * v).sum::<f64>() + bias)
        .fold(0.0, f64::max);
    let mu = spec.ridge_mu;
    let l = mu + max_norm_sq / 4.0;
    Ok(Smoothness {
        mu,
        l,
        kappa: l / mu,
    })
}

/// Model checkpoint, stored as `{"w": [...], "bias": bool, "mu": real}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub w: Vec<f64>,
    pub bias: bool,
    pub mu: f64,
}

impl Checkpoint {
    pub fn new(model: &ModelParams, spec: &LossSpec) -> Self {
        Self {
            w: model.w.clone(),
            bias: model.bias,
            mu: spec.ridge_mu,
        }
    }

    pub fn model(&self) -> ModelParams {
        ModelParams::from_vec(self.w.clone(), self.bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.w.iter().any(|v| !v.is_finite()) {
            return Err(FairFedError::Validation(
                "checkpoint contains non-finite weights".into(),
            ));
        }
        Ok(ck)
    }
}
