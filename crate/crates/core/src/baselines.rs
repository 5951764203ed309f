//! Comparison methods: vanilla FedAvg, group-reweighted FedAvg, locally
//! enforced bounded group loss, and the minmax preset.

use serde::{Deserialize, Serialize};

use crate::constraints::{BuildOptions, ConstraintKind, ConstraintSet};
use crate::dataset::{Example, FederatedSplit};
use crate::dual::{default_eta_theta, DualState};
use crate::error::{FairFedError, Result};
use crate::fed_engine::{run_epoch, Batch, BatchSampler, LocalObjective, ScheduleState};
use crate::linear_model::{add_cross_entropy_grad, ModelParams};
use crate::pffl::{self, check_gate, seeded_batch, PfflConfig, RunResult, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    FedAvg,
    /// Per-example loss multiplier `weights[a] · N / m_a`.
    GroupWeighted {
        weights: Vec<f64>,
    },
    /// Each client runs its own dual player over the groups it holds.
    LocalBgl {
        zeta: f64,
        bound: f64,
        eta_theta: Option<f64>,
    },
    FedMinMax,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::FedAvg => "fedavg",
            BaselineKind::GroupWeighted { .. } => "group-weighted",
            BaselineKind::LocalBgl { .. } => "local-bgl",
            BaselineKind::FedMinMax => "fedminmax",
        }
    }

    /// Uniform group weights `1/|A|` (inverse-frequency reweighting).
    pub fn uniform_group_weights(num_groups: usize) -> Self {
        BaselineKind::GroupWeighted {
            weights: vec![1.0 / num_groups as f64; num_groups],
        }
    }
}

pub fn run_baseline(
    kind: &BaselineKind,
    split: &FederatedSplit,
    cfg: &PfflConfig,
) -> Result<RunResult> {
    let w0 = ModelParams::zeros(split.num_features(), cfg.loss.bias);
    let mut result = match kind {
        BaselineKind::FedAvg => {
            let cfg = PfflConfig {
                beta: 1.0,
                ..cfg.clone()
            };
            pffl::run_from(
                split,
                &ConstraintSet::empty(split.num_clients(), split.num_groups()),
                &cfg,
                &w0,
            )?
        }
        BaselineKind::GroupWeighted { weights } => run_group_weighted(weights, split, cfg, &w0)?,
        BaselineKind::LocalBgl {
            zeta,
            bound,
            eta_theta,
        } => run_local_bgl(*zeta, *bound, *eta_theta, split, cfg, &w0)?,
        BaselineKind::FedMinMax => {
            let cs =
                ConstraintSet::build(ConstraintKind::MinMax, split, BuildOptions::default(), &w0)?;
            pffl::run_from(split, &cs, &cfg.clone().fedminmax_preset(), &w0)?
        }
    };
    result.method = kind.name().into();
    Ok(result)
}

struct WeightedObjective<'a> {
    cfg: &'a PfflConfig,
    /// Multiplier per group.
    multipliers: Vec<f64>,
}

impl LocalObjective for WeightedObjective<'_> {
    fn gradient(
        &self,
        _client: usize,
        shard: &[Example],
        batch: Batch<'_>,
        w: &ModelParams,
    ) -> Vec<f64> {
        let n = batch.len(shard) as f64;
        let mean_mult = batch
            .examples(shard)
            .map(|e| self.multipliers[e.a])
            .sum::<f64>()
            / n;
        let mut g: Vec<f64> =
            w.w.iter()
                .map(|v| mean_mult * self.cfg.loss.ridge_mu * v)
                .collect();
        for e in batch.examples(shard) {
            add_cross_entropy_grad(w, &e.x, e.y, self.multipliers[e.a] / n, &mut g);
        }
        g
    }

    fn shares(&self, _client: usize, _shard: &[Example], _w: &ModelParams) -> Vec<f64> {
        Vec::new()
    }
}

fn run_group_weighted(
    weights: &[f64],
    split: &FederatedSplit,
    cfg: &PfflConfig,
    w0: &ModelParams,
) -> Result<RunResult> {
    if weights.len() != split.num_groups() {
        return Err(FairFedError::Config(format!(
            "{} group weights for {} groups",
            weights.len(),
            split.num_groups()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(FairFedError::Config(
            "group weights must be nonnegative and sum to 1".into(),
        ));
    }
    let n = split.total() as f64;
    let multipliers = weights
        .iter()
        .zip(split.group_counts())
        .map(|(w, &m)| w * n / m as f64)
        .collect();
    // β = 1 as for FedAvg, so the two share one step-size schedule.
    let cfg = PfflConfig {
        beta: 1.0,
        ..cfg.clone()
    };
    let objective = WeightedObjective {
        cfg: &cfg,
        multipliers,
    };
    primal_only(split, &cfg, w0, &objective)
}

/// FedAvg rounds on a fixed local objective; no server-side dual state.
fn primal_only(
    split: &FederatedSplit,
    cfg: &PfflConfig,
    w0: &ModelParams,
    objective: &dyn LocalObjective,
) -> Result<RunResult> {
    cfg.validate()?;
    let mut sched = ScheduleState::for_config(&cfg.round, split, &cfg.loss, cfg.beta, cfg.bound)?;
    let mut sampler = BatchSampler::new(seeded_batch(cfg), split.num_clients());
    let mut w = w0.clone();
    let mut sum = vec![0.0; w.dim()];
    let mut count = 0usize;
    let mut iterates = cfg.record_iterates.then(Vec::new);
    for _ in 0..cfg.epochs {
        let out = run_epoch(
            split,
            &w,
            objective,
            &cfg.round,
            &mut sched,
            &mut sampler,
            None,
        )?;
        for it in &out.iterates {
            sum.iter_mut().zip(&it.w).for_each(|(s, v)| *s += v);
        }
        count += out.iterates.len();
        w = out.last().clone();
        if let Some(its) = iterates.as_mut() {
            its.extend(out.iterates);
        }
    }
    let w_bar = ModelParams::from_vec(sum.iter().map(|s| s / count as f64).collect(), w.bias);
    Ok(ungated_result(w_bar, Vec::new(), cfg, iterates))
}

fn ungated_result(
    w_bar: ModelParams,
    r_bar: Vec<f64>,
    cfg: &PfflConfig,
    iterates: Option<Vec<ModelParams>>,
) -> RunResult {
    let gate = check_gate(&r_bar, cfg.m_bound, cfg.nu, cfg.bound);
    RunResult {
        method: String::new(),
        model: Some(w_bar.clone()),
        w_bar,
        verdict: Verdict::Ungated,
        max_violation: gate.max_violation,
        threshold: gate.threshold,
        r_bar,
        lambda_bar: Vec::new(),
        final_theta: Vec::new(),
        bound: cfg.bound,
        eta_theta: 0.0,
        rho: 0.0,
        epochs: Vec::new(),
        rounds: Vec::new(),
        iterates,
    }
}

struct LocalBglObjective<'a> {
    beta: f64,
    cfg: &'a PfflConfig,
    local: &'a [ConstraintSet],
    lambdas: Vec<Vec<f64>>,
}

impl LocalObjective for LocalBglObjective<'_> {
    fn gradient(
        &self,
        client: usize,
        shard: &[Example],
        batch: Batch<'_>,
        w: &ModelParams,
    ) -> Vec<f64> {
        let n = batch.len(shard) as f64;
        let mut g: Vec<f64> =
            w.w.iter()
                .map(|v| self.beta * self.cfg.loss.ridge_mu * v)
                .collect();
        if self.beta != 0.0 {
            for e in batch.examples(shard) {
                add_cross_entropy_grad(w, &e.x, e.y, self.beta / n, &mut g);
            }
        }
        let coverage = shard.len() as f64 / n;
        self.local[client].add_weighted_grad(
            batch.examples(shard),
            w,
            &self.lambdas[client],
            coverage,
            &mut g,
        );
        g
    }

    fn shares(&self, client: usize, shard: &[Example], w: &ModelParams) -> Vec<f64> {
        self.local[client].eval_client(shard, w)
    }
}

fn run_local_bgl(
    zeta: f64,
    bound: f64,
    eta_theta: Option<f64>,
    split: &FederatedSplit,
    cfg: &PfflConfig,
    w0: &ModelParams,
) -> Result<RunResult> {
    let cfg = PfflConfig {
        bound,
        eta_theta,
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut local = Vec::with_capacity(split.num_clients());
    let mut duals = Vec::with_capacity(split.num_clients());
    for shard in split.shards() {
        let mut cs = ConstraintSet::local_bgl(shard, split.num_groups(), zeta, 1.0)?;
        let r0 = cs.eval_client(shard, w0);
        let rho = crate::constraints::RHO_HEADROOM * r0.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rho = if rho > 0.0 { rho } else { 1.0 };
        cs = ConstraintSet::local_bgl(shard, split.num_groups(), zeta, rho)?;
        let eta = match eta_theta {
            Some(eta) => eta,
            None => default_eta_theta(cfg.nu, rho, bound)?,
        };
        duals.push(DualState::new(cs.len(), bound, eta)?);
        local.push(cs);
    }

    let mut sched = ScheduleState::for_config(&cfg.round, split, &cfg.loss, cfg.beta, bound)?;
    let mut sampler = BatchSampler::new(seeded_batch(&cfg), split.num_clients());
    let mut w = w0.clone();
    let mut sum = vec![0.0; w.dim()];
    let mut count = 0usize;
    let mut iterates = cfg.record_iterates.then(Vec::new);
    for _ in 0..cfg.epochs {
        let objective = LocalBglObjective {
            beta: cfg.beta,
            cfg: &cfg,
            local: &local,
            lambdas: duals.iter().map(DualState::lambda).collect(),
        };
        let out = run_epoch(
            split,
            &w,
            &objective,
            &cfg.round,
            &mut sched,
            &mut sampler,
            None,
        )?;
        for it in &out.iterates {
            sum.iter_mut().zip(&it.w).for_each(|(s, v)| *s += v);
        }
        count += out.iterates.len();
        w = out.last().clone();
        if let Some(its) = iterates.as_mut() {
            its.extend(out.iterates.iter().cloned());
        }
        for (dual, shares) in duals.iter_mut().zip(&out.client_shares) {
            dual.ascend(shares);
        }
    }
    let w_bar = ModelParams::from_vec(sum.iter().map(|s| s / count as f64).collect(), w.bias);
    // Reported against the global constraint at the same level.
    let global = ConstraintSet::build(
        ConstraintKind::Bgl { zeta },
        split,
        BuildOptions::default(),
        w0,
    )?;
    let r_bar = global.eval_global(split, &w_bar);
    Ok(ungated_result(w_bar, r_bar, &cfg, iterates))
}
