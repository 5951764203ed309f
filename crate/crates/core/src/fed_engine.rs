//! Simulated FedAvg rounds: broadcast, `J` local gradient steps per client,
//! uniform delta aggregation, and the step-size schedule.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dataset::{Example, FederatedSplit};
use crate::error::{FairFedError, Result};
use crate::linear_model::{
    add_cross_entropy_grad, smoothness_constants, LossSpec, ModelParams, Smoothness,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// `η_t = 2 / ((β+B) μ (γ+t))` with `γ = max{8κ, J}`.
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BatchMode {
    Full,
    Minibatch { size: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Local steps `J` per round.
    pub local_steps: usize,
    /// Rounds `T` per outer epoch.
    pub rounds: usize,
    pub schedule: StepSchedule,
    pub batch: BatchMode,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.rounds == 0 {
            return Err(FairFedError::Config(
                "local_steps and rounds must be ≥ 1".into(),
            ));
        }
        if let StepSchedule::Constant { eta } = self.schedule {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(FairFedError::Config(format!(
                    "eta_w must be positive, got {eta}"
                )));
            }
        }
        if let BatchMode::Minibatch { size: 0, .. } = self.batch {
            return Err(FairFedError::Config("minibatch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub gamma: f64,
    pub kappa: f64,
    pub mu: f64,
    pub beta: f64,
    pub bound: f64,
    /// Global round counter `t`.
    pub step: u64,
    constant: Option<f64>,
}

impl ScheduleState {
    pub fn theory(smooth: Smoothness, local_steps: usize, beta: f64, bound: f64) -> Self {
        Self {
            gamma: (8.0 * smooth.kappa).max(local_steps as f64),
            kappa: smooth.kappa,
            mu: smooth.mu,
            beta,
            bound,
            step: 0,
            constant: None,
        }
    }

    pub fn constant(eta: f64) -> Self {
        Self {
            gamma: 0.0,
            kappa: 0.0,
            mu: 0.0,
            beta: 0.0,
            bound: 0.0,
            step: 0,
            constant: Some(eta),
        }
    }

    pub fn for_config(
        cfg: &RoundConfig,
        split: &FederatedSplit,
        spec: &LossSpec,
        beta: f64,
        bound: f64,
    ) -> Result<Self> {
        match cfg.schedule {
            StepSchedule::Constant { eta } => Ok(Self::constant(eta)),
            StepSchedule::Theory => {
                if beta + bound <= 0.0 {
                    return Err(FairFedError::Config(
                        "theory schedule needs β + B > 0".into(),
                    ));
                }
                Ok(Self::theory(
                    smoothness_constants(split, spec)?,
                    cfg.local_steps,
                    beta,
                    bound,
                ))
            }
        }
    }

    pub fn step_size(&self) -> f64 {
        match self.constant {
            Some(eta) => eta,
            None => 2.0 / ((self.beta + self.bound) * self.mu * (self.gamma + self.step as f64)),
        }
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Examples a local step sees.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Full,
    Subset(&'a [usize]),
}

impl<'a> Batch<'a> {
    pub fn len(&self, shard: &[Example]) -> usize {
        match self {
            Batch::Full => shard.len(),
            Batch::Subset(idx) => idx.len(),
        }
    }

    pub fn is_empty(&self, shard: &[Example]) -> bool {
        self.len(shard) == 0
    }

    pub fn examples<'s>(&self, shard: &'s [Example]) -> Box<dyn Iterator<Item = &'s Example> + 's>
    where
        'a: 's,
    {
        match *self {
            Batch::Full => Box::new(shard.iter()),
            Batch::Subset(idx) => Box::new(idx.iter().map(move |&i| &shard[i])),
        }
    }
}

/// A client's local training objective.
pub trait LocalObjective {
    /// Gradient over `batch`, scaled to be unbiased for the full shard.
    fn gradient(
        &self,
        client: usize,
        shard: &[Example],
        batch: Batch<'_>,
        w: &ModelParams,
    ) -> Vec<f64>;

    /// Constraint shares the client reports back for weights `w`.
    fn shares(&self, client: usize, shard: &[Example], w: &ModelParams) -> Vec<f64>;
}

/// `β f_k(w) + K λᵀ r_{·,k}(w)`: the `×K` makes the uniform average of client
/// directions equal `∇G` for `G = βF + λᵀr`.
pub struct PfflObjective<'a> {
    pub beta: f64,
    pub spec: &'a LossSpec,
    pub constraints: &'a ConstraintSet,
    pub lambda: &'a [f64],
}

impl LocalObjective for PfflObjective<'_> {
    fn gradient(
        &self,
        _client: usize,
        shard: &[Example],
        batch: Batch<'_>,
        w: &ModelParams,
    ) -> Vec<f64> {
        let n = batch.len(shard) as f64;
        let mut g: Vec<f64> =
            w.w.iter()
                .map(|v| self.beta * self.spec.ridge_mu * v)
                .collect();
        if self.beta != 0.0 {
            for e in batch.examples(shard) {
                add_cross_entropy_grad(w, &e.x, e.y, self.beta / n, &mut g);
            }
        }
        let k = self.constraints.num_clients() as f64;
        let coverage = shard.len() as f64 / n;
        self.constraints.add_weighted_grad(
            batch.examples(shard),
            w,
            self.lambda,
            k * coverage,
            &mut g,
        );
        g
    }

    fn shares(&self, _client: usize, shard: &[Example], w: &ModelParams) -> Vec<f64> {
        self.constraints.eval_client(shard, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    /// `g_k = w_k^{t+1} − w^t`.
    pub delta: Vec<f64>,
    /// Constraint shares at the client's final local weights.
    pub shares: Vec<f64>,
}

/// Per-client minibatch index streams, seeded independently of scheduling.
pub struct BatchSampler {
    mode: BatchMode,
    rngs: Vec<ChaCha8Rng>,
    scratch: Vec<usize>,
}

impl BatchSampler {
    pub fn new(mode: BatchMode, num_clients: usize) -> Self {
        let rngs = match mode {
            BatchMode::Full => Vec::new(),
            BatchMode::Minibatch { seed, .. } => (0..num_clients)
                .map(|k| {
                    ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
                })
                .collect(),
        };
        Self {
            mode,
            rngs,
            scratch: Vec::new(),
        }
    }

    fn draw(&mut self, client: usize, shard_len: usize) -> Option<&[usize]> {
        match self.mode {
            BatchMode::Full => None,
            BatchMode::Minibatch { size, .. } if size >= shard_len => None,
            BatchMode::Minibatch { size, .. } => {
                self.scratch = index::sample(&mut self.rngs[client], shard_len, size).into_vec();
                self.scratch.sort_unstable();
                Some(&self.scratch)
            }
        }
    }
}

/// `J` gradient steps from the broadcast weights with a fixed step size.
pub fn local_update(
    client: usize,
    shard: &[Example],
    w: &ModelParams,
    local_steps: usize,
    eta: f64,
    objective: &dyn LocalObjective,
    sampler: &mut BatchSampler,
) -> Result<ClientUpdate> {
    let mut local = w.clone();
    for step in 0..local_steps {
        let batch = sampler
            .draw(client, shard.len())
            .map_or(Batch::Full, Batch::Subset);
        let g = objective.gradient(client, shard, batch, &local);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(FairFedError::DivergedClient { client, step });
        }
        for (wi, gi) in local.w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        if !local.is_finite() {
            return Err(FairFedError::DivergedClient { client, step });
        }
    }
    let shares = objective.shares(client, shard, &local);
    if shares.iter().any(|v| !v.is_finite()) {
        return Err(FairFedError::DivergedClient {
            client,
            step: local_steps,
        });
    }
    let delta = local.w.iter().zip(&w.w).map(|(a, b)| a - b).collect();
    Ok(ClientUpdate { delta, shares })
}

/// `w + (1/K) Σ_k g_k`, summed in client order.
pub fn aggregate(w: &ModelParams, deltas: &[Vec<f64>]) -> ModelParams {
    let k = deltas.len() as f64;
    let mut sum = vec![0.0; w.dim()];
    for d in deltas {
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
    }
    ModelParams::from_vec(
        w.w.iter().zip(&sum).map(|(a, s)| a + s / k).collect(),
        w.bias,
    )
}

/// Server state visible after each aggregation.
#[derive(Debug, Clone, Copy)]
pub struct RoundView<'a> {
    pub round: usize,
    pub global_step: u64,
    pub eta: f64,
    pub w: &'a ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutput {
    /// Post-aggregation iterates `w¹..w^T`.
    pub iterates: Vec<ModelParams>,
    /// Every client's shares evaluated at the final global iterate `w^T`.
    pub client_shares: Vec<Vec<f64>>,
    /// `Σ_k` of `client_shares`, reduced in client order.
    pub r_epoch: Vec<f64>,
}

impl EpochOutput {
    pub fn last(&self) -> &ModelParams {
        self.iterates
            .last()
            .expect("an epoch has at least one round")
    }
}

/// `T` rounds of broadcast → local update → aggregate, starting from `w0`.
pub fn run_epoch(
    split: &FederatedSplit,
    w0: &ModelParams,
    objective: &dyn LocalObjective,
    cfg: &RoundConfig,
    sched: &mut ScheduleState,
    sampler: &mut BatchSampler,
    mut observer: Option<&mut dyn FnMut(RoundView<'_>)>,
) -> Result<EpochOutput> {
    let mut w = w0.clone();
    let mut iterates = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let eta = sched.step_size();
        let mut deltas = Vec::with_capacity(split.num_clients());
        for (k, shard) in split.shards().iter().enumerate() {
            deltas
                .push(local_update(k, shard, &w, cfg.local_steps, eta, objective, sampler)?.delta);
        }
        w = aggregate(&w, &deltas);
        sched.advance();
        if let Some(obs) = observer.as_mut() {
            obs(RoundView {
                round,
                global_step: sched.step,
                eta,
                w: &w,
            });
        }
        iterates.push(w.clone());
    }
    let client_shares: Vec<Vec<f64>> = split
        .shards()
        .iter()
        .enumerate()
        .map(|(k, s)| objective.shares(k, s, &w))
        .collect();
    let z = client_shares.first().map_or(0, Vec::len);
    let mut r_epoch = vec![0.0; z];
    for shares in &client_shares {
        for (acc, v) in r_epoch.iter_mut().zip(shares) {
            *acc += v;
        }
    }
    Ok(EpochOutput {
        iterates,
        client_shares,
        r_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{BuildOptions, ConstraintKind};
    use crate::dataset::make_synthetic_hetero;
    use crate::linear_model::client_risk_grad;
    use approx::assert_relative_eq;

    fn setup(k: usize) -> (FederatedSplit, ConstraintSet, LossSpec) {
        let (_, split) = make_synthetic_hetero(k.max(2), 40, 3, 0.5, 3).unwrap();
        let split = if k == 1 { split.merged() } else { split };
        let w0 = ModelParams::zeros(3, true);
        let cs = ConstraintSet::build(
            ConstraintKind::Bgl { zeta: 0.4 },
            &split,
            BuildOptions::default(),
            &w0,
        )
        .unwrap();
        (split, cs, LossSpec::logistic(0.1, true))
    }

    #[test]
    fn theory_step_size_plug_in() {
        let smooth = Smoothness {
            mu: 1.0,
            l: 2.0,
            kappa: 2.0,
        };
        let mut s = ScheduleState::theory(smooth, 1, 1.0, 1.0);
        assert_eq!(s.gamma, 16.0);
        assert_relative_eq!(s.step_size(), 0.0625);
        let mut prev = s.step_size();
        for _ in 0..1000 {
            s.advance();
            let eta = s.step_size();
            assert!(eta < prev);
            prev = eta;
        }
        assert_eq!(ScheduleState::theory(smooth, 40, 1.0, 1.0).gamma, 40.0);
    }

    #[test]
    fn constant_schedule_ignores_step() {
        let mut s = ScheduleState::constant(0.3);
        for _ in 0..10 {
            s.advance();
        }
        assert_eq!(s.step_size(), 0.3);
    }

    #[test]
    fn one_local_step_unrolls_exactly() {
        let (split, cs, spec) = setup(3);
        let lambda = [0.3, 0.2];
        let obj = PfflObjective {
            beta: 0.7,
            spec: &spec,
            constraints: &cs,
            lambda: &lambda,
        };
        let w = ModelParams::from_vec(vec![0.1, -0.2, 0.3, 0.05], true);
        let mut sampler = BatchSampler::new(BatchMode::Full, 3);
        let shard = split.shard(1);
        let up = local_update(1, shard, &w, 1, 0.05, &obj, &mut sampler).unwrap();
        let gf = client_risk_grad(shard, &w, &spec);
        let gr = cs.grad_client(shard, &w, &lambda);
        for j in 0..w.dim() {
            let expected = -0.05 * (0.7 * gf[j] + 3.0 * gr[j]);
            assert_relative_eq!(up.delta[j], expected, epsilon = 1e-15);
        }
        assert_eq!(
            up.shares,
            cs.eval_client(
                shard,
                &ModelParams::from_vec(
                    w.w.iter().zip(&up.delta).map(|(a, d)| a + d).collect(),
                    true
                )
            )
        );
    }

    #[test]
    fn zero_lambda_is_local_erm() {
        let (split, cs, spec) = setup(2);
        let obj = PfflObjective {
            beta: 1.0,
            spec: &spec,
            constraints: &cs,
            lambda: &[0.0, 0.0],
        };
        let w = ModelParams::zeros(3, true);
        let mut sampler = BatchSampler::new(BatchMode::Full, 2);
        let up = local_update(0, split.shard(0), &w, 1, 0.1, &obj, &mut sampler).unwrap();
        let g = client_risk_grad(split.shard(0), &w, &spec);
        for (d, gi) in up.delta.iter().zip(g) {
            assert_relative_eq!(*d, -0.1 * gi, epsilon = 1e-16);
        }
    }

    #[test]
    fn aggregate_averages_uniformly() {
        let w = ModelParams::from_vec(vec![1.0, 2.0], false);
        let d = vec![0.5, -0.25];
        assert_eq!(
            aggregate(&w, &[d.clone(), d.clone(), d.clone()]).w,
            vec![1.5, 1.75]
        );
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        assert_eq!(aggregate(&w, &[d, neg]).w, w.w);
    }

    #[test]
    fn divergence_is_reported_with_client_and_step() {
        let (split, cs, spec) = setup(2);
        let obj = PfflObjective {
            beta: 1.0,
            spec: &spec,
            constraints: &cs,
            lambda: &[0.0, 0.0],
        };
        let w = ModelParams::zeros(3, true);
        let mut sampler = BatchSampler::new(BatchMode::Full, 2);
        let err = local_update(1, split.shard(1), &w, 50, 1e300, &obj, &mut sampler).unwrap_err();
        assert!(
            matches!(err, FairFedError::DivergedClient { client: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn epoch_trace_and_determinism() {
        let (split, cs, spec) = setup(3);
        let lambda = [0.2, 0.1];
        let obj = PfflObjective {
            beta: 1.0,
            spec: &spec,
            constraints: &cs,
            lambda: &lambda,
        };
        let cfg = RoundConfig {
            local_steps: 3,
            rounds: 7,
            schedule: StepSchedule::Theory,
            batch: BatchMode::Full,
        };
        let run = || {
            let mut sched = ScheduleState::for_config(&cfg, &split, &spec, 1.0, 1.0).unwrap();
            let mut sampler = BatchSampler::new(cfg.batch, 3);
            let out = run_epoch(
                &split,
                &ModelParams::zeros(3, true),
                &obj,
                &cfg,
                &mut sched,
                &mut sampler,
                None,
            )
            .unwrap();
            (out, sched.step)
        };
        let (a, steps) = run();
        let (b, _) = run();
        assert_eq!(steps, 7);
        assert_eq!(a.iterates.len(), 7);
        assert!(a.iterates.iter().all(ModelParams::is_finite));
        let bits = |o: &EpochOutput| -> Vec<u64> {
            o.iterates
                .iter()
                .flat_map(|m| m.w.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let direct = cs.eval_global(&split, a.last());
        for (x, y) in a.r_epoch.iter().zip(direct) {
            assert_relative_eq!(*x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn minibatch_is_seeded() {
        let (split, cs, spec) = setup(2);
        let obj = PfflObjective {
            beta: 1.0,
            spec: &spec,
            constraints: &cs,
            lambda: &[0.1, 0.1],
        };
        let cfg = RoundConfig {
            local_steps: 2,
            rounds: 4,
            schedule: StepSchedule::Constant { eta: 0.1 },
            batch: BatchMode::Minibatch { size: 8, seed: 42 },
        };
        let run = |seed| {
            let cfg = RoundConfig {
                batch: BatchMode::Minibatch { size: 8, seed },
                ..cfg
            };
            let mut sched = ScheduleState::constant(0.1);
            let mut sampler = BatchSampler::new(cfg.batch, 2);
            run_epoch(
                &split,
                &ModelParams::zeros(3, true),
                &obj,
                &cfg,
                &mut sched,
                &mut sampler,
                None,
            )
            .unwrap()
            .iterates
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn config_validation() {
        let mut cfg = RoundConfig {
            local_steps: 1,
            rounds: 1,
            schedule: StepSchedule::Constant { eta: 0.1 },
            batch: BatchMode::Full,
        };
        assert!(cfg.validate().is_ok());
        cfg.local_steps = 0;
        assert!(cfg.validate().is_err());
        cfg.local_steps = 1;
        cfg.schedule = StepSchedule::Constant { eta: -1.0 };
        assert!(cfg.validate().is_err());
    }
}
