//! Fairness constraint vector `r(w) ∈ R^Z` and its additive per-client shares.
//!
//! For bounded group loss the `a`-th constraint is
//! `r_a = Σ_k [(1/m_a) Σ_{i ∈ k, a_i = a} l_i − ζ/K]`; the conditional variant
//! indexes cells by `(a, y)` and normalizes by `m_{a,y}`. Clients normalize by
//! the global counts, so the shares sum exactly to the centralized value.

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, FederatedSplit, NUM_LABELS};
use crate::error::{FairFedError, Result};
use crate::linear_model::{add_cross_entropy_grad, cross_entropy, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConstraintKind {
    Bgl { zeta: f64 },
    Cbgl { zeta_by_label: [f64; NUM_LABELS] },
    MinMax,
}

impl ConstraintKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ConstraintKind::Bgl { zeta } => *zeta >= 0.0 && zeta.is_finite(),
            ConstraintKind::Cbgl { zeta_by_label } => {
                zeta_by_label.iter().all(|z| *z >= 0.0 && z.is_finite())
            }
            ConstraintKind::MinMax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(FairFedError::Config(format!(
                "constraint thresholds must be finite and ≥ 0: {self:?}"
            )))
        }
    }

    /// Compact label used in result tables: `0.3` or `0.1;0.5`.
    pub fn zeta_label(&self) -> String {
        match self {
            ConstraintKind::Bgl { zeta } => format!("{zeta}"),
            ConstraintKind::Cbgl { zeta_by_label } => {
                format!("{};{}", zeta_by_label[0], zeta_by_label[1])
            }
            ConstraintKind::MinMax => "0".into(),
        }
    }
}

/// What a constraint index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Group(usize),
    GroupLabel(usize, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Remove (with a warning) CBGL cells that have no examples globally
    /// instead of failing.
    pub drop_empty_cells: bool,
    /// Override for the `‖r‖_∞` bound; measured at the initial model otherwise.
    pub rho: Option<f64>,
}

/// Headroom applied to `max_z |r_z(w⁰)|` when `rho` is not configured.
pub const RHO_HEADROOM: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    kind: Option<ConstraintKind>,
    cells: Vec<Cell>,
    thresholds: Vec<f64>,
    counts: Vec<usize>,
    num_clients: usize,
    num_groups: usize,
    /// `(a, y)` flattened → constraint index.
    lookup: Vec<Option<usize>>,
    rho: f64,
}

impl ConstraintSet {
    /// Builds the constraints for `kind` from the split's global counts.
    pub fn build(
        kind: ConstraintKind,
        split: &FederatedSplit,
        opts: BuildOptions,
        init: &ModelParams,
    ) -> Result<Self> {
        kind.validate()?;
        let num_groups = split.num_groups();
        let mut cells = Vec::new();
        let mut thresholds = Vec::new();
        let mut counts = Vec::new();
        let mut lookup = vec![None; num_groups * NUM_LABELS];
        match kind {
            ConstraintKind::Bgl { .. } | ConstraintKind::MinMax => {
                let zeta = match kind {
                    ConstraintKind::Bgl { zeta } => zeta,
                    _ => 0.0,
                };
                for (a, &m) in split.group_counts().iter().enumerate() {
                    if m == 0 {
                        return Err(FairFedError::Validation(format!(
                            "group {a} has no training examples"
                        )));
                    }
                    lookup[a * NUM_LABELS] = Some(cells.len());
                    lookup[a * NUM_LABELS + 1] = Some(cells.len());
                    cells.push(Cell::Group(a));
                    thresholds.push(zeta);
                    counts.push(m);
                }
            }
            ConstraintKind::Cbgl { zeta_by_label } => {
                for (a, row) in split.cell_counts().iter().enumerate() {
                    for (y, &m) in row.iter().enumerate() {
                        if m == 0 {
                            if opts.drop_empty_cells {
                                log::warn!("dropping empty constraint cell (group {a}, label {y})");
                                continue;
                            }
                            return Err(FairFedError::Validation(format!(
                                "constraint cell (group {a}, label {y}) has no training examples; \
                                 use --drop-empty-cells to remove it"
                            )));
                        }
                        lookup[a * NUM_LABELS + y] = Some(cells.len());
                        cells.push(Cell::GroupLabel(a, y as u8));
                        thresholds.push(zeta_by_label[y]);
                        counts.push(m);
                    }
                }
            }
        }
        let mut cs = Self {
            kind: Some(kind),
            cells,
            thresholds,
            counts,
            num_clients: split.num_clients(),
            num_groups,
            lookup,
            rho: 1.0,
        };
        cs.rho = match opts.rho {
            Some(rho) if rho > 0.0 && rho.is_finite() => rho,
            Some(rho) => {
                return Err(FairFedError::Config(format!(
                    "rho must be positive, got {rho}"
                )))
            }
            None => {
                let r0 = cs.eval_global(split, init);
                let measured = RHO_HEADROOM * r0.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if measured > 0.0 {
                    measured
                } else {
                    log::warn!("constraints vanish at the initial model; using rho = 1");
                    1.0
                }
            }
        };
        Ok(cs)
    }

    /// No constraints (`Z = 0`).
    pub fn empty(num_clients: usize, num_groups: usize) -> Self {
        Self {
            kind: None,
            cells: Vec::new(),
            thresholds: Vec::new(),
            counts: Vec::new(),
            num_clients,
            num_groups,
            lookup: vec![None; num_groups * NUM_LABELS],
            rho: 1.0,
        }
    }

    /// Bounded group loss over one client's own data: local counts `m_{a,k}`,
    /// threshold `zeta` (not divided by K) and only the groups present locally.
    pub fn local_bgl(shard: &[Example], num_groups: usize, zeta: f64, rho: f64) -> Result<Self> {
        ConstraintKind::Bgl { zeta }.validate()?;
        let mut local_counts = vec![0usize; num_groups];
        for e in shard {
            local_counts[e.a] += 1;
        }
        let mut cs = Self::empty(1, num_groups);
        cs.kind = Some(ConstraintKind::Bgl { zeta });
        cs.rho = rho;
        for (a, &m) in local_counts.iter().enumerate() {
            if m > 0 {
                cs.lookup[a * NUM_LABELS] = Some(cs.cells.len());
                cs.lookup[a * NUM_LABELS + 1] = Some(cs.cells.len());
                cs.cells.push(Cell::Group(a));
                cs.thresholds.push(zeta);
                cs.counts.push(m);
            }
        }
        Ok(cs)
    }

    pub fn kind(&self) -> Option<ConstraintKind> {
        self.kind
    }

    /// Number of constraints `Z`.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Global example count behind each constraint.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn constraint_of(&self, e: &Example) -> Option<usize> {
        self.lookup
            .get(e.a * NUM_LABELS + e.y as usize)
            .copied()
            .flatten()
    }

    /// Shares `r_{·,k}` of one client. Constraints with no local examples
    /// contribute exactly `−ζ_z/K`.
    pub fn eval_client(&self, shard: &[Example], m: &ModelParams) -> Vec<f64> {
        let mut sums = vec![0.0; self.len()];
        for e in shard {
            if let Some(z) = self.constraint_of(e) {
                sums[z] += cross_entropy(m, &e.x, e.y);
            }
        }
        let k = self.num_clients as f64;
        sums.iter()
            .zip(&self.counts)
            .zip(&self.thresholds)
            .map(|((s, &count), zeta)| s / count as f64 - zeta / k)
            .collect()
    }

    /// `r_z = Σ_k r_{z,k}`, reduced in client order.
    pub fn eval_global(&self, split: &FederatedSplit, m: &ModelParams) -> Vec<f64> {
        let mut r = vec![0.0; self.len()];
        for shard in split.shards() {
            for (acc, v) in r.iter_mut().zip(self.eval_client(shard, m)) {
                *acc += v;
            }
        }
        r
    }

    /// Adds `scale · Σ_z λ_z (1/m_z) Σ_{i ∈ cell z} ∇CE_i` over `examples`.
    pub fn add_weighted_grad<'a>(
        &self,
        examples: impl IntoIterator<Item = &'a Example>,
        m: &ModelParams,
        lambda: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        if self.is_empty() || lambda.iter().all(|&l| l == 0.0) {
            return;
        }
        for e in examples {
            if let Some(z) = self.constraint_of(e) {
                let coef = scale * lambda[z] / self.counts[z] as f64;
                if coef != 0.0 {
                    add_cross_entropy_grad(m, &e.x, e.y, coef, out);
                }
            }
        }
    }

    /// `∇_w λᵀ r_{·,k}(w)` using unregularized loss gradients.
    pub fn grad_client(&self, shard: &[Example], m: &ModelParams, lambda: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; m.dim()];
        self.add_weighted_grad(shard, m, lambda, 1.0, &mut g);
        g
    }

    /// BGL level implied by CBGL thresholds for each group:
    /// `Σ_y (m_{a,y}/m_a) ζ_y`. `None` unless this is a CBGL set.
    pub fn implied_bgl_levels(&self, split: &FederatedSplit) -> Option<Vec<f64>> {
        let ConstraintKind::Cbgl { zeta_by_label } = self.kind? else {
            return None;
        };
        Some(
            split
                .cell_counts()
                .iter()
                .zip(split.group_counts())
                .map(|(row, &m)| {
                    row.iter()
                        .zip(&zeta_by_label)
                        .map(|(&my, z)| my as f64 / m as f64 * z)
                        .sum()
                })
                .collect(),
        )
    }
}
