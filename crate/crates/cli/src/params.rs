//! Training flags. Each one overrides the matching config-file key.

use clap::Args;

use fairfed::config::{AutoOr, FairnessSection, TrainSection};

#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// Outer epochs E.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Rounds T per epoch.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Local steps J per round.
    #[arg(long)]
    pub local_steps: Option<usize>,
    /// `theory` (decaying) or `constant`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Constant primal step size.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Minibatch size (full batch when absent).
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Dual budget B.
    #[arg(long = "B")]
    pub bound: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    /// Loss bound M used by the feasibility gate.
    #[arg(long = "M")]
    pub m_bound: Option<f64>,
    /// Dual step size, or `auto` for ν/(2ρ²B).
    #[arg(long)]
    pub eta_theta: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ridge strength μ.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub no_bias: bool,
    /// Experimental: average only the last k epochs.
    #[arg(long)]
    pub tail_average: Option<usize>,
}

impl HyperArgs {
    pub fn overlay(&self, t: &mut TrainSection) {
        macro_rules! over {
            ($($field:ident),*) => {$(
                if self.$field.is_some() {
                    t.$field = self.$field.clone();
                }
            )*};
        }
        over!(
            epochs,
            rounds,
            local_steps,
            schedule,
            eta,
            batch_size,
            beta,
            bound,
            nu,
            m_bound,
            seed,
            mu,
            tail_average
        );
        if let Some(raw) = &self.eta_theta {
            t.eta_theta = Some(match raw.parse::<f64>() {
                Ok(v) => AutoOr::Value(v),
                Err(_) => AutoOr::Keyword(raw.clone()),
            });
        }
        if self.no_bias {
            t.bias = Some(false);
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FairnessArgs {
    /// `bgl`, `cbgl` or `minmax`.
    #[arg(long)]
    pub fairness: Option<String>,
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Per-label thresholds for cbgl, e.g. `0.3,0.5`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub zeta_y: Option<Vec<f64>>,
    /// Drop cbgl cells with no examples instead of failing.
    #[arg(long)]
    pub drop_empty_cells: bool,
    /// Override the constraint-magnitude bound ρ.
    #[arg(long)]
    pub rho: Option<f64>,
}

impl FairnessArgs {
    pub fn overlay(&self, f: &mut FairnessSection) {
        if self.fairness.is_some() {
            f.kind = self.fairness.clone();
        }
        if self.zeta.is_some() {
            f.zeta = self.zeta;
        }
        if let Some(z) = &self.zeta_y {
            f.zeta_y = Some([z[0], z[1]]);
        }
        if self.drop_empty_cells {
            f.drop_empty_cells = Some(true);
        }
        if self.rho.is_some() {
            f.rho = self.rho;
        }
    }
}
