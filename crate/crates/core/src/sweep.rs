//! Hyperparameter sweeps over the `B × ζ × seed` grid, the results table,
//! and Pareto-frontier extraction.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineKind};
use crate::config::Method;
use crate::constraints::{BuildOptions, ConstraintKind, ConstraintSet};
use crate::dataset::{
    make_synthetic, make_synthetic_test, Dataset, FederatedSplit, SyntheticConfig,
};
use crate::error::{FairFedError, Result};
use crate::linear_model::ModelParams;
use crate::metrics::{evaluate, gap};
use crate::pffl::{self, PfflConfig, RunResult, Verdict};

/// Bumped whenever the column set or its order changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "FAIRFED_THREADS";

/// Trains one model with `method`. `kind` supplies ζ for the constrained
/// methods and is ignored by FedAvg, group-weighted and FedMinMax.
pub fn train_method(
    method: Method,
    kind: Option<ConstraintKind>,
    split: &FederatedSplit,
    cfg: &PfflConfig,
    build: BuildOptions,
    group_weights: Option<&[f64]>,
) -> Result<RunResult> {
    let need_kind = || {
        kind.ok_or_else(|| {
            FairFedError::Config(format!("method {method} needs a fairness constraint"))
        })
    };
    match method {
        Method::Pffl => {
            let w0 = ModelParams::zeros(split.num_features(), cfg.loss.bias);
            let cs = ConstraintSet::build(need_kind()?, split, build, &w0)?;
            pffl::run_from(split, &cs, cfg, &w0)
        }
        Method::Fedavg => run_baseline(&BaselineKind::FedAvg, split, cfg),
        Method::GroupWeighted => {
            let kind = match group_weights {
                Some(w) => BaselineKind::GroupWeighted {
                    weights: w.to_vec(),
                },
                None => BaselineKind::uniform_group_weights(split.num_groups()),
            };
            run_baseline(&kind, split, cfg)
        }
        Method::LocalBgl => match need_kind()? {
            ConstraintKind::Bgl { zeta } => run_baseline(
                &BaselineKind::LocalBgl {
                    zeta,
                    bound: cfg.bound,
                    eta_theta: cfg.eta_theta,
                },
                split,
                cfg,
            ),
            other => Err(FairFedError::Config(format!(
                "local-bgl supports only bgl constraints, got {other:?}"
            ))),
        },
        Method::Fedminmax => run_baseline(&BaselineKind::FedMinMax, split, cfg),
    }
}

/// Where a sweep's data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Regenerated per seed (held-out test draw from the same clients).
    Synthetic(SyntheticConfig),
    /// Same data for every seed; seeds only change minibatch sampling.
    Fixed {
        description: String,
        train: Arc<FederatedSplit>,
        test: Option<Arc<Dataset>>,
    },
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub method: Method,
    pub bounds: Vec<f64>,
    /// One entry per ζ (or ζ_y pair) grid point.
    pub constraints: Vec<ConstraintKind>,
    pub template: PfflConfig,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub build: BuildOptions,
    pub group_weights: Option<Vec<f64>>,
    /// Oracle tolerance; `None` skips the (expensive) gap column.
    pub gap_tol: Option<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() || self.constraints.is_empty() || self.seeds.is_empty() {
            return Err(FairFedError::Config("sweep grids must be nonempty".into()));
        }
        for c in &self.constraints {
            c.validate()?;
        }
        self.template.validate()
    }

    pub fn total_runs(&self) -> usize {
        self.bounds.len() * self.constraints.len() * self.seeds.len()
    }

    /// Grid cells in output order: `B` outermost, then ζ, then seed.
    pub fn cells(&self) -> Vec<(f64, ConstraintKind, u64)> {
        let mut cells = Vec::with_capacity(self.total_runs());
        for &b in &self.bounds {
            for &c in &self.constraints {
                for &s in &self.seeds {
                    cells.push((b, c, s));
                }
            }
        }
        cells
    }
}

/// One results-table line. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "B")]
    pub bound: f64,
    pub zeta: String,
    pub seed: u64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub train_max_group_loss: f64,
    pub max_group_loss: f64,
    /// Per-group losses on the evaluation set, `;`-separated.
    pub group_losses: String,
    pub delta_dp: f64,
    pub delta_eo: f64,
    pub verdict: String,
    pub max_violation: f64,
    pub threshold: f64,
    pub gap: Option<f64>,
    /// Empty unless the cell failed.
    pub error: String,
    pub wall_time: f64,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.verdict == Verdict::Infeasible.to_string()
    }

    pub fn metric(&self, m: RowMetric) -> f64 {
        match m {
            RowMetric::ErrorRate => self.test_error.unwrap_or(self.train_error),
            RowMetric::TrainError => self.train_error,
            RowMetric::MaxGroupLoss => self.max_group_loss,
            RowMetric::DeltaDp => self.delta_dp,
            RowMetric::DeltaEo => self.delta_eo,
        }
    }

    fn failure(
        method: Method,
        bound: f64,
        kind: &ConstraintKind,
        seed: u64,
        err: &FairFedError,
        wall: f64,
    ) -> Self {
        Self {
            method: method.to_string(),
            bound,
            zeta: kind.zeta_label(),
            seed,
            train_error: f64::NAN,
            test_error: None,
            train_max_group_loss: f64::NAN,
            max_group_loss: f64::NAN,
            group_losses: String::new(),
            delta_dp: f64::NAN,
            delta_eo: f64::NAN,
            verdict: String::new(),
            max_violation: f64::NAN,
            threshold: f64::NAN,
            gap: None,
            error: err.to_string(),
            wall_time: wall,
        }
    }
}

/// Columns usable as frontier axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMetric {
    /// Test error when available, otherwise training error.
    ErrorRate,
    TrainError,
    MaxGroupLoss,
    DeltaDp,
    DeltaEo,
}

impl std::str::FromStr for RowMetric {
    type Err = FairFedError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "error_rate" | "test_error" => RowMetric::ErrorRate,
            "train_error" => RowMetric::TrainError,
            "max_group_loss" => RowMetric::MaxGroupLoss,
            "delta_dp" => RowMetric::DeltaDp,
            "delta_eo" => RowMetric::DeltaEo,
            other => return Err(FairFedError::Config(format!("unknown metric {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
}

impl SweepOutcome {
    /// True when no run produced a model (every verdict null or failed).
    pub fn all_null(&self) -> bool {
        self.rows.iter().all(|r| r.failed() || r.is_null())
    }
}

struct CellData {
    train: Arc<FederatedSplit>,
    train_flat: Arc<Dataset>,
    test: Option<Arc<Dataset>>,
}

fn materialize(spec: &SweepSpec) -> Result<Vec<CellData>> {
    match &spec.data {
        DataSource::Fixed { train, test, .. } => {
            let flat = Arc::new(train.to_dataset()?);
            Ok(spec
                .seeds
                .iter()
                .map(|_| CellData {
                    train: Arc::clone(train),
                    train_flat: Arc::clone(&flat),
                    test: test.clone(),
                })
                .collect())
        }
        DataSource::Synthetic(base) => spec
            .seeds
            .iter()
            .map(|&seed| {
                let (flat, split) = make_synthetic(&SyntheticConfig {
                    seed,
                    ..base.clone()
                })?;
                let test = make_synthetic_test(&SyntheticConfig {
                    seed,
                    ..base.clone()
                })?;
                Ok(CellData {
                    train: Arc::new(split),
                    train_flat: Arc::new(flat),
                    test: Some(Arc::new(test)),
                })
            })
            .collect(),
    }
}

fn run_cell(
    spec: &SweepSpec,
    bound: f64,
    kind: ConstraintKind,
    seed: u64,
    data: &CellData,
) -> ResultRow {
    let start = Instant::now();
    let cfg = PfflConfig {
        bound,
        seed,
        ..spec.template.clone()
    };
    let outcome = train_method(
        spec.method,
        Some(kind),
        &data.train,
        &cfg,
        spec.build,
        spec.group_weights.as_deref(),
    )
    .and_then(|res| {
        let gap_value = match (spec.gap_tol, res.lambda_bar.is_empty()) {
            (Some(tol), false) => {
                let w0 = ModelParams::zeros(data.train.num_features(), cfg.loss.bias);
                let cs = ConstraintSet::build(kind, &data.train, spec.build, &w0)?;
                Some(
                    gap(
                        &res.w_bar,
                        &res.lambda_bar,
                        &data.train,
                        &cs,
                        &cfg.loss,
                        cfg.beta,
                        res.bound,
                        tol,
                    )?
                    .gap,
                )
            }
            _ => None,
        };
        Ok((res, gap_value))
    });
    let wall = start.elapsed().as_secs_f64();
    let (res, gap_value) = match outcome {
        Ok(v) => v,
        Err(e) => {
            warn!(
                "sweep cell B={bound} zeta={} seed={seed} failed: {e}",
                kind.zeta_label()
            );
            return ResultRow::failure(spec.method, bound, &kind, seed, &e, wall);
        }
    };
    let train_report = evaluate(&res.w_bar, &data.train_flat);
    let eval_report = data.test.as_ref().map(|t| evaluate(&res.w_bar, t));
    let shown = eval_report.as_ref().unwrap_or(&train_report);
    ResultRow {
        method: spec.method.to_string(),
        bound,
        zeta: kind.zeta_label(),
        seed,
        train_error: train_report.error_rate,
        test_error: eval_report.as_ref().map(|r| r.error_rate),
        train_max_group_loss: train_report.max_group_loss,
        max_group_loss: shown.max_group_loss,
        group_losses: shown
            .group_losses
            .iter()
            .map(|l| l.map_or_else(String::new, |v| v.to_string()))
            .collect::<Vec<_>>()
            .join(";"),
        delta_dp: shown.delta_dp,
        delta_eo: shown.delta_eo,
        verdict: res.verdict.to_string(),
        max_violation: res.max_violation,
        threshold: res.threshold,
        gap: gap_value,
        error: String::new(),
        wall_time: wall,
    }
}

fn thread_cap() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            warn!("ignoring {THREADS_ENV}={raw:?}: expected a positive integer");
            None
        }
    }
}

/// Runs every grid cell. Cells may run in parallel; the returned rows are
/// always in [`SweepSpec::cells`] order. A failing cell becomes a row with
/// its error message instead of aborting the sweep.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    info!(
        "sweep: {} runs ({} B × {} ζ × {} seeds), method {}",
        spec.total_runs(),
        spec.bounds.len(),
        spec.constraints.len(),
        spec.seeds.len(),
        spec.method
    );
    let data = materialize(spec)?;
    let jobs: Vec<(f64, ConstraintKind, u64, usize)> = spec
        .cells()
        .into_iter()
        .map(|(b, c, s)| {
            (
                b,
                c,
                s,
                spec.seeds.iter().position(|&x| x == s).unwrap_or(0),
            )
        })
        .collect();
    let work = || -> Vec<ResultRow> {
        jobs.par_iter()
            .map(|&(b, c, s, di)| run_cell(spec, b, c, s, &data[di]))
            .collect()
    };
    let rows = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FairFedError::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(SweepOutcome { rows })
}

pub fn write_rows<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(FairFedError::from))
        .collect()
}

/// Writes `<path>` and the provenance manifest `<path>.manifest.json`.
pub fn write_results(spec: &SweepSpec, outcome: &SweepOutcome, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_rows(&outcome.rows, std::io::BufWriter::new(file))?;
    let data = match &spec.data {
        DataSource::Synthetic(cfg) => serde_json::json!({ "synthetic": cfg }),
        DataSource::Fixed { description, .. } => serde_json::json!({ "fixed": description }),
    };
    let manifest = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "code_version": env!("CARGO_PKG_VERSION"),
        "method": spec.method,
        "bounds": spec.bounds,
        "constraints": spec.constraints,
        "seeds": spec.seeds,
        "template": spec.template,
        "build": spec.build,
        "group_weights": spec.group_weights,
        "gap_tol": spec.gap_tol,
        "data": data,
        "runs": outcome.rows.len(),
        "failed": outcome.rows.iter().filter(|r| r.failed()).count(),
    });
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    let mut f = std::fs::File::create(name)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(())
}

/// Indices of the non-dominated points under joint minimization, sorted by
/// `x` (then `y`, then index). Identical points are all kept.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].0.is_finite() && points[i].1.is_finite())
        .collect();
    order.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[i].1.total_cmp(&points[j].1))
            .then(i.cmp(&j))
    });
    let mut keep = Vec::new();
    let mut best_y = f64::INFINITY;
    let mut last: Option<(f64, f64)> = None;
    for i in order {
        let p = points[i];
        // A point is dominated iff some earlier point (x' ≤ x) has y' < y,
        // or y' = y with x' < x. Exact duplicates of a kept point survive.
        let keep_it = p.1 < best_y || last == Some(p);
        if keep_it {
            keep.push(i);
            last = Some(p);
        }
        best_y = best_y.min(p.1);
    }
    keep
}

/// Non-dominated rows (minimize both metrics). Failed and null runs never
/// enter the frontier since they produce no usable model.
pub fn pareto_frontier(rows: &[ResultRow], x: RowMetric, y: RowMetric) -> Vec<ResultRow> {
    let usable: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| !r.failed() && !r.is_null())
        .collect();
    let points: Vec<(f64, f64)> = usable.iter().map(|r| (r.metric(x), r.metric(y))).collect();
    pareto_indices(&points)
        .into_iter()
        .map(|i| usable[i].clone())
        .collect()
}

/// Drops the named column from CSV text (for comparisons that ignore timing).
pub fn strip_column(csv_text: &str, column: &str) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let drop = headers.iter().position(|h| h == column);
    let mut w = csv::Writer::from_writer(Vec::new());
    let keep = |rec: &csv::StringRecord| -> Vec<String> {
        rec.iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != drop)
            .map(|(_, v)| v.to_string())
            .collect()
    };
    w.write_record(keep(&headers))?;
    for rec in rdr.records() {
        w.write_record(keep(&rec?))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| FairFedError::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| FairFedError::Validation(e.to_string()))
}
