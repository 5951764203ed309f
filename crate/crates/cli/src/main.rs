//! `fairfed` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 a sweep in
//! which no run produced a model, 4 minimization-oracle failure, 1 anything
//! else (I/O and the like).

mod data;
mod params;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use fairfed::config::{ConfigFile, Method};
use fairfed::constraints::{BuildOptions, ConstraintKind, ConstraintSet};
use fairfed::dataset::{make_synthetic, make_synthetic_test, write_csv, SyntheticConfig};
use fairfed::linear_model::ModelParams;
use fairfed::metrics::{evaluate, gap};
use fairfed::pffl::{suggest_m_bound, PfflConfig, RunResult};
use fairfed::sweep::{
    pareto_frontier, read_rows, run_sweep, train_method, write_results, write_rows, DataSource,
    RowMetric, SweepSpec,
};
use fairfed::theory_checks::verify_run;
use fairfed::FairFedError;

use data::DataArgs;
use params::{FairnessArgs, HyperArgs};

#[derive(Debug, Parser)]
#[command(name = "fairfed", version, about = "Fair federated learning simulator")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a heterogeneous two-group synthetic dataset (train.csv, test.csv).
    GenData(GenDataArgs),
    /// Train one model and write the run artifact (JSON).
    Train(TrainArgs),
    /// Evaluate a trained model on a CSV file.
    Eval(EvalArgs),
    /// Run a B × ζ × seed grid and write a results CSV plus manifest.
    Sweep(SweepArgs),
    /// Extract the Pareto frontier from a results CSV.
    Pareto(ParetoArgs),
    /// Duality gap of a trained run.
    Gap(GapArgs),
    /// Re-check a trained run's guarantees from the raw data.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    clients: usize,
    #[arg(long, default_value_t = 400)]
    n_per_client: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    /// 0: identical client mixtures; 1: single-group clients.
    #[arg(long, default_value_t = 0.9)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Key-value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[command(flatten)]
    fairness: FairnessArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Group weights for `group-weighted` (comma separated, sum 1).
    #[arg(long, value_delimiter = ',')]
    group_weights: Option<Vec<f64>>,
    /// Record the duality gap after every epoch with this oracle tolerance.
    #[arg(long)]
    record_gap: Option<f64>,
    /// Run artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch trace CSV.
    #[arg(long)]
    epoch_trace: Option<PathBuf>,
    /// Per-round trace CSV.
    #[arg(long)]
    round_trace: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run artifact written by `train`.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value = "group")]
    group_col: String,
    /// Evaluate the averaged iterate even when the gate returned no model.
    #[arg(long)]
    use_w_bar: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Grid over B (overrides `sweep.B`).
    #[arg(long = "bounds", value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
    /// Grid over ζ for bgl (overrides `sweep.zeta`).
    #[arg(long, value_delimiter = ',')]
    zetas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Fixed training data; synthetic data (`data.*` keys) when `--data` is absent.
    #[command(flatten)]
    data: DataArgs,
    /// Held-out data for fixed-data sweeps.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    group_weights: Option<Vec<f64>>,
    #[arg(long)]
    drop_empty_cells: bool,
    /// Add a duality-gap column with this oracle tolerance.
    #[arg(long)]
    gap_tol: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ParetoArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "error_rate")]
    x: RowMetric,
    #[arg(long, default_value = "max_group_loss")]
    y: RowMetric,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GapArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    result: PathBuf,
    /// Also check the duality gap against ν (runs the minimization oracle).
    #[arg(long)]
    gap_tol: Option<f64>,
}

/// Everything needed to reproduce or re-check a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainArtifact {
    method: Method,
    config: PfflConfig,
    constraint: Option<ConstraintKind>,
    build: BuildOptions,
    data: DataArgs,
    group_names: Vec<String>,
    result: RunResult,
}

impl TrainArtifact {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(FairFedError::from)
            .with_context(|| format!("parsing run artifact {}", path.display()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<FairFedError>() {
        Some(
            FairFedError::Config(_)
            | FairFedError::Validation(_)
            | FairFedError::Schema(_)
            | FairFedError::Parse { .. }
            | FairFedError::Partition(_)
            | FairFedError::Planning(_)
            | FairFedError::WouldOverwrite(_),
        ) => 2,
        Some(FairFedError::OracleFailure(_)) => 4,
        _ => 1,
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Pareto(a) => pareto(a),
        Command::Gap(a) => gap_cmd(a),
        Command::Verify(a) => verify(a),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(FairFedError::WouldOverwrite(path.to_path_buf()).into());
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // A closed pipe (`| head`) is not an error worth reporting.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<ExitCode> {
    let cfg = SyntheticConfig {
        clients: a.clients,
        n_per_client: a.n_per_client,
        features: a.features,
        skew: a.skew,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let train_path = a.out.join("train.csv");
    let test_path = a.out.join("test.csv");
    refuse_overwrite(&train_path, a.force)?;
    refuse_overwrite(&test_path, a.force)?;
    std::fs::create_dir_all(&a.out)?;
    let (_, split) = make_synthetic(&cfg)?;
    let test = make_synthetic_test(&cfg)?;
    write_csv(&train_path, &split.to_dataset()?, Some(&split.client_ids()))?;
    write_csv(&test_path, &test, None)?;
    info!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ConfigFile> {
    Ok(match path {
        Some(p) => {
            ConfigFile::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => ConfigFile::default(),
    })
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    refuse_overwrite(&a.out, a.force)?;
    let mut file = load_config(a.config.as_deref())?;
    a.hyper.overlay(&mut file.train);
    a.fairness.overlay(&mut file.fairness);
    let method = a.method.or(file.train.method).unwrap_or(Method::Pffl);
    let mut cfg = PfflConfig::default();
    file.apply_train(&mut cfg)?;
    cfg.record_gap = a.record_gap;
    let constraint = file.fairness_kind()?;
    let build = BuildOptions {
        drop_empty_cells: file.fairness.drop_empty_cells.unwrap_or(false),
        rho: file.fairness.rho,
    };
    let group_weights = a.group_weights.or(file.train.group_weights.clone());

    let loaded = data::load_split(&a.data, None)?;
    let split = &loaded.split;
    info!(
        "{} examples, {} features, {} groups, {} clients",
        split.total(),
        split.num_features(),
        split.num_groups(),
        split.num_clients()
    );
    if file.train.m_bound.is_none() {
        let suggested = suggest_m_bound(
            split,
            &ModelParams::zeros(split.num_features(), cfg.loss.bias),
        );
        info!(
            "M not set; using {} (max group loss at the initial model is {suggested:.4})",
            cfg.m_bound
        );
    }
    let result = train_method(
        method,
        constraint,
        split,
        &cfg,
        build,
        group_weights.as_deref(),
    )?;
    eprintln!(
        "{method}: verdict {}, max violation {:.6}, threshold {:.6}",
        result.verdict, result.max_violation, result.threshold
    );
    if let Some(p) = &a.epoch_trace {
        result.write_epoch_trace(p)?;
    }
    if let Some(p) = &a.round_trace {
        result.write_round_trace(p)?;
    }
    let artifact = TrainArtifact {
        method,
        config: cfg,
        constraint,
        build: BuildOptions {
            rho: (result.rho > 0.0).then_some(result.rho).or(build.rho),
            ..build
        },
        data: a.data,
        group_names: loaded.group_names,
        result,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&artifact)? + "\n")?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let artifact = TrainArtifact::load(&a.result)?;
    let model = match (&artifact.result.model, a.use_w_bar) {
        (Some(m), _) => m,
        (None, true) => &artifact.result.w_bar,
        (None, false) => {
            return Err(FairFedError::Config(
                "the run returned no model (feasibility gate failed); pass --use-w-bar to evaluate the averaged iterate".into(),
            )
            .into())
        }
    };
    let schema = fairfed::dataset::CsvSchema::new(&a.label_col, &a.group_col);
    let loaded = fairfed::dataset::read_csv(&a.data, &schema, Some(&artifact.group_names))?;
    if loaded.dataset.num_features() != model.w.len() - usize::from(model.bias) {
        bail!(FairFedError::Schema(format!(
            "data has {} features, model expects {}",
            loaded.dataset.num_features(),
            model.w.len() - usize::from(model.bias)
        )));
    }
    let report = evaluate(model, &loaded.dataset);
    print_json(&serde_json::json!({
        "group_names": loaded.dataset.group_names(),
        "report": report,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> anyhow::Result<ExitCode> {
    refuse_overwrite(&a.out, a.force)?;
    let mut file = load_config(a.config.as_deref())?;
    a.hyper.overlay(&mut file.train);
    let method = a.method.or(file.train.method).unwrap_or(Method::Pffl);
    let mut template = PfflConfig::default();
    file.apply_train(&mut template)?;

    let bounds = a.bounds.or(file.sweep.bounds.clone()).unwrap_or_default();
    let seeds = a
        .seeds
        .or(file.sweep.seeds.clone())
        .unwrap_or_else(|| vec![template.seed]);
    let constraints: Vec<ConstraintKind> = match (
        a.zetas.or(file.sweep.zeta.clone()),
        file.fairness.kind.as_deref(),
    ) {
        (Some(z), None | Some("bgl")) => z
            .into_iter()
            .map(|zeta| ConstraintKind::Bgl { zeta })
            .collect(),
        (Some(z), Some("cbgl")) => z
            .into_iter()
            .map(|v| ConstraintKind::Cbgl {
                zeta_by_label: [v, v],
            })
            .collect(),
        (_, Some("minmax")) => vec![ConstraintKind::MinMax],
        (None, _) => file.fairness_kind()?.into_iter().collect(),
        (Some(_), Some(other)) => bail!(FairFedError::Config(format!(
            "unknown fairness kind {other:?}"
        ))),
    };

    let data = match &a.data.data {
        Some(path) => {
            let args = &a.data;
            let loaded = data::load_split(args, None)?;
            let test = match &a.test_data {
                Some(p) => {
                    let schema = fairfed::dataset::CsvSchema::new(&args.label_col, &args.group_col);
                    Some(Arc::new(
                        fairfed::dataset::read_csv(p, &schema, Some(&loaded.group_names))?.dataset,
                    ))
                }
                None => None,
            };
            DataSource::Fixed {
                description: path.display().to_string(),
                train: Arc::new(loaded.split),
                test,
            }
        }
        None => {
            let mut cfg = SyntheticConfig::default();
            file.apply_data(&mut cfg);
            DataSource::Synthetic(cfg)
        }
    };
    let spec = SweepSpec {
        method,
        bounds,
        constraints,
        template,
        seeds,
        data,
        build: BuildOptions {
            drop_empty_cells: a.drop_empty_cells || file.fairness.drop_empty_cells.unwrap_or(false),
            rho: file.fairness.rho,
        },
        group_weights: a.group_weights.or(file.train.group_weights.clone()),
        gap_tol: a.gap_tol,
    };
    spec.validate()?;
    eprintln!("sweep: {} runs", spec.total_runs());
    let outcome = run_sweep(&spec)?;
    write_results(&spec, &outcome, &a.out)?;
    let failed = outcome.rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        warn!(
            "{failed} of {} runs failed; see the error column",
            outcome.rows.len()
        );
    }
    if outcome.all_null() {
        eprintln!("no run produced a model (all verdicts null or failed)");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn pareto(a: ParetoArgs) -> anyhow::Result<ExitCode> {
    let rows = read_rows(&a.results)?;
    if rows.is_empty() {
        bail!(FairFedError::Validation("results file has no rows".into()));
    }
    let front = pareto_frontier(&rows, a.x, a.y);
    match &a.out {
        Some(p) => write_rows(&front, std::fs::File::create(p)?)?,
        None => match write_rows(&front, std::io::stdout().lock()) {
            Err(FairFedError::Csv(e)) if matches!(e.kind(), csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::BrokenPipe) =>
                {}
            other => other?,
        },
    }
    Ok(ExitCode::SUCCESS)
}

/// Rebuilds the training split and constraint set recorded in an artifact.
fn rebuild(artifact: &TrainArtifact) -> anyhow::Result<(data::LoadedSplit, ConstraintSet)> {
    let loaded = data::load_split(&artifact.data, Some(&artifact.group_names))?;
    let split = &loaded.split;
    let w0 = ModelParams::zeros(split.num_features(), artifact.config.loss.bias);
    let cs = match (artifact.method, artifact.constraint) {
        (Method::Fedminmax, _) => {
            ConstraintSet::build(ConstraintKind::MinMax, split, artifact.build, &w0)?
        }
        (Method::Pffl | Method::LocalBgl, Some(kind)) => {
            ConstraintSet::build(kind, split, artifact.build, &w0)?
        }
        _ => ConstraintSet::empty(split.num_clients(), split.num_groups()),
    };
    Ok((loaded, cs))
}

fn effective_config(artifact: &TrainArtifact) -> PfflConfig {
    match artifact.method {
        Method::Fedminmax => artifact.config.clone().fedminmax_preset(),
        Method::Fedavg | Method::GroupWeighted => PfflConfig {
            beta: 1.0,
            ..artifact.config.clone()
        },
        _ => artifact.config.clone(),
    }
}

fn gap_cmd(a: GapArgs) -> anyhow::Result<ExitCode> {
    let artifact = TrainArtifact::load(&a.result)?;
    let res = &artifact.result;
    let Some(lambda_bar) = fairfed::theory_checks::reconstruct_lambda_bar(res) else {
        bail!(FairFedError::Config(format!(
            "method {} keeps no server-side dual variable; the gap is undefined",
            artifact.method
        )));
    };
    let (loaded, cs) = rebuild(&artifact)?;
    let cfg = effective_config(&artifact);
    let estimate = gap(
        &res.w_bar,
        &lambda_bar,
        &loaded.split,
        &cs,
        &cfg.loss,
        cfg.beta,
        res.bound,
        a.tol,
    )?;
    print_json(&serde_json::json!({
        "gap": estimate.gap,
        "upper": estimate.upper,
        "lower": estimate.lower,
        "oracle_tol": estimate.oracle_tol,
        "nu": cfg.nu,
        "within_nu": estimate.gap <= cfg.nu,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let artifact = TrainArtifact::load(&a.result)?;
    let (loaded, cs) = rebuild(&artifact)?;
    let cfg = effective_config(&artifact);
    let report = verify_run(&artifact.result, &loaded.split, &cs, &cfg, a.gap_tol)?;
    print_json(&report)?;
    if !report.all_pass() {
        warn!("at least one guarantee check failed; see the per-check fields");
    }
    if report.gap_vs_nu.as_ref().is_some_and(|g| g.error.is_some()) {
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}
