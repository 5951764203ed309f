//! Loading training data and splitting it across clients.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use fairfed::dataset::{
    partition_by_key, partition_dirichlet, read_csv, CsvSchema, FederatedSplit,
};
use fairfed::FairFedError;

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Training CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    pub label_col: String,
    #[arg(long, default_value = "group")]
    pub group_col: String,
    /// Column holding each row's client; otherwise rows are dealt out with
    /// a Dirichlet partition over `--clients`.
    #[arg(long)]
    pub client_col: Option<String>,
    #[arg(long)]
    pub clients: Option<usize>,
    /// Dirichlet concentration (smaller is more heterogeneous).
    #[arg(long, default_value_t = 1.0)]
    pub dirichlet_alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub partition_seed: u64,
    /// Keep the protected attribute as a feature.
    #[arg(long)]
    pub group_feature: bool,
}

pub struct LoadedSplit {
    pub split: FederatedSplit,
    pub group_names: Vec<String>,
}

pub fn load_split(args: &DataArgs, known_groups: Option<&[String]>) -> anyhow::Result<LoadedSplit> {
    let Some(path) = &args.data else {
        return Err(FairFedError::Config("--data is required".into()).into());
    };
    let mut schema = CsvSchema::new(&args.label_col, &args.group_col);
    schema.include_group_feature = args.group_feature;
    if let Some(col) = &args.client_col {
        schema = schema.with_client_column(col);
    }
    let loaded = read_csv(path, &schema, known_groups)?;
    let split = match (&loaded.client_keys, args.clients) {
        (Some(keys), _) => partition_by_key(&loaded.dataset, keys)?,
        (None, Some(k)) => partition_dirichlet(
            &loaded.dataset,
            k,
            args.dirichlet_alpha,
            args.partition_seed,
        )?,
        (None, None) => {
            return Err(FairFedError::Config(
                "give either --client-col or --clients for a Dirichlet split".into(),
            )
            .into())
        }
    };
    Ok(LoadedSplit {
        group_names: split.group_names().to_vec(),
        split,
    })
}
