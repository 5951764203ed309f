//! Tabular data model, CSV ingestion and federated partitioning.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FairFedError, Result};

/// Number of label values; only binary tasks are supported.
pub const NUM_LABELS: usize = 2;

/// Resampling attempts before `partition_dirichlet` gives up on empty shards.
pub const MAX_PARTITION_RETRIES: u64 = 64;

/// One observation `(x, y, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: u8,
    pub a: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: u8, a: usize) -> Self {
        Self { x, y, a }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_features: usize,
    group_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset in which every group named in `group_names` occurs.
    pub fn new(examples: Vec<Example>, group_names: Vec<String>) -> Result<Self> {
        let ds = Self::with_groups(examples, group_names)?;
        let counts = ds.group_counts();
        if let Some(a) = counts.iter().position(|&c| c == 0) {
            return Err(FairFedError::Validation(format!(
                "group {} ({:?}) has no examples",
                a, ds.group_names[a]
            )));
        }
        Ok(ds)
    }

    /// Builds a dataset over a known group vocabulary where some groups may
    /// be absent (held-out evaluation data).
    pub fn with_groups(examples: Vec<Example>, group_names: Vec<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(FairFedError::Validation("dataset is empty".into()));
        }
        if group_names.is_empty() {
            return Err(FairFedError::Validation("no protected groups".into()));
        }
        let num_features = examples[0].x.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != num_features {
                return Err(FairFedError::Validation(format!(
                    "example {i} has {} features, expected {num_features}",
                    ex.x.len()
                )));
            }
            if ex.y > 1 {
                return Err(FairFedError::Validation(format!(
                    "example {i}: label {} not in {{0,1}}",
                    ex.y
                )));
            }
            if ex.a >= group_names.len() {
                return Err(FairFedError::Validation(format!(
                    "example {i}: group id {} out of range (|A| = {})",
                    ex.a,
                    group_names.len()
                )));
            }
            if ex.x.iter().any(|v| !v.is_finite()) {
                return Err(FairFedError::Validation(format!(
                    "example {i} has a non-finite feature"
                )));
            }
        }
        Ok(Self {
            examples,
            num_features,
            group_names,
        })
    }

    /// Builds a dataset with anonymous group names `g0, g1, ...`.
    pub fn from_examples(examples: Vec<Example>, num_groups: usize) -> Result<Self> {
        Self::new(examples, (0..num_groups).map(|a| format!("g{a}")).collect())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for ex in &self.examples {
            counts[ex.a] += 1;
        }
        counts
    }
}

/// Column roles for CSV ingestion. Every other column is a numeric feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub group_column: String,
    pub client_column: Option<String>,
    /// Re-include the protected attribute (its dense id) as a trailing feature.
    pub include_group_feature: bool,
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>, group_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            group_column: group_column.into(),
            client_column: None,
            include_group_feature: false,
        }
    }

    pub fn with_client_column(mut self, column: impl Into<String>) -> Self {
        self.client_column = Some(column.into());
        self
    }
}

/// Result of reading a CSV file: the dataset plus the optional client key
/// column (one entry per example) and the feature column names.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub client_keys: Option<Vec<String>>,
    pub feature_names: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    Ok(read_csv(path.as_ref(), schema, None)?.dataset)
}

/// Reads a CSV file, re-indexing groups densely in first-appearance order.
pub fn read_csv(
    path: &Path,
    schema: &CsvSchema,
    known_groups: Option<&[String]>,
) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| FairFedError::Schema(format!("missing column {name:?}")))
    };
    let label_idx = find(&schema.label_column)?;
    let group_idx = find(&schema.group_column)?;
    let client_idx = schema.client_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && i != group_idx && Some(i) != client_idx)
        .collect();
    let feature_names = feature_idx
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();

    let mut group_names: Vec<String> = known_groups.map(<[String]>::to_vec).unwrap_or_default();
    let mut group_ids: HashMap<String, usize> = group_names
        .iter()
        .enumerate()
        .map(|(i, g)| (g.clone(), i))
        .collect();
    let mut examples = Vec::new();
    let mut client_keys = client_idx.map(|_| Vec::new());

    for record in reader.records() {
        let record = record?;
        let row = record
            .position()
            .map_or(examples.len() + 2, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("").trim();

        let mut x = Vec::with_capacity(feature_idx.len() + 1);
        for &i in &feature_idx {
            let v: f64 = field(i).parse().map_err(|_| FairFedError::Parse {
                row,
                message: format!(
                    "non-numeric value {:?} in feature column {:?}",
                    field(i),
                    &headers[i]
                ),
            })?;
            if !v.is_finite() {
                return Err(FairFedError::Parse {
                    row,
                    message: format!("non-finite value in feature column {:?}", &headers[i]),
                });
            }
            x.push(v);
        }

        let y = parse_label(field(label_idx)).ok_or_else(|| FairFedError::Parse {
            row,
            message: format!("label not in {{0,1}}: {:?}", field(label_idx)),
        })?;

        let group = field(group_idx).to_string();
        let a = match group_ids.get(&group) {
            Some(&a) => a,
            None if known_groups.is_some() => {
                return Err(FairFedError::Validation(format!(
                    "row {row}: group {group:?} not present in the training vocabulary"
                )))
            }
            None => {
                let a = group_names.len();
                group_ids.insert(group.clone(), a);
                group_names.push(group);
                a
            }
        };
        if schema.include_group_feature {
            x.push(a as f64);
        }
        if let (Some(keys), Some(ci)) = (client_keys.as_mut(), client_idx) {
            keys.push(field(ci).to_string());
        }
        examples.push(Example::new(x, y, a));
    }

    let dataset = if known_groups.is_some() {
        Dataset::with_groups(examples, group_names)?
    } else {
        Dataset::new(examples, group_names)?
    };
    Ok(LoadedCsv {
        dataset,
        client_keys,
        feature_names,
    })
}

fn parse_label(s: &str) -> Option<u8> {
    match s.parse::<f64>() {
        Ok(0.0) => Some(0),
        Ok(1.0) => Some(1),
        _ => None,
    }
}

/// Writes `f1..fp,label,group[,client]` with shortest round-trip float
/// formatting, so that write → read → write is byte-identical.
pub fn write_csv(path: &Path, dataset: &Dataset, client_ids: Option<&[usize]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=dataset.num_features())
        .map(|j| format!("f{j}"))
        .collect();
    header.push("label".into());
    header.push("group".into());
    if client_ids.is_some() {
        header.push("client".into());
    }
    writer.write_record(&header)?;
    for (i, ex) in dataset.examples().iter().enumerate() {
        let mut row: Vec<String> = ex.x.iter().map(|v| format!("{v}")).collect();
        row.push(ex.y.to_string());
        row.push(dataset.group_names()[ex.a].clone());
        if let Some(ids) = client_ids {
            row.push(ids[i].to_string());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Client-partitioned training data plus the global group statistics every
/// client receives at setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    shards: Vec<Vec<Example>>,
    group_counts: Vec<usize>,
    cell_counts: Vec<[usize; NUM_LABELS]>,
    num_features: usize,
    group_names: Vec<String>,
}

impl FederatedSplit {
    pub fn from_shards(shards: Vec<Vec<Example>>, group_names: Vec<String>) -> Result<Self> {
        if shards.is_empty() {
            return Err(FairFedError::Partition(
                "at least one client is required".into(),
            ));
        }
        if let Some(k) = shards.iter().position(Vec::is_empty) {
            return Err(FairFedError::Partition(format!(
                "client {k} has an empty shard"
            )));
        }
        let num_groups = group_names.len();
        let num_features = shards[0][0].x.len();
        let mut group_counts = vec![0usize; num_groups];
        let mut cell_counts = vec![[0usize; NUM_LABELS]; num_groups];
        for ex in shards.iter().flatten() {
            if ex.x.len() != num_features {
                return Err(FairFedError::Validation(
                    "feature dimension differs across shards".into(),
                ));
            }
            if ex.a >= num_groups || ex.y as usize >= NUM_LABELS {
                return Err(FairFedError::Validation(format!(
                    "example with group {} / label {} outside the vocabulary",
                    ex.a, ex.y
                )));
            }
            group_counts[ex.a] += 1;
            cell_counts[ex.a][ex.y as usize] += 1;
        }
        Ok(Self {
            shards,
            group_counts,
            cell_counts,
            num_features,
            group_names,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Vec<Example>] {
        &self.shards
    }

    pub fn shard(&self, k: usize) -> &[Example] {
        &self.shards[k]
    }

    /// Global per-group counts `m_a`.
    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    /// Global per-(group, label) counts `m_{a,y}`.
    pub fn cell_counts(&self) -> &[[usize; NUM_LABELS]] {
        &self.cell_counts
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.shards.iter().flatten()
    }

    /// Client id of every example, in shard order.
    pub fn client_ids(&self) -> Vec<usize> {
        self.shards
            .iter()
            .enumerate()
            .flat_map(|(k, s)| std::iter::repeat_n(k, s.len()))
            .collect()
    }

    /// All shards concatenated in client order.
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::with_groups(self.examples().cloned().collect(), self.group_names.clone())
    }

    /// The same data held by a single client (centralized setting).
    pub fn merged(&self) -> Self {
        Self {
            shards: vec![self.examples().cloned().collect()],
            group_counts: self.group_counts.clone(),
            cell_counts: self.cell_counts.clone(),
            num_features: self.num_features,
            group_names: self.group_names.clone(),
        }
    }
}

/// One shard per distinct key, ordered by first appearance.
pub fn partition_by_key<K: Eq + Hash + Clone>(ds: &Dataset, keys: &[K]) -> Result<FederatedSplit> {
    if keys.len() != ds.len() {
        return Err(FairFedError::Partition(format!(
            "{} client keys for {} examples",
            keys.len(),
            ds.len()
        )));
    }
    let mut slot: HashMap<K, usize> = HashMap::new();
    let mut shards: Vec<Vec<Example>> = Vec::new();
    for (ex, key) in ds.examples().iter().zip(keys) {
        let k = *slot.entry(key.clone()).or_insert_with(|| {
            shards.push(Vec::new());
            shards.len() - 1
        });
        shards[k].push(ex.clone());
    }
    FederatedSplit::from_shards(shards, ds.group_names().to_vec())
}

/// Non-IID split: for every (group, label) cell, client proportions are drawn
/// from a symmetric Dirichlet(alpha) and the cell's examples are dealt out
/// accordingly. Assignments leaving a client empty are redrawn with the next
/// seed, up to [`MAX_PARTITION_RETRIES`] times.
pub fn partition_dirichlet(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<FederatedSplit> {
    if clients == 0 {
        return Err(FairFedError::Partition("K must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FairFedError::Partition(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if ds.len() < clients {
        return Err(FairFedError::Partition(format!(
            "{} examples cannot fill {clients} clients",
            ds.len()
        )));
    }
    if clients == 1 {
        return FederatedSplit::from_shards(
            vec![ds.examples().to_vec()],
            ds.group_names().to_vec(),
        );
    }

    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); ds.num_groups() * NUM_LABELS];
    for (i, ex) in ds.examples().iter().enumerate() {
        cells[ex.a * NUM_LABELS + ex.y as usize].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FairFedError::Partition(e.to_string()))?;

    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut owner = vec![0usize; ds.len()];
        for cell in &cells {
            if cell.is_empty() {
                continue;
            }
            let proportions = sample_dirichlet(&gamma, clients, &mut rng);
            let mut members = cell.clone();
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (k, p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if k + 1 == clients {
                    members.len()
                } else {
                    ((cumulative * n).round() as usize).clamp(start, members.len())
                };
                for &i in &members[start..end] {
                    owner[i] = k;
                }
                start = end;
            }
        }
        let mut shards: Vec<Vec<Example>> = vec![Vec::new(); clients];
        for (i, ex) in ds.examples().iter().enumerate() {
            shards[owner[i]].push(ex.clone());
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return FederatedSplit::from_shards(shards, ds.group_names().to_vec());
        }
        log::debug!("dirichlet partition attempt {attempt} left a client empty; resampling");
    }
    Err(FairFedError::Partition(format!(
        "could not produce {clients} nonempty shards after {MAX_PARTITION_RETRIES} attempts; \
         try a larger alpha or fewer clients"
    )))
}

fn sample_dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny alpha can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Parameters of the heterogeneous two-group generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub clients: usize,
    pub n_per_client: usize,
    pub features: usize,
    /// 0: every client has the global group mixture; 1: clients are
    /// single-group.
    pub skew: f64,
    pub seed: u64,
    /// Group-1 share of a client at skew 0.
    pub minority_fraction: f64,
    /// Label flip probability per group.
    pub label_noise: [f64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            n_per_client: 400,
            features: 10,
            skew: 0.9,
            seed: 0,
            minority_fraction: 0.2,
            label_noise: [0.05, 0.2],
        }
    }
}

// Fixed seed for the ground-truth rules, shared by every seed.
const WORLD_SEED: u64 = 0x5eed_fa12;

/// Ground truth shared by every draw with the same feature count.
struct SyntheticWorld {
    weights: [Vec<f64>; 2],
    intercepts: [f64; 2],
    means: [Vec<f64>; 2],
}

impl SyntheticWorld {
    fn new(p: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ p as u64);
        let mut normal = |scale: f64| -> Vec<f64> {
            (0..p)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let shared = normal(1.0 / (p as f64).sqrt());
        let own0 = normal(1.0 / (p as f64).sqrt());
        let own1 = normal(1.0 / (p as f64).sqrt());
        let mut mean1 = normal(0.5 / (p as f64).sqrt());
        mean1[0] += 0.5;
        let w0: Vec<f64> = shared
            .iter()
            .zip(&own0)
            .map(|(s, o)| 2.0 * (s + 0.5 * o))
            .collect();
        let w1: Vec<f64> = shared
            .iter()
            .zip(&own1)
            .map(|(s, o)| 2.0 * (0.5 * s + o))
            .collect();
        Self {
            weights: [w0, w1],
            intercepts: [0.0, 0.5],
            means: [vec![0.0; p], mean1],
        }
    }
}

/// Two-group data whose per-client group mixture (and per-client feature
/// offset) grows with `skew`. Clients at the end of the index range are
/// group-1 "home" clients.
pub fn make_synthetic_hetero(
    clients: usize,
    n_per_client: usize,
    p: usize,
    skew: f64,
    seed: u64,
) -> Result<(Dataset, FederatedSplit)> {
    make_synthetic(&SyntheticConfig {
        clients,
        n_per_client,
        features: p,
        skew,
        seed,
        ..SyntheticConfig::default()
    })
}

pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, FederatedSplit)> {
    let shards = synthetic_shards(cfg, TRAIN_STREAM)?;
    let names = vec!["g0".to_string(), "g1".to_string()];
    let dataset = Dataset::new(shards.iter().flatten().cloned().collect(), names.clone())?;
    let split = FederatedSplit::from_shards(shards, names)?;
    Ok((dataset, split))
}

/// Held-out draw from the same clients as `make_synthetic(cfg)`: identical
/// group mixtures and feature offsets, fresh samples.
pub fn make_synthetic_test(cfg: &SyntheticConfig) -> Result<Dataset> {
    let shards = synthetic_shards(cfg, TEST_STREAM)?;
    Dataset::new(
        shards.into_iter().flatten().collect(),
        vec!["g0".to_string(), "g1".to_string()],
    )
}

const OFFSET_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn synthetic_shards(cfg: &SyntheticConfig, stream: u64) -> Result<Vec<Vec<Example>>> {
    if cfg.clients < 2 {
        return Err(FairFedError::Config(
            "synthetic data needs at least 2 clients".into(),
        ));
    }
    if cfg.features < 2 {
        return Err(FairFedError::Config(
            "synthetic data needs at least 2 features".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.skew) {
        return Err(FairFedError::Config(format!(
            "skew must lie in [0,1], got {}",
            cfg.skew
        )));
    }
    let p = cfg.features;
    let world = SyntheticWorld::new(p);
    let mut offset_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    offset_rng.set_stream(OFFSET_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let home_one =
        ((cfg.clients as f64 * cfg.minority_fraction).round() as usize).clamp(1, cfg.clients - 1);

    let mut shards = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        let is_home_one = k >= cfg.clients - home_one;
        let frac_one =
            (1.0 - cfg.skew) * cfg.minority_fraction + cfg.skew * f64::from(u8::from(is_home_one));
        let n_one = (frac_one * cfg.n_per_client as f64).round() as usize;
        let offset: Vec<f64> = (0..p)
            .map(|_| 0.5 * cfg.skew * offset_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut shard = Vec::with_capacity(cfg.n_per_client);
        for i in 0..cfg.n_per_client {
            let a = usize::from(i < n_one);
            let x: Vec<f64> = (0..p)
                .map(|j| world.means[a][j] + offset[j] + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let score: f64 = world.weights[a]
                .iter()
                .zip(&x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + world.intercepts[a];
            let mut y = u8::from(score > 0.0);
            if rng.random::<f64>() < cfg.label_noise[a] {
                y = 1 - y;
            }
            shard.push(Example::new(x, y, a));
        }
        shard.shuffle(&mut rng);
        shards.push(shard);
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy(n: usize, groups: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(vec![i as f64, 1.0], (i % 2) as u8, (i / 2) % groups))
            .collect();
        Dataset::from_examples(examples, groups).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_reindexes_groups_by_first_appearance() {
        let f = write_tmp("f1,f2,label,grp\n0.5,1,1,M\n1.5,2,0,F\n2,3,1,M\n-1,0,0,F\n");
        let ds = load_csv(f.path(), &CsvSchema::new("label", "grp")).unwrap();
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.num_groups(), 2);
        assert_eq!(ds.group_names(), ["M", "F"]);
        assert_eq!(ds.examples()[1].a, 1);
        assert_eq!(ds.examples()[0].x, vec![0.5, 1.0]);
    }

    #[test]
    fn csv_rejects_bad_labels_and_features() {
        let f = write_tmp("f1,label,grp\n0.5,1,M\n1.5,2,F\n");
        let err = load_csv(f.path(), &CsvSchema::new("label", "grp")).unwrap_err();
        assert!(err.to_string().contains("label not in {0,1}"), "{err}");

        let f = write_tmp("f1,label,grp\n0.5,1,M\nabc,0,F\n");
        match load_csv(f.path(), &CsvSchema::new("label", "grp")).unwrap_err() {
            FairFedError::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }

        let f = write_tmp("f1,label,grp\n0.5,1,M\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::new("label", "sex")),
            Err(FairFedError::Schema(_))
        ));
    }

    #[test]
    fn csv_known_groups_and_group_feature() {
        let f = write_tmp("f1,label,grp\n0.5,1,F\n");
        let names = vec!["M".to_string(), "F".to_string()];
        let mut schema = CsvSchema::new("label", "grp");
        schema.include_group_feature = true;
        let loaded = read_csv(f.path(), &schema, Some(&names)).unwrap();
        assert_eq!(loaded.dataset.examples()[0].a, 1);
        assert_eq!(loaded.dataset.examples()[0].x, vec![0.5, 1.0]);
        assert_eq!(loaded.dataset.group_counts(), vec![0, 1]);
    }

    #[test]
    fn csv_client_column_is_not_a_feature() {
        let f = write_tmp("f1,label,grp,state\n1,1,M,CA\n2,0,F,NY\n3,0,M,CA\n");
        let schema = CsvSchema::new("label", "grp").with_client_column("state");
        let loaded = read_csv(f.path(), &schema, None).unwrap();
        assert_eq!(loaded.dataset.num_features(), 1);
        let keys = loaded.client_keys.unwrap();
        let split = partition_by_key(&loaded.dataset, &keys).unwrap();
        assert_eq!(split.num_clients(), 2);
        assert_eq!(split.shard(0).len(), 2);
    }

    #[test]
    fn dataset_requires_every_group() {
        let examples = vec![Example::new(vec![1.0], 0, 0)];
        assert!(Dataset::from_examples(examples, 2).is_err());
    }

    #[test]
    fn partition_by_key_orders_by_first_appearance() {
        let ds = toy(6, 2);
        let split = partition_by_key(&ds, &["A", "A", "B", "B", "C", "C"]).unwrap();
        assert_eq!(split.num_clients(), 3);
        assert!(split.shards().iter().all(|s| s.len() == 2));

        let split = partition_by_key(&ds, &[7; 6]).unwrap();
        assert_eq!(split.num_clients(), 1);
        assert_eq!(split.total(), 6);
    }

    #[test]
    fn partition_by_key_fifty_states() {
        let ds = toy(200, 2);
        let keys: Vec<usize> = (0..200).map(|i| i % 50).collect();
        assert_eq!(partition_by_key(&ds, &keys).unwrap().num_clients(), 50);
    }

    #[test]
    fn counts_are_consistent() {
        let ds = toy(30, 3);
        let split = partition_dirichlet(&ds, 3, 1.0, 9).unwrap();
        let total: usize = split.group_counts().iter().sum();
        assert_eq!(total, 30);
        for (a, cells) in split.cell_counts().iter().enumerate() {
            assert_eq!(cells.iter().sum::<usize>(), split.group_counts()[a]);
        }
    }

    #[test]
    fn dirichlet_single_client_is_whole_dataset() {
        let ds = toy(20, 2);
        let split = partition_dirichlet(&ds, 1, 0.01, 3).unwrap();
        assert_eq!(split.num_clients(), 1);
        assert_eq!(split.shard(0), ds.examples());
    }

    #[test]
    fn dirichlet_rejects_bad_arguments() {
        let ds = toy(4, 2);
        assert!(partition_dirichlet(&ds, 0, 1.0, 0).is_err());
        assert!(partition_dirichlet(&ds, 2, 0.0, 0).is_err());
        assert!(partition_dirichlet(&ds, 5, 1.0, 0).is_err());
    }

    #[test]
    fn dirichlet_large_alpha_is_nearly_balanced() {
        let ds = toy(1000, 2);
        for seed in 0..20 {
            let split = partition_dirichlet(&ds, 5, 1e6, seed).unwrap();
            for shard in split.shards() {
                let dev = (shard.len() as f64 - 200.0).abs() / 200.0;
                assert!(
                    dev <= 0.10,
                    "seed {seed}: shard of {} examples",
                    shard.len()
                );
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_heterogeneous() {
        let ds = toy(1000, 2);
        let mut hits = 0;
        for seed in 0..20 {
            let split = partition_dirichlet(&ds, 10, 0.1, seed).unwrap();
            let skewed = split.shards().iter().any(|s| {
                let g0 = s.iter().filter(|e| e.a == 0).count() as f64 / s.len() as f64;
                !(0.1..=0.9).contains(&g0)
            });
            hits += usize::from(skewed);
        }
        assert_eq!(hits, 20);
    }

    #[test]
    fn synthetic_skew_controls_group_mixture() {
        let (_, split) = make_synthetic_hetero(2, 500, 4, 1.0, 1).unwrap();
        let frac0 = |s: &[Example]| s.iter().filter(|e| e.a == 0).count() as f64 / s.len() as f64;
        assert!(frac0(split.shard(0)) >= 0.95);
        assert!(frac0(split.shard(1)) <= 0.05);

        let (ds, split) = make_synthetic_hetero(4, 500, 4, 0.0, 1).unwrap();
        let global = frac0(ds.examples());
        for shard in split.shards() {
            assert!((frac0(shard) - global).abs() < 0.02);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_argument_checked() {
        let a = make_synthetic_hetero(3, 50, 3, 0.5, 11).unwrap();
        let b = make_synthetic_hetero(3, 50, 3, 0.5, 11).unwrap();
        assert_eq!(a.1, b.1);
        assert!(make_synthetic_hetero(1, 50, 3, 0.5, 11).is_err());
        assert!(make_synthetic_hetero(3, 50, 1, 0.5, 11).is_err());
    }

    #[test]
    fn synthetic_test_draw_shares_clients_not_samples() {
        let cfg = SyntheticConfig {
            clients: 3,
            n_per_client: 2000,
            features: 3,
            skew: 1.0,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let (_, split) = make_synthetic(&cfg).unwrap();
        let test = make_synthetic_test(&cfg).unwrap();
        assert_eq!(test.len(), split.total());
        let mean =
            |xs: &[Example], j: usize| xs.iter().map(|e| e.x[j]).sum::<f64>() / xs.len() as f64;
        for (k, chunk) in test.examples().chunks(cfg.n_per_client).enumerate() {
            let train = split.shard(k);
            let ones = |s: &[Example]| s.iter().filter(|e| e.a == 1).count();
            assert_eq!(ones(chunk), ones(train));
            assert_ne!(chunk[0].x, train[0].x);
            for j in 0..cfg.features {
                // Standard error of each mean is about 0.02.
                assert!((mean(chunk, j) - mean(train, j)).abs() < 0.15);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let (ds, split) = make_synthetic_hetero(3, 20, 3, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.csv");
        let second = dir.path().join("b.csv");
        write_csv(&first, &ds, Some(&split.client_ids())).unwrap();
        let schema = CsvSchema::new("label", "group").with_client_column("client");
        let loaded = read_csv(&first, &schema, None).unwrap();
        let ids: Vec<usize> = loaded
            .client_keys
            .unwrap()
            .iter()
            .map(|k| k.parse().unwrap())
            .collect();
        write_csv(&second, &loaded.dataset, Some(&ids)).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
        let xs: Vec<&Vec<f64>> = loaded.dataset.examples().iter().map(|e| &e.x).collect();
        let orig: Vec<&Vec<f64>> = ds.examples().iter().map(|e| &e.x).collect();
        assert_eq!(xs, orig);
    }
}
