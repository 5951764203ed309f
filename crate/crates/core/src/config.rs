//! Experiment configuration files.
//!
//! The format is flat `section.key = value` lines with `#` comments, which
//! is a subset of TOML (dotted keys). Strings are quoted, arrays use
//! brackets:
//!
//! ```text
//! train.method = "pffl"
//! train.epochs = 50
//! train.B = 10.0
//! fairness.kind = "bgl"
//! fairness.zeta = 0.3
//! sweep.B = [1.0, 10.0]
//! sweep.seeds = [0, 1, 2]
//! ```
//!
//! Every key is optional; unknown keys are rejected so typos surface early.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintKind;
use crate::dataset::SyntheticConfig;
use crate::error::{FairFedError, Result};
use crate::fed_engine::{BatchMode, StepSchedule};
use crate::pffl::PfflConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pffl,
    Fedavg,
    GroupWeighted,
    LocalBgl,
    Fedminmax,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pffl,
        Method::Fedavg,
        Method::GroupWeighted,
        Method::LocalBgl,
        Method::Fedminmax,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pffl => "pffl",
            Method::Fedavg => "fedavg",
            Method::GroupWeighted => "group-weighted",
            Method::LocalBgl => "local-bgl",
            Method::Fedminmax => "fedminmax",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = FairFedError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FairFedError::Config(format!("unknown method {s:?}")))
    }
}

/// `"auto"` or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Value(f64),
    Keyword(String),
}

impl AutoOr {
    fn resolve(&self, key: &str) -> Result<Option<f64>> {
        match self {
            AutoOr::Value(v) => Ok(Some(*v)),
            AutoOr::Keyword(s) if s == "auto" => Ok(None),
            AutoOr::Keyword(s) => Err(FairFedError::Config(format!(
                "{key}: expected a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Option<Method>,
    pub epochs: Option<usize>,
    pub rounds: Option<usize>,
    pub local_steps: Option<usize>,
    /// `"theory"` or `"constant"`.
    pub schedule: Option<String>,
    pub eta: Option<f64>,
    pub batch_size: Option<usize>,
    pub beta: Option<f64>,
    #[serde(rename = "B")]
    pub bound: Option<f64>,
    pub nu: Option<f64>,
    #[serde(rename = "M")]
    pub m_bound: Option<f64>,
    pub eta_theta: Option<AutoOr>,
    pub seed: Option<u64>,
    pub mu: Option<f64>,
    pub bias: Option<bool>,
    pub gate: Option<bool>,
    pub tail_average: Option<usize>,
    pub group_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSection {
    /// `"bgl"`, `"cbgl"` or `"minmax"`.
    pub kind: Option<String>,
    pub zeta: Option<f64>,
    pub zeta_y: Option<[f64; 2]>,
    pub drop_empty_cells: Option<bool>,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(rename = "B")]
    pub bounds: Option<Vec<f64>>,
    pub zeta: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub clients: Option<usize>,
    pub n_per_client: Option<usize>,
    pub features: Option<usize>,
    pub skew: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fairness: FairnessSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub data: DataSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FairFedError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Overlays the `train` section onto `cfg`.
    pub fn apply_train(&self, cfg: &mut PfflConfig) -> Result<()> {
        let t = &self.train;
        set(&mut cfg.epochs, t.epochs);
        set(&mut cfg.round.rounds, t.rounds);
        set(&mut cfg.round.local_steps, t.local_steps);
        set(&mut cfg.beta, t.beta);
        set(&mut cfg.bound, t.bound);
        set(&mut cfg.nu, t.nu);
        set(&mut cfg.m_bound, t.m_bound);
        set(&mut cfg.seed, t.seed);
        set(&mut cfg.loss.ridge_mu, t.mu);
        set(&mut cfg.loss.bias, t.bias);
        set(&mut cfg.gate, t.gate);
        if t.tail_average.is_some() {
            cfg.tail_average = t.tail_average;
        }
        if let Some(eta) = &t.eta_theta {
            cfg.eta_theta = eta.resolve("train.eta_theta")?;
        }
        match t.schedule.as_deref() {
            None => {
                if let (Some(eta), StepSchedule::Constant { .. }) = (t.eta, cfg.round.schedule) {
                    cfg.round.schedule = StepSchedule::Constant { eta };
                }
            }
            Some("theory") => cfg.round.schedule = StepSchedule::Theory,
            Some("constant") => {
                let eta = match (t.eta, cfg.round.schedule) {
                    (Some(eta), _) | (None, StepSchedule::Constant { eta }) => eta,
                    (None, StepSchedule::Theory) => {
                        return Err(FairFedError::Config(
                            "train.schedule = \"constant\" needs train.eta".into(),
                        ))
                    }
                };
                cfg.round.schedule = StepSchedule::Constant { eta };
            }
            Some(other) => return Err(FairFedError::Config(format!("unknown schedule {other:?}"))),
        }
        if let Some(size) = t.batch_size {
            cfg.round.batch = BatchMode::Minibatch { size, seed: 0 };
        }
        cfg.validate()
    }

    /// The constraint family. Without an explicit `fairness.kind`, a lone
    /// `zeta` means bgl and a lone `zeta_y` means cbgl.
    pub fn fairness_kind(&self) -> Result<Option<ConstraintKind>> {
        let f = &self.fairness;
        let named = match (f.kind.as_deref(), f.zeta, f.zeta_y) {
            (Some(k), _, _) => Some(k),
            (None, Some(_), None) => Some("bgl"),
            (None, None, Some(_)) => Some("cbgl"),
            (None, None, None) => None,
            (None, Some(_), Some(_)) => {
                return Err(FairFedError::Config(
                    "both zeta and zeta_y given; set fairness.kind".into(),
                ))
            }
        };
        let kind = match named {
            None => return Ok(None),
            Some("bgl") => ConstraintKind::Bgl {
                zeta: f.zeta.ok_or_else(|| {
                    FairFedError::Config("fairness.kind = \"bgl\" needs fairness.zeta".into())
                })?,
            },
            Some("cbgl") => ConstraintKind::Cbgl {
                zeta_by_label: f.zeta_y.ok_or_else(|| {
                    FairFedError::Config("fairness.kind = \"cbgl\" needs fairness.zeta_y".into())
                })?,
            },
            Some("minmax") => ConstraintKind::MinMax,
            Some(other) => {
                return Err(FairFedError::Config(format!(
                    "unknown fairness kind {other:?}"
                )))
            }
        };
        kind.validate()?;
        Ok(Some(kind))
    }

    pub fn apply_data(&self, cfg: &mut SyntheticConfig) {
        let d = &self.data;
        set(&mut cfg.clients, d.clients);
        set(&mut cfg.n_per_client, d.n_per_client);
        set(&mut cfg.features, d.features);
        set(&mut cfg.skew, d.skew);
        set(&mut cfg.seed, d.seed);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
# acceptance-style run
train.method = "pffl"
train.epochs = 50
train.rounds = 8
train.schedule = "theory"
train.B = 10.0
train.M = 1.0
train.eta_theta = "auto"
train.mu = 0.1

fairness.kind = "cbgl"
fairness.zeta_y = [0.2, 0.4]

sweep.B = [1.0, 10.0, 100.0]
sweep.zeta = [0.0, 0.3]
sweep.seeds = [0, 1]
"#;

    #[test]
    fn parses_dotted_keys() {
        let file = ConfigFile::parse(SAMPLE).unwrap();
        let mut cfg = PfflConfig::default();
        file.apply_train(&mut cfg).unwrap();
        assert_eq!(file.train.method, Some(Method::Pffl));
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.round.rounds, 8);
        assert_eq!(cfg.round.schedule, StepSchedule::Theory);
        assert_eq!(cfg.bound, 10.0);
        assert_eq!(cfg.m_bound, 1.0);
        assert_eq!(cfg.eta_theta, None);
        assert_eq!(cfg.loss.ridge_mu, 0.1);
        assert_eq!(
            file.fairness_kind().unwrap(),
            Some(ConstraintKind::Cbgl {
                zeta_by_label: [0.2, 0.4]
            })
        );
        assert_eq!(file.sweep.bounds.as_deref(), Some(&[1.0, 10.0, 100.0][..]));
        assert_eq!(file.sweep.seeds.as_deref(), Some(&[0, 1][..]));
    }

    #[test]
    fn empty_file_changes_nothing() {
        let file = ConfigFile::parse("# nothing here\n").unwrap();
        let mut cfg = PfflConfig::default();
        file.apply_train(&mut cfg).unwrap();
        assert_eq!(cfg, PfflConfig::default());
        assert_eq!(file.fairness_kind().unwrap(), None);
    }

    #[test]
    fn constant_schedule_and_numeric_eta_theta() {
        let file = ConfigFile::parse(
            "train.schedule = \"constant\"\ntrain.eta = 0.25\ntrain.eta_theta = 0.01\n",
        )
        .unwrap();
        let mut cfg = PfflConfig::default();
        file.apply_train(&mut cfg).unwrap();
        assert_eq!(cfg.round.schedule, StepSchedule::Constant { eta: 0.25 });
        assert_eq!(cfg.eta_theta, Some(0.01));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(
            ConfigFile::parse("train.epoch = 3\n").is_err(),
            "typo in key"
        );
        assert!(ConfigFile::parse("train.method = \"sgd\"\n").is_err());
        assert!(ConfigFile::parse("train.epochs = \n").is_err());
        let file = ConfigFile::parse("train.eta_theta = \"fast\"\n").unwrap();
        assert!(file.apply_train(&mut PfflConfig::default()).is_err());
        let file = ConfigFile::parse("train.B = -1.0\n").unwrap();
        assert!(file.apply_train(&mut PfflConfig::default()).is_err());
        let file = ConfigFile::parse("fairness.kind = \"bgl\"\n").unwrap();
        assert!(file.fairness_kind().is_err());
        let file = ConfigFile::parse("fairness.kind = \"dp\"\nfairness.zeta = 0.1\n").unwrap();
        assert!(file.fairness_kind().is_err());
    }

    #[test]
    fn kind_inferred_from_thresholds() {
        let file = ConfigFile::parse("fairness.zeta = 0.2\n").unwrap();
        assert_eq!(
            file.fairness_kind().unwrap(),
            Some(ConstraintKind::Bgl { zeta: 0.2 })
        );
        let file = ConfigFile::parse("fairness.zeta_y = [0.1, 0.3]\n").unwrap();
        assert_eq!(
            file.fairness_kind().unwrap(),
            Some(ConstraintKind::Cbgl {
                zeta_by_label: [0.1, 0.3]
            })
        );
        let file =
            ConfigFile::parse("fairness.zeta = 0.2\nfairness.zeta_y = [0.1, 0.3]\n").unwrap();
        assert!(file.fairness_kind().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
