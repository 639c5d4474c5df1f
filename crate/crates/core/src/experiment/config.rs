use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::LocalHyper;
use crate::data::DriftIsolationMode;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::server::ServerHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedAvg,
    FedAvgM,
    FedProx,
    Scaffold,
    FedOpt,
    FedEve,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedAvgM => "fedavgm",
            Method::FedProx => "fedprox",
            Method::Scaffold => "scaffold",
            Method::FedOpt => "fedopt",
            Method::FedEve => "fedeve",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedavg" => Method::FedAvg,
            "fedavgm" => Method::FedAvgM,
            "fedprox" => Method::FedProx,
            "scaffold" => Method::Scaffold,
            "fedopt" => Method::FedOpt,
            "fedeve" => Method::FedEve,
            "" => return Err(Error::config("method", "must not be empty")),
            other => {
                return Err(Error::config(
                    "method",
                    format!("unknown method `{other}` (expected fedavg, fedavgm, fedprox, scaffold, fedopt or fedeve)"),
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_classes: usize,
        input_dim: usize,
        per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet { alpha: f64 },
    Iid,
    /// JSON file holding an array of per-client index arrays.
    External { path: PathBuf },
}

impl PartitionSpec {
    pub fn label(&self) -> String {
        match self {
            PartitionSpec::Dirichlet { alpha } => format!("dirichlet({alpha})"),
            PartitionSpec::Iid => "iid".into(),
            PartitionSpec::External { path } => format!("external({})", path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftIsolation {
    pub mode: DriftIsolationMode,
    /// Concentration used to re-skew the sampled pool in `client_only` mode.
    #[serde(default = "default_client_only_alpha")]
    pub client_only_alpha: f64,
}

fn default_client_only_alpha() -> f64 {
    0.01
}

impl Default for DriftIsolation {
    fn default() -> Self {
        DriftIsolation {
            mode: DriftIsolationMode::Both,
            client_only_alpha: default_client_only_alpha(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DriftIsolationRepr {
    Mode(DriftIsolationMode),
    Full(DriftIsolation),
}

/// Parsed experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: Option<ModelSpec>,
    pub partition: PartitionSpec,
    pub drift_isolation: DriftIsolation,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub method: Method,
    pub server: ServerHyper,
    pub local: LocalHyper,
    pub eval_every: usize,
    /// Measure exact period drift every this many rounds (0 = never).
    pub period_drift_every: usize,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetSpec,
    #[serde(default)]
    model: Option<ModelSpec>,
    #[serde(default = "default_partition")]
    partition: PartitionSpec,
    #[serde(default)]
    drift_isolation: Option<DriftIsolationRepr>,
    #[serde(default = "default_n_clients")]
    n_clients: usize,
    #[serde(default = "default_clients_per_round")]
    clients_per_round: usize,
    #[serde(default = "default_rounds")]
    rounds: usize,
    method: String,
    #[serde(default)]
    server: ServerHyper,
    #[serde(default)]
    local: LocalHyper,
    #[serde(default = "default_eval_every")]
    eval_every: usize,
    #[serde(default)]
    period_drift_every: usize,
    #[serde(default)]
    seed: u64,
}

fn default_partition() -> PartitionSpec {
    PartitionSpec::Iid
}
fn default_n_clients() -> usize {
    100
}
fn default_clients_per_round() -> usize {
    10
}
fn default_rounds() -> usize {
    100
}
fn default_eval_every() -> usize {
    1
}

/// Pulls the offending key out of a serde message such as
/// "unknown field `foo`, expected ..." or "missing field `bar`".
fn serde_key(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `", "duplicate field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "<config>".to_string()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        Error::config(serde_key(&msg), msg)
    })?;
    let config = ExperimentConfig {
        method: raw.method.parse()?,
        dataset: raw.dataset,
        model: raw.model,
        partition: raw.partition,
        drift_isolation: match raw.drift_isolation {
            None => DriftIsolation::default(),
            Some(DriftIsolationRepr::Mode(mode)) => DriftIsolation {
                mode,
                ..DriftIsolation::default()
            },
            Some(DriftIsolationRepr::Full(full)) => full,
        },
        n_clients: raw.n_clients,
        clients_per_round: raw.clients_per_round,
        rounds: raw.rounds,
        server: raw.server,
        local: raw.local,
        eval_every: raw.eval_every,
        period_drift_every: raw.period_drift_every,
        seed: raw.seed,
    };
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be >= 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(Error::config(
                "clients_per_round",
                format!("must be in 1..={} (n_clients)", self.n_clients),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if let PartitionSpec::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config("alpha", "must be finite and > 0"));
            }
            if self.n_clients < 2 {
                return Err(Error::config("n_clients", "dirichlet partition needs >= 2"));
            }
        }
        let iso_alpha = self.drift_isolation.client_only_alpha;
        if !(iso_alpha > 0.0 && iso_alpha.is_finite()) {
            return Err(Error::config("client_only_alpha", "must be finite and > 0"));
        }
        if let DatasetSpec::Synthetic {
            n_classes,
            input_dim,
            per_class,
            separation,
            test_fraction,
            ..
        } = &self.dataset
        {
            if *n_classes < 2 || *input_dim == 0 || *per_class == 0 {
                return Err(Error::config("dataset", "synthetic counts must be >= 1 (classes >= 2)"));
            }
            if !(*separation >= 0.0 && separation.is_finite()) {
                return Err(Error::config("separation", "must be finite and >= 0"));
            }
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::config("test_fraction", "must be in [0, 1)"));
            }
        }
        if let Some(model) = &self.model {
            model
                .validate()
                .map_err(|e| Error::config("model", e.to_string()))?;
        }
        self.server
            .validate()
            .map_err(|(key, msg)| Error::config(key, msg))?;
        if !(self.local.eta_l > 0.0 && self.local.eta_l.is_finite()) {
            return Err(Error::config("eta_l", "must be finite and > 0"));
        }
        if self.local.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.local.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.local.mu >= 0.0 && self.local.mu.is_finite()) {
            return Err(Error::config("mu", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Config as JSON with the seed removed; runs that differ only by seed
    /// share a fingerprint.
    pub fn fingerprint(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("seed");
        }
        value
    }
}
