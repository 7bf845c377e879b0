//! Run configuration: a flat TOML table with a fixed schema. Unknown keys
//! are errors so that a typo cannot silently fall back to a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::{data_dir, load_cifar10, synthetic_dataset, Dataset, SyntheticKind};
use crate::learning::{AdamConfig, MethodKind, RankSchedule, TrainConfig};
use crate::model::NetworkSpec;
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Spiral,
    Blobs,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Spiral => "synthetic-spiral",
            DatasetKind::Blobs => "synthetic-blobs",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [DatasetKind::Cifar10, DatasetKind::Spiral, DatasetKind::Blobs]
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "dataset",
                    format!("unknown dataset {s:?} (expected cifar10, synthetic-spiral or synthetic-blobs)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp3,
    SmallConv,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp3 => "mlp3",
            Architecture::SmallConv => "smallconv",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp3" => Ok(Architecture::Mlp3),
            "smallconv" => Ok(Architecture::SmallConv),
            _ => Err(Error::config(
                "architecture",
                format!("unknown architecture {s:?} (expected mlp3 or smallconv)"),
            )),
        }
    }
}

/// Every knob of a run. Field names are the config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: String,
    pub dataset: String,
    pub architecture: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_hoyer: f64,
    pub rank_schedule: bool,
    pub phase1_fraction: f64,
    pub phase1_target_fraction: f64,
    pub energy_threshold: f64,
    pub hoyer_period: usize,
    /// Overridden by `SSA_DATA_DIR`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Also checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Leading training images to keep (CIFAR-10).
    pub subset_size: Option<usize>,
    /// Total samples of a synthetic set before the 80/20 split.
    pub n_samples: usize,
    pub blob_dim: usize,
    pub blob_classes: usize,
    pub blob_separation: f64,
    /// Hidden width of `mlp3`.
    pub hidden: usize,
    /// Conv widths and hidden fc width of `smallconv`.
    pub conv_channels: [usize; 4],
    pub augment: bool,
    pub probe_size: usize,
    pub alignment_log_every: usize,
    pub projection_sigma: Option<f64>,
    pub target_sigma: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = RankSchedule::new(1);
        RunConfig {
            method: "ssa".into(),
            dataset: "synthetic-spiral".into(),
            architecture: "mlp3".into(),
            epochs: 20,
            batch_size: 128,
            lr: AdamConfig::default().lr,
            seed: 0,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda_hoyer: w.lambda_hoyer,
            rank_schedule: false,
            phase1_fraction: s.phase1_fraction,
            phase1_target_fraction: s.phase1_target_fraction,
            energy_threshold: s.energy_threshold,
            hoyer_period: s.hoyer_period,
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            subset_size: None,
            n_samples: 3000,
            blob_dim: 8,
            blob_classes: 4,
            blob_separation: 6.0,
            hidden: 256,
            conv_channels: [96, 192, 512, 1024],
            augment: false,
            probe_size: 256,
            alignment_log_every: 0,
            projection_sigma: None,
            target_sigma: None,
        }
    }
}

/// Error for a TOML decode failure, naming the offending key when the
/// decoder reports one.
fn decode_error(path: &Path, e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .map_or_else(|| path.display().to_string(), str::to_string);
    Error::config(field, msg)
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| decode_error(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn method_kind(&self) -> Result<MethodKind> {
        self.method
            .parse()
            .map_err(|e: Error| Error::config("method", e.to_string()))
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        self.dataset.parse()
    }

    pub fn architecture_kind(&self) -> Result<Architecture> {
        self.architecture.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.method_kind()?;
        let dataset = self.dataset_kind()?;
        let arch = self.architecture_kind()?;
        if arch == Architecture::SmallConv && dataset != DatasetKind::Cifar10 {
            return Err(Error::config(
                "architecture",
                "smallconv needs image input (dataset = cifar10)",
            ));
        }
        if self.subset_size == Some(0) {
            return Err(Error::config("subset_size", "must be at least 1"));
        }
        if dataset != DatasetKind::Cifar10 && self.n_samples < 5 {
            return Err(Error::config("n_samples", "must be at least 5"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("conv_channels", "widths must be at least 1"));
        }
        if dataset == DatasetKind::Blobs {
            if self.blob_dim == 0 {
                return Err(Error::config("blob_dim", "must be at least 1"));
            }
            if self.blob_classes < 2 {
                return Err(Error::config("blob_classes", "must be at least 2"));
            }
            if !(self.blob_separation.is_finite() && self.blob_separation >= 0.0) {
                return Err(Error::config("blob_separation", "must be finite and non-negative"));
            }
        }
        for (field, sigma) in [
            ("projection_sigma", self.projection_sigma),
            ("target_sigma", self.target_sigma),
        ] {
            if sigma.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        self.train_config()?.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda_hoyer: self.lambda_hoyer,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.method_kind()?, self.epochs, self.seed);
        t.weights = self.loss_weights();
        t.adam = AdamConfig::with_lr(self.lr);
        t.batch_size = self.batch_size;
        t.rank_schedule = self.rank_schedule;
        t.schedule = RankSchedule {
            total_epochs: self.epochs,
            phase1_fraction: self.phase1_fraction,
            phase1_target_fraction: self.phase1_target_fraction,
            energy_threshold: self.energy_threshold,
            hoyer_period: self.hoyer_period,
        };
        t.projection_sigma = self.projection_sigma;
        t.target_sigma = self.target_sigma;
        t.augment = self.augment;
        t.probe_size = self.probe_size;
        t.alignment_log_every = self.alignment_log_every;
        Ok(t)
    }

    pub fn synthetic_kind(&self) -> Result<Option<SyntheticKind>> {
        Ok(match self.dataset_kind()? {
            DatasetKind::Cifar10 => None,
            DatasetKind::Spiral => Some(SyntheticKind::Spiral),
            DatasetKind::Blobs => Some(SyntheticKind::Blobs {
                dim: self.blob_dim,
                classes: self.blob_classes,
                separation: self.blob_separation,
            }),
        })
    }

    /// Directory holding the CIFAR-10 batches after the environment override.
    pub fn resolved_data_dir(&self) -> PathBuf {
        data_dir(&self.data_dir)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.synthetic_kind()? {
            // Synthetic data is drawn from its own stream of the run seed.
            Some(kind) => synthetic_dataset(kind, self.n_samples, self.seed ^ 0x5eed_da7a),
            None => load_cifar10(&self.resolved_data_dir(), self.subset_size),
        }
    }

    /// Architecture for a dataset with `input` features and `classes` labels.
    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let factored = self.method_kind()?.factored();
        Ok(match self.architecture_kind()? {
            Architecture::Mlp3 => NetworkSpec::mlp3(data.input.dim(), self.hidden, data.classes, factored),
            Architecture::SmallConv => NetworkSpec::small_conv(self.conv_channels, data.classes, factored),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig {
            method: "dfa".into(),
            subset_size: Some(5000),
            target_sigma: Some(0.25),
            lr: 1e-4,
            ..RunConfig::default()
        };
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_the_key() {
        match parse("lrate = 0.1") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lrate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cases = [
            ("method = \"sgd\"", "method"),
            ("batch_size = 0", "batch_size"),
            ("lr = -1.0", "lr"),
            ("dataset = \"mnist\"", "dataset"),
            ("energy_threshold = 1.5", "energy_threshold"),
            ("architecture = \"smallconv\"", "architecture"),
            ("epochs = 0", "epochs"),
        ];
        for (text, expected) in cases {
            match parse(text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, expected, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
