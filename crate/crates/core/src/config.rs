//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! output_dir = "out"
//!
//! [dataset]
//! kind = "synthetic"        # or "csv" with `path = "recordings.csv"`
//! clients = 12
//!
//! [[protocols]]
//! protocol = "cefl"
//! clusters = 2
//! rounds = 20
//! ```
//!
//! Omitted sections take the defaults of [`RunConfig::default_model`] and
//! [`TrainConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    flagship_profiles, ingest_csv, shards_from_recordings, synth_dataset_with_noise, ClientShard,
    HeterogeneityProfile, DEFAULT_NOISE,
};
use crate::error::{Error, Result};
use crate::flcore::{Protocol, ProtocolConfig, Setup};
use crate::model::{validate_specs, Activation, LayerSpec, TrainConfig};

fn default_clients() -> usize {
    12
}
fn default_noise() -> f64 {
    DEFAULT_NOISE
}
fn default_bits() -> u64 {
    32
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_layers() -> Vec<LayerSpec> {
    RunConfig::default_model()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated shards. Without explicit `profiles`, the flagship mixture of
    /// `clients` clients is used.
    Synthetic {
        #[serde(default = "default_clients")]
        clients: usize,
        #[serde(default)]
        profiles: Option<Vec<HeterogeneityProfile>>,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Recordings in CSV; one client per subject. Relative paths resolve
    /// against the configuration file's directory.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_layers")]
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_bits")]
    pub bits_per_param: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            bits_per_param: default_bits(),
        }
    }
}

/// Re-runs a clustered protocol once per cluster count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KSweep {
    pub clusters: Vec<usize>,
    /// Label of the clustered protocol entry used as template; the first
    /// clustered entry by default.
    #[serde(default)]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub protocols: Vec<ProtocolConfig>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub k_sweep: Option<KSweep>,
    /// Directory relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// 1200 -> 128 (relu) -> 64 (relu) -> 8 (softmax).
    pub fn default_model() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(crate::data::FEATURE_LEN, 128, Activation::Relu),
            LayerSpec::new(128, 64, Activation::Relu),
            LayerSpec::new(64, crate::data::NUM_CLASSES, Activation::Softmax),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn setup(&self) -> Setup {
        Setup {
            layers: self.model.layers.clone(),
            train: self.train,
            bits_per_param: self.model.bits_per_param,
        }
    }

    /// Client count implied by the dataset, if known without reading data.
    fn declared_clients(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                profiles: Some(p), ..
            } => Some(p.len()),
            DatasetSpec::Synthetic { clients, .. } => Some(*clients),
            DatasetSpec::Csv { .. } => None,
        }
    }

    /// The protocol entries of the K-sweep, one per requested cluster count.
    pub fn sweep_protocols(&self) -> Result<Vec<ProtocolConfig>> {
        let Some(sweep) = &self.k_sweep else {
            return Ok(Vec::new());
        };
        let template = self
            .protocols
            .iter()
            .find(|p| {
                p.protocol == Protocol::Cefl
                    && sweep.template.as_ref().map_or(true, |t| *t == p.label())
            })
            .ok_or_else(|| Error::config("k_sweep.template: no matching cefl protocol entry"))?;
        Ok(sweep
            .clusters
            .iter()
            .map(|&k| {
                let mut p = template.clone();
                p.clusters = k;
                p.aggregation_weights = None;
                p.name = Some(format!("{}_k{k}", template.label()));
                p
            })
            .collect())
    }

    /// Every constraint violation, each naming the offending field.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push("seeds: at least one seed is required".into());
        }
        if self.protocols.is_empty() {
            out.push("protocols: at least one protocol is required".into());
        }
        if let Err(e) = validate_specs(&self.model.layers) {
            out.push(format!("model.layers: {e}"));
        }
        if self.model.bits_per_param == 0 {
            out.push("model.bits_per_param: must be >= 1".into());
        }
        if let Err(e) = self.train.validate() {
            out.push(format!("train: {e}"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                clients,
                profiles,
                noise,
            } => {
                if !(*noise > 0.0) {
                    out.push("dataset.noise: must be > 0".into());
                }
                match profiles {
                    Some(p) => {
                        for (i, prof) in p.iter().enumerate() {
                            if let Err(e) = prof.validate() {
                                out.push(format!("dataset.profiles[{i}]: {e}"));
                            }
                        }
                    }
                    None if *clients < 3 => out.push(
                        "dataset.clients: the default mixture needs at least 3 clients".into(),
                    ),
                    None => {}
                }
            }
            DatasetSpec::Csv { path } => {
                let full = self.base_dir.join(path);
                if !full.is_file() {
                    out.push(format!(
                        "dataset.path: {} is not a readable file",
                        full.display()
                    ));
                }
            }
        }
        let l = self.model.layers.len();
        let n = self.declared_clients();
        let mut labels = Vec::new();
        for (i, p) in self.protocols.iter().enumerate() {
            for d in p.diagnostics(l, n.unwrap_or(usize::MAX)) {
                out.push(format!("protocols[{i}] ({}): {d}", p.label()));
            }
            if labels.contains(&p.label()) {
                out.push(format!(
                    "protocols[{i}].name: duplicate label {}; set distinct names",
                    p.label()
                ));
            }
            labels.push(p.label());
        }
        if self.k_sweep.is_some() {
            match self.sweep_protocols() {
                Ok(sweep) => {
                    for p in sweep {
                        for d in p.diagnostics(l, n.unwrap_or(usize::MAX)) {
                            out.push(format!("k_sweep ({}): {d}", p.label()));
                        }
                    }
                }
                Err(e) => out.push(e.to_string()),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("; ")))
        }
    }

    /// Client shards for one seed.
    pub fn shards(&self, seed: u64) -> Result<Vec<ClientShard>> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                clients,
                profiles,
                noise,
            } => {
                let profiles = match profiles {
                    Some(p) => p.clone(),
                    None => flagship_profiles(*clients, seed)?,
                };
                synth_dataset_with_noise(&profiles, seed, *noise)
            }
            DatasetSpec::Csv { path } => {
                let recordings = ingest_csv(&self.base_dir.join(path))?;
                shards_from_recordings(&recordings, seed)
            }
        }
    }
}
