//! Training protocols: individual training, federated averaging, FedPer
//! (shared base layers, local head) and the clustered leader protocol with
//! transfer to cluster members.

mod protocols;
mod transfer;

pub use protocols::{run_cefl, run_fedper, run_individual, run_protocol, run_regular_fl};
pub use transfer::{transfer_session, TransferOutcome};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterReport, Clustering};
use crate::cost::{CostLedger, SizeModel};
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::model::{Batch, Layer, LayerSpec, ModelParams, TrainConfig};
use crate::similarity::SimilarityGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Individual,
    RegularFl,
    Fedper,
    Cefl,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Individual => "individual",
            Protocol::RegularFl => "regular_fl",
            Protocol::Fedper => "fedper",
            Protocol::Cefl => "cefl",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_clusters() -> usize {
    2
}
fn default_epsilon() -> usize {
    8
}
fn default_epsilon_init() -> usize {
    1
}
fn default_eta() -> usize {
    350
}
fn default_individual() -> usize {
    350
}
fn default_patience() -> usize {
    10
}
fn default_min_delta() -> f64 {
    1e-3
}

/// Parameters of one protocol run. Unset optional fields take their
/// documented defaults at validation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Label used for output directories; defaults to the protocol name.
    #[serde(default)]
    pub name: Option<String>,
    /// Cluster count (clustered protocol only).
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Aggregation rounds.
    #[serde(default)]
    pub rounds: usize,
    /// Local episodes per round.
    #[serde(default = "default_epsilon")]
    pub epsilon: usize,
    /// Episodes of local training before clustering.
    #[serde(default = "default_epsilon_init")]
    pub epsilon_init: usize,
    /// Maximum fine-tuning episodes of a cluster member after transfer.
    #[serde(default = "default_eta")]
    pub eta: usize,
    /// Shared base layers; defaults to all layers but the last.
    #[serde(default)]
    pub base_layers: Option<usize>,
    /// Per-leader aggregation weights; default uniform.
    #[serde(default)]
    pub aggregation_weights: Option<Vec<f64>>,
    #[serde(default = "default_individual")]
    pub individual_episodes: usize,
    /// Episodes without a validation gain above `min_delta` that end
    /// fine-tuning.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            name: None,
            clusters: default_clusters(),
            rounds: 0,
            epsilon: default_epsilon(),
            epsilon_init: default_epsilon_init(),
            eta: default_eta(),
            base_layers: None,
            aggregation_weights: None,
            individual_episodes: default_individual(),
            patience: default_patience(),
            min_delta: default_min_delta(),
        }
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.protocol.to_string())
    }

    /// Base layer count for a model with `layer_count` layers.
    pub fn base_for(&self, layer_count: usize) -> usize {
        self.base_layers
            .unwrap_or(layer_count.saturating_sub(1).max(1))
    }

    /// Leader aggregation weights, uniform unless configured.
    pub fn leader_weights(&self) -> Vec<f64> {
        self.aggregation_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.clusters as f64; self.clusters])
    }

    /// Every constraint violation for a model of `layer_count` layers and
    /// `n_clients` clients.
    pub fn diagnostics(&self, layer_count: usize, n_clients: usize) -> Vec<String> {
        let mut out = Vec::new();
        let b = self.base_for(layer_count);
        if layer_count < 2 {
            out.push(format!(
                "model has {layer_count} layer(s); protocols need at least 2"
            ));
        }
        if b < 1 || b > layer_count {
            out.push(format!(
                "base_layers = {b} violates 1 <= B <= L (L = {layer_count})"
            ));
        } else if self.protocol == Protocol::Fedper && b >= layer_count {
            out.push(format!(
                "base_layers = {b} must be < L = {layer_count} for fedper"
            ));
        }
        if n_clients == 0 {
            out.push("at least one client is required".into());
        }
        if self.protocol == Protocol::Cefl {
            if self.clusters < 1 || self.clusters > n_clients {
                out.push(format!(
                    "clusters = {} violates 1 <= K <= N (N = {n_clients})",
                    self.clusters
                ));
            }
            if let Some(w) = &self.aggregation_weights {
                if w.len() != self.clusters {
                    out.push(format!(
                        "aggregation_weights has {} entries, expected K = {}",
                        w.len(),
                        self.clusters
                    ));
                }
                if w.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                    out.push("aggregation_weights entries must lie in [0, 1]".into());
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    out.push(format!(
                        "aggregation_weights sum to {sum}, must sum to 1 (+-1e-9)"
                    ));
                }
            }
        }
        if matches!(
            self.protocol,
            Protocol::RegularFl | Protocol::Fedper | Protocol::Cefl
        ) && self.epsilon == 0
            && self.rounds > 0
        {
            out.push("epsilon must be >= 1 when rounds > 0".into());
        }
        if !(self.min_delta >= 0.0) {
            out.push("min_delta must be >= 0".into());
        }
        out
    }

    pub fn validate(&self, layer_count: usize, n_clients: usize) -> Result<()> {
        match self.diagnostics(layer_count, n_clients).into_iter().next() {
            Some(first) => Err(Error::Config(first)),
            None => Ok(()),
        }
    }
}

/// Local training and test data of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Batch,
    pub test: Batch,
}

impl From<&ClientShard> for ClientData {
    fn from(shard: &ClientShard) -> Self {
        Self {
            train: shard.train_batch(),
            test: shard.test_batch(),
        }
    }
}

/// Model architecture and optimizer settings shared by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub layers: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub bits_per_param: u64,
}

/// Mean and spread of client accuracy after a round (or episode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// `init`, `round`, `episode` or `transfer`.
    pub stage: &'static str,
    /// Index within the stage.
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub cumulative_bits: u64,
}

/// Everything a protocol run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub protocol: Protocol,
    pub rounds: Vec<RoundMetrics>,
    /// Final test accuracy per client; `None` for clients without test data.
    pub final_accuracy: Vec<Option<f64>>,
    pub final_mean: f64,
    pub final_std: f64,
    pub ledger: CostLedger,
    pub sizes: SizeModel,
    /// Closed-form total the ledger is expected to equal.
    pub expected_bits: u64,
    pub aggregation_rounds: usize,
    pub episodes_per_round: usize,
    /// Mean local episodes outside aggregation rounds, per participating client.
    pub local_episodes: f64,
    pub graph: Option<SimilarityGraph>,
    pub clustering: Option<Clustering>,
    pub cluster_report: Option<ClusterReport>,
    /// Base-layer broadcasts checked for untouched personalized layers.
    pub partial_layer_checks: usize,
    pub partial_layer_violations: usize,
    pub final_models: Vec<ModelParams>,
    pub warnings: Vec<String>,
}

/// Per-entry convex combination of `models` over `layers`.
pub fn fedavg_aggregate(
    models: &[&ModelParams],
    weights: &[f64],
    layers: Range<usize>,
) -> Result<Vec<Layer>> {
    let first = models
        .first()
        .ok_or_else(|| Error::input("nothing to aggregate"))?;
    if models.len() != weights.len() {
        return Err(Error::input(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::input("aggregation weights must be nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "aggregation weights sum to {sum}, not 1"
        )));
    }
    if layers.end > first.layer_count() || layers.start >= layers.end {
        return Err(Error::input("layer range out of bounds"));
    }
    if models.iter().any(|m| !m.same_structure(first)) {
        return Err(Error::input("models differ in structure"));
    }
    Ok(layers
        .map(|l| {
            let mut out = first.layers()[l].clone();
            out.weights.fill(0.0);
            out.bias.fill(0.0);
            for (m, &w) in models.iter().zip(weights) {
                out.weights.scaled_add(w, &m.layers()[l].weights);
                out.bias.scaled_add(w, &m.layers()[l].bias);
            }
            out
        })
        .collect())
}

/// Overwrites the leading layers of `m` with `global`; later layers are not
/// touched.
pub fn broadcast_base(global: &[Layer], m: &mut ModelParams) -> Result<()> {
    if global.len() > m.layer_count()
        || global.iter().zip(m.layers()).any(|(g, l)| !g.same_shape(l))
    {
        return Err(Error::input("broadcast layers do not fit the model"));
    }
    for (dst, src) in m.layers_mut().iter_mut().zip(global) {
        dst.weights.assign(&src.weights);
        dst.bias.assign(&src.bias);
    }
    Ok(())
}

/// Sample-count weights `|D_n| / |D|` computed from integer counts.
pub fn sample_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::input("no client holds training data"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
