use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{forward_batch, loss_and_grads, Batch};
use super::{adam_step, AdamState, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, beta) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeRecord {
    /// Mean training loss over the episode's minibatches, weighted by size.
    pub loss: f64,
    /// Accuracy on the local test split after the episode, if one exists.
    pub test_accuracy: Option<f64>,
}

/// A simulated participant: its local data, model, optimizer and history.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Batch,
    pub test: Batch,
    params: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    pub history: Vec<EpisodeRecord>,
    pub warnings: Vec<String>,
}

impl ClientState {
    /// The shuffle stream depends on `seed` only, so clients with equal data
    /// and seeds train identically.
    pub fn new(id: usize, train: Batch, test: Batch, params: ModelParams, seed: u64) -> Self {
        let adam = AdamState::new(&params);
        Self {
            id,
            train,
            test,
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Replaces the whole model. Optimizer moments are reset unless the new
    /// weights equal the current ones bit for bit.
    pub fn set_params(&mut self, params: ModelParams) {
        if params != self.params {
            self.adam = AdamState::new(&params);
            self.params = params;
        }
    }

    /// Replaces layers `0..count` with those of `src`. Optimizer moments are
    /// reset unless nothing changed.
    pub fn set_leading_layers(&mut self, src: &ModelParams, count: usize) {
        let changed = self
            .params
            .layers()
            .iter()
            .zip(src.layers())
            .take(count)
            .any(|(a, b)| a != b);
        if changed {
            self.params.copy_leading_layers(src, count);
            self.adam = AdamState::new(&self.params);
        }
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    /// Test accuracy of the current model, `None` without a test split.
    pub fn test_accuracy(&self) -> Option<f64> {
        if self.test.is_empty() {
            None
        } else {
            evaluate(&self.params, &self.test).ok()
        }
    }
}

/// SplitMix64 finalizer over `seed ^ salt`, used to derive independent streams.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z =
        (seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n_episodes` full passes over the client's training split, each in a
/// freshly shuffled order, with minibatch Adam updates.
///
/// A client without training data is left untouched and a warning is recorded.
pub fn train_episodes(c: &mut ClientState, n_episodes: usize, cfg: &TrainConfig) -> Result<()> {
    if n_episodes == 0 {
        return Ok(());
    }
    if c.train.is_empty() {
        let msg = format!("client {} has no training data; skipped", c.id);
        warn!("{msg}");
        c.warnings.push(msg);
        return Ok(());
    }
    for _ in 0..n_episodes {
        // Each episode shuffles from the identity so that splitting episodes
        // across calls does not change the sample order.
        let mut order: Vec<usize> = (0..c.train.len()).collect();
        order.shuffle(&mut c.rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = c.train.select(chunk);
            let (loss, grads) = loss_and_grads(&c.params, &batch)?;
            adam_step(&mut c.params, &grads, &mut c.adam, cfg)?;
            total += loss * chunk.len() as f64;
        }
        let record = EpisodeRecord {
            loss: total / c.train.len() as f64,
            test_accuracy: c.test_accuracy(),
        };
        c.history.push(record);
    }
    Ok(())
}

/// Fraction of samples whose argmax prediction equals the label. Ties go to
/// the lowest class index.
pub fn evaluate(m: &ModelParams, b: &Batch) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::input("cannot evaluate on an empty batch"));
    }
    let probs = forward_batch(m, b.features.view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&b.labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / b.len() as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, LayerSpec};
    use ndarray::Array2;
    use rand::Rng;

    fn specs(dim: usize, classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(dim, 8, Activation::Relu),
            LayerSpec::new(8, classes, Activation::Softmax),
        ]
    }

    /// Two Gaussian blobs around (+1, +1, ...) and (-1, -1, ...).
    fn separable(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 1.0 } else { -1.0 };
            rows.push((0..4).map(|_| centre + rng.gen_range(-0.5..0.5)).collect());
            labels.push(y);
        }
        Batch::from_rows(&rows, labels).unwrap()
    }

    fn client(seed: u64) -> ClientState {
        let m = init_model(&specs(4, 2), seed).unwrap();
        ClientState::new(0, separable(64, 1), separable(32, 2), m, seed)
    }

    #[test]
    fn zero_episodes_is_a_no_op() {
        let mut c = client(3);
        let before = c.params().clone();
        train_episodes(&mut c, 0, &TrainConfig::default()).unwrap();
        assert_eq!(c.params(), &before);
        assert!(c.history.is_empty());
    }

    #[test]
    fn empty_client_is_skipped_with_warning() {
        let m = init_model(&specs(4, 2), 1).unwrap();
        let mut c = ClientState::new(5, Batch::empty(4), Batch::empty(4), m.clone(), 1);
        train_episodes(&mut c, 3, &TrainConfig::default()).unwrap();
        assert_eq!(c.params(), &m);
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn separable_shard_is_learned() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut c = client(4);
        train_episodes(&mut c, 50, &cfg).unwrap();
        let acc = evaluate(c.params(), &c.train).unwrap();
        assert!(acc >= 0.95, "training accuracy {acc}");
        assert_eq!(c.history.len(), 50);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig::default();
        let mut a = client(9);
        let mut b = client(9);
        train_episodes(&mut a, 3, &cfg).unwrap();
        train_episodes(&mut b, 3, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn uniform_model_ties_go_to_class_zero() {
        let m = ModelParams::zeros(&specs(3, 8)).unwrap();
        let b = Batch::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0; 3]], vec![0, 0]).unwrap();
        assert_eq!(evaluate(&m, &b).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_rejects_empty_batch() {
        let m = ModelParams::zeros(&specs(3, 8)).unwrap();
        assert!(evaluate(&m, &Batch::empty(3)).is_err());
    }

    #[test]
    fn untrained_model_on_random_labels_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = init_model(&specs(10, 8), 21).unwrap();
        let features = Array2::from_shape_simple_fn((1000, 10), || rng.gen_range(0.0..1.0));
        let labels = (0..1000).map(|_| rng.gen_range(0..8)).collect();
        let acc = evaluate(&m, &Batch::new(features, labels).unwrap()).unwrap();
        assert!((0.08..=0.17).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn memorized_batch_scores_one() {
        let mut c = client(2);
        c.train = c.train.select(&[0, 1, 2, 3]);
        let cfg = TrainConfig {
            learning_rate: 5e-2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_episodes(&mut c, 100, &cfg).unwrap();
        assert_eq!(evaluate(c.params(), &c.train).unwrap(), 1.0);
    }
}
