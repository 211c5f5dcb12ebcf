use crate::clustering::{cluster_clients, Clustering};
use crate::cost::{
    closed_form_delta, closed_form_federated, CostLedger, Endpoint, Phase, SizeModel,
};
use crate::error::{Error, Result};
use crate::model::{
    derive_seed, init_model, train_episodes, validate_specs, ClientState, Layer, ModelParams,
};
use crate::similarity::build_graph;

use super::{
    broadcast_base, fedavg_aggregate, mean_std, sample_weights, transfer_session, ClientData,
    Protocol, ProtocolConfig, RoundMetrics, RunResult, Setup,
};

const INIT_SALT: u64 = 1;
const TRAIN_SALT: u64 = 2;
const CLUSTER_SALT: u64 = 3;

/// Runs `cfg.protocol` on `data` with every random choice derived from `seed`.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    setup: &Setup,
    data: &[ClientData],
    seed: u64,
) -> Result<RunResult> {
    match cfg.protocol {
        Protocol::Individual => run_individual(cfg, setup, data, seed),
        Protocol::RegularFl => run_regular_fl(cfg, setup, data, seed),
        Protocol::Fedper => run_fedper(cfg, setup, data, seed),
        Protocol::Cefl => run_cefl(cfg, setup, data, seed),
    }
}

struct Run {
    clients: Vec<ClientState>,
    sizes: SizeModel,
    ledger: CostLedger,
    rows: Vec<RoundMetrics>,
    checks: usize,
    violations: usize,
}

impl Run {
    fn start(
        cfg: &ProtocolConfig,
        expected: Protocol,
        setup: &Setup,
        data: &[ClientData],
        seed: u64,
    ) -> Result<Self> {
        if cfg.protocol != expected {
            return Err(Error::config(format!(
                "configuration is for {}, not {expected}",
                cfg.protocol
            )));
        }
        validate_specs(&setup.layers)?;
        setup.train.validate()?;
        cfg.validate(setup.layers.len(), data.len())?;
        let init = init_model(&setup.layers, derive_seed(seed, INIT_SALT))?;
        let (dim, classes) = (init.input_dim(), init.output_dim());
        for (i, d) in data.iter().enumerate() {
            for (name, b) in [("train", &d.train), ("test", &d.test)] {
                if !b.is_empty() && b.dim() != dim {
                    return Err(Error::input(format!(
                        "client {i} {name} features have {} values, model expects {dim}",
                        b.dim()
                    )));
                }
                if let Some(&y) = b.labels.iter().find(|&&y| y >= classes) {
                    return Err(Error::input(format!(
                        "client {i} {name} label {y} outside 0..{classes}"
                    )));
                }
            }
        }
        let train_seed = derive_seed(seed, TRAIN_SALT);
        let clients = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                ClientState::new(i, d.train.clone(), d.test.clone(), init.clone(), train_seed)
            })
            .collect();
        Ok(Self {
            clients,
            sizes: SizeModel::from_model(&init, setup.bits_per_param)?,
            ledger: CostLedger::new(),
            rows: Vec::new(),
            checks: 0,
            violations: 0,
        })
    }

    fn layer_count(&self) -> usize {
        self.sizes.layer_count()
    }

    fn push_row(
        &mut self,
        stage: &'static str,
        round: usize,
        accs: impl IntoIterator<Item = Option<f64>>,
    ) {
        let accs: Vec<f64> = accs.into_iter().flatten().collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        self.rows.push(RoundMetrics {
            stage,
            round,
            mean_acc,
            std_acc,
            cumulative_bits: self.ledger.total(),
        });
    }

    fn accuracies(&self, ids: &[usize]) -> Vec<Option<f64>> {
        ids.iter()
            .map(|&i| self.clients[i].test_accuracy())
            .collect()
    }

    /// `rounds` rounds of: participants train, upload layers `0..shared`,
    /// the server averages with `weights` and broadcasts the result once.
    fn federate(
        &mut self,
        participants: &[usize],
        weights: &[f64],
        shared: usize,
        rounds: usize,
        epsilon: usize,
        train: &crate::model::TrainConfig,
    ) -> Result<()> {
        let all = self.layer_count();
        for t in 1..=rounds {
            for &i in participants {
                train_episodes(&mut self.clients[i], epsilon, train)?;
                self.ledger.record(
                    &self.sizes,
                    Phase::FlUpload,
                    Some(t),
                    Endpoint::Client(i),
                    Endpoint::Server,
                    0..shared,
                );
            }
            let models: Vec<&ModelParams> = participants
                .iter()
                .map(|&i| self.clients[i].params())
                .collect();
            let global = fedavg_aggregate(&models, weights, 0..shared)?;
            self.ledger.record(
                &self.sizes,
                Phase::FlBroadcast,
                Some(t),
                Endpoint::Server,
                Endpoint::Broadcast,
                0..shared,
            );
            for &i in participants {
                let before: Vec<Layer> = self.clients[i].params().layers()[shared..].to_vec();
                let mut next = self.clients[i].params().clone();
                broadcast_base(&global, &mut next)?;
                self.clients[i].set_leading_layers(&next, shared);
                if shared < all {
                    self.checks += 1;
                    if self.clients[i].params().layers()[shared..] != before[..] {
                        self.violations += 1;
                    }
                }
            }
            let accs = self.accuracies(participants);
            self.push_row("round", t, accs);
        }
        Ok(())
    }

    fn finish(self, protocol: Protocol, expected_bits: u64) -> RunResult {
        let final_accuracy: Vec<Option<f64>> = self
            .clients
            .iter()
            .map(ClientState::test_accuracy)
            .collect();
        let present: Vec<f64> = final_accuracy.iter().flatten().copied().collect();
        let (final_mean, final_std) = mean_std(&present);
        let mut warnings: Vec<String> = Vec::new();
        for w in self.clients.iter().flat_map(|c| &c.warnings) {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        RunResult {
            protocol,
            rounds: self.rows,
            final_accuracy,
            final_mean,
            final_std,
            ledger: self.ledger,
            sizes: self.sizes,
            expected_bits,
            aggregation_rounds: 0,
            episodes_per_round: 0,
            local_episodes: 0.0,
            graph: None,
            clustering: None,
            cluster_report: None,
            partial_layer_checks: self.checks,
            partial_layer_violations: self.violations,
            final_models: self.clients.iter().map(|c| c.params().clone()).collect(),
            warnings,
        }
    }
}

fn all_ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Every client trains alone for `cfg.individual_episodes` episodes; nothing
/// is transmitted.
pub fn run_individual(
    cfg: &ProtocolConfig,
    setup: &Setup,
    data: &[ClientData],
    seed: u64,
) -> Result<RunResult> {
    let mut run = Run::start(cfg, Protocol::Individual, setup, data, seed)?;
    let ids = all_ids(data.len());
    let initial = run.accuracies(&ids);
    run.push_row("episode", 0, initial.clone());
    for c in &mut run.clients {
        train_episodes(c, cfg.individual_episodes, &setup.train)?;
    }
    for e in 1..=cfg.individual_episodes {
        let accs: Vec<Option<f64>> = run
            .clients
            .iter()
            .zip(&initial)
            .map(|(c, &init)| match c.history.len() {
                0 => init,
                len => c.history[e.min(len) - 1].test_accuracy,
            })
            .collect();
        run.push_row("episode", e, accs);
    }
    let mut result = run.finish(Protocol::Individual, 0);
    result.local_episodes = cfg.individual_episodes as f64;
    Ok(result)
}

/// Federated averaging of whole models, weighted by training-set size.
pub fn run_regular_fl(
    cfg: &ProtocolConfig,
    setup: &Setup,
    data: &[ClientData],
    seed: u64,
) -> Result<RunResult> {
    let mut run = Run::start(cfg, Protocol::RegularFl, setup, data, seed)?;
    let layers = run.layer_count();
    federated_baseline(&mut run, cfg, setup, layers)?;
    let expected = closed_form_federated(data.len() as u64, cfg.rounds as u64, layers, &run.sizes)?;
    let mut result = run.finish(Protocol::RegularFl, expected);
    result.aggregation_rounds = cfg.rounds;
    result.episodes_per_round = cfg.epsilon;
    Ok(result)
}

/// Federated averaging of the base layers only; every client keeps its own
/// head.
pub fn run_fedper(
    cfg: &ProtocolConfig,
    setup: &Setup,
    data: &[ClientData],
    seed: u64,
) -> Result<RunResult> {
    let mut run = Run::start(cfg, Protocol::Fedper, setup, data, seed)?;
    let base = cfg.base_for(run.layer_count());
    federated_baseline(&mut run, cfg, setup, base)?;
    let expected = closed_form_federated(data.len() as u64, cfg.rounds as u64, base, &run.sizes)?;
    let mut result = run.finish(Protocol::Fedper, expected);
    result.aggregation_rounds = cfg.rounds;
    result.episodes_per_round = cfg.epsilon;
    Ok(result)
}

fn federated_baseline(
    run: &mut Run,
    cfg: &ProtocolConfig,
    setup: &Setup,
    shared: usize,
) -> Result<()> {
    let ids = all_ids(run.clients.len());
    let counts: Vec<usize> = run.clients.iter().map(ClientState::sample_count).collect();
    let weights = sample_weights(&counts)?;
    let initial = run.accuracies(&ids);
    run.push_row("round", 0, initial);
    run.federate(
        &ids,
        &weights,
        shared,
        cfg.rounds,
        cfg.epsilon,
        &setup.train,
    )
}

/// The clustered protocol: short local training, full-model upload, similarity
/// clustering with one leader per cluster, base-layer averaging among leaders,
/// then transfer of each leader's model to its members for fine-tuning.
pub fn run_cefl(
    cfg: &ProtocolConfig,
    setup: &Setup,
    data: &[ClientData],
    seed: u64,
) -> Result<RunResult> {
    let mut run = Run::start(cfg, Protocol::Cefl, setup, data, seed)?;
    let n = data.len();
    let all = run.layer_count();
    let base = cfg.base_for(all);
    let ids = all_ids(n);

    for i in 0..n {
        train_episodes(&mut run.clients[i], cfg.epsilon_init, &setup.train)?;
        run.ledger.record(
            &run.sizes,
            Phase::InitUpload,
            None,
            Endpoint::Client(i),
            Endpoint::Server,
            0..all,
        );
    }
    let accs = run.accuracies(&ids);
    run.push_row("init", 0, accs);

    let (graph, clustering, report) = if n >= 2 {
        let models: Vec<&ModelParams> = run.clients.iter().map(ClientState::params).collect();
        let graph = build_graph(&models)?;
        let (clustering, report) =
            cluster_clients(&graph, cfg.clusters, derive_seed(seed, CLUSTER_SALT))?;
        (Some(graph), clustering, Some(report))
    } else {
        (
            None,
            Clustering::contiguous(n, 1).with_first_leaders(),
            None,
        )
    };
    let mut extra_warnings = Vec::new();
    if report.as_ref().is_some_and(|r| r.degenerate) {
        let msg =
            "all client models are equidistant; clusters fall back to contiguous index ranges"
                .to_string();
        log::warn!("{msg}");
        extra_warnings.push(msg);
    }

    let leaders = clustering.leaders().to_vec();
    run.federate(
        &leaders,
        &cfg.leader_weights(),
        base,
        cfg.rounds,
        cfg.epsilon,
        &setup.train,
    )?;

    let outcome = transfer_session(
        &mut run.clients,
        &clustering,
        cfg,
        &setup.train,
        &run.sizes,
        &mut run.ledger,
    )?;
    let longest = outcome.curves.iter().map(Vec::len).max().unwrap_or(1);
    for e in 1..longest {
        let accs: Vec<Option<f64>> = outcome
            .curves
            .iter()
            .map(|c| c[e.min(c.len() - 1)])
            .collect();
        run.push_row("transfer", e, accs);
    }
    if longest == 1 {
        let accs = run.accuracies(&ids);
        run.push_row("transfer", 0, accs);
    }

    let members: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&i| !clustering.is_leader(i))
        .collect();
    let local = if members.is_empty() {
        0.0
    } else {
        members
            .iter()
            .map(|&i| outcome.episodes[i] as f64)
            .sum::<f64>()
            / members.len() as f64
    };
    let expected = closed_form_delta(
        n as u64,
        cfg.clusters as u64,
        cfg.rounds as u64,
        base,
        &run.sizes,
    )?;
    let mut result = run.finish(Protocol::Cefl, expected);
    result.warnings.extend(extra_warnings);
    result.aggregation_rounds = cfg.rounds;
    result.episodes_per_round = cfg.epsilon;
    result.local_episodes = local;
    result.graph = graph;
    result.clustering = Some(clustering);
    result.cluster_report = report;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ledger_total;
    use crate::model::{Activation, Batch, LayerSpec, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> Setup {
        Setup {
            layers: vec![
                LayerSpec::new(4, 6, Activation::Relu),
                LayerSpec::new(6, 5, Activation::Relu),
                LayerSpec::new(5, 3, Activation::Softmax),
            ],
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 4,
                ..TrainConfig::default()
            },
            bits_per_param: 32,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Batch {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = rng.gen_range(0..3);
            let row: Vec<f64> = (0..4)
                .map(|j| if j == y { 1.0 + shift } else { 0.0 } + rng.gen_range(-0.3..0.3))
                .collect();
            rows.push(row);
            labels.push(y);
        }
        Batch::from_rows(&rows, labels).unwrap()
    }

    fn clients(n: usize, size: usize, seed: u64) -> Vec<ClientData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let shift = (i % 2) as f64;
                ClientData {
                    train: batch(&mut rng, size, shift),
                    test: batch(&mut rng, size / 2, shift),
                }
            })
            .collect()
    }

    fn cefl(k: usize, t: usize) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::new(Protocol::Cefl);
        cfg.clusters = k;
        cfg.rounds = t;
        cfg.epsilon = 2;
        cfg.eta = 5;
        cfg
    }

    #[test]
    fn cefl_ledger_matches_closed_form_and_event_counts() {
        let data = clients(6, 12, 1);
        let r = run_cefl(&cefl(2, 3), &setup(), &data, 7).unwrap();
        assert_eq!(ledger_total(&r.ledger), r.expected_bits);
        assert_eq!(r.ledger.phase_count(Phase::InitUpload), 6);
        assert_eq!(r.ledger.phase_count(Phase::FlUpload), 2 * 3);
        assert_eq!(r.ledger.phase_count(Phase::FlBroadcast), 3);
        assert_eq!(r.ledger.phase_count(Phase::Transfer), 2);
        assert_eq!(r.partial_layer_violations, 0);
        assert_eq!(r.partial_layer_checks, 2 * 3);
    }

    #[test]
    fn zero_rounds_cost_nothing_in_fl_phases() {
        let data = clients(4, 8, 2);
        let r = run_cefl(&cefl(2, 0), &setup(), &data, 1).unwrap();
        assert_eq!(r.ledger.phase_bits(Phase::FlUpload), 0);
        assert_eq!(r.ledger.phase_bits(Phase::FlBroadcast), 0);
        let mut reg = ProtocolConfig::new(Protocol::RegularFl);
        reg.rounds = 0;
        let r = run_regular_fl(&reg, &setup(), &data, 1).unwrap();
        assert_eq!(r.ledger.total(), 0);
    }

    #[test]
    fn fedper_keeps_heads_and_matches_closed_form() {
        let data = clients(4, 8, 3);
        let mut cfg = ProtocolConfig::new(Protocol::Fedper);
        cfg.rounds = 3;
        cfg.epsilon = 1;
        cfg.base_layers = Some(1);
        let r = run_fedper(&cfg, &setup(), &data, 5).unwrap();
        assert_eq!(r.ledger.total(), r.expected_bits);
        assert_eq!(r.partial_layer_checks, 12);
        assert_eq!(r.partial_layer_violations, 0);
        // Base layers agree after the last broadcast; heads differ.
        let m = &r.final_models;
        assert!(m.iter().all(|x| x.layers()[0] == m[0].layers()[0]));
        assert_ne!(m[0].layers()[2], m[1].layers()[2]);
    }

    #[test]
    fn regular_fl_ends_with_one_global_model() {
        let data = clients(3, 8, 4);
        let mut cfg = ProtocolConfig::new(Protocol::RegularFl);
        cfg.rounds = 2;
        cfg.epsilon = 1;
        let r = run_regular_fl(&cfg, &setup(), &data, 9).unwrap();
        assert!(r.final_models.iter().all(|m| *m == r.final_models[0]));
        assert_eq!(r.ledger.total(), r.expected_bits);
        assert_eq!(r.rounds.len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = clients(5, 10, 5);
        let a = run_cefl(&cefl(2, 2), &setup(), &data, 3).unwrap();
        let b = run_cefl(&cefl(2, 2), &setup(), &data, 3).unwrap();
        assert_eq!(a.final_models, b.final_models);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.clustering, b.clustering);
    }

    #[test]
    fn empty_client_is_skipped_with_warning() {
        let mut data = clients(4, 8, 6);
        data[2].train = Batch::empty(4);
        let mut cfg = ProtocolConfig::new(Protocol::RegularFl);
        cfg.rounds = 2;
        cfg.epsilon = 1;
        let r = run_regular_fl(&cfg, &setup(), &data, 1).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("client 2"));
        assert!(r.final_models.iter().all(|m| *m == r.final_models[0]));
    }

    #[test]
    fn single_client_regular_fl_equals_individual_training() {
        let data = clients(1, 12, 7);
        let mut reg = ProtocolConfig::new(Protocol::RegularFl);
        reg.rounds = 3;
        reg.epsilon = 2;
        let mut ind = ProtocolConfig::new(Protocol::Individual);
        ind.individual_episodes = 6;
        let a = run_regular_fl(&reg, &setup(), &data, 11).unwrap();
        let b = run_individual(&ind, &setup(), &data, 11).unwrap();
        assert_eq!(a.final_models, b.final_models);
        assert_eq!(a.final_accuracy, b.final_accuracy);
    }

    #[test]
    fn cefl_with_singleton_clusters_reduces_to_regular_fl() {
        let data = clients(4, 8, 12);
        let mut c = cefl(4, 3);
        c.base_layers = Some(3);
        c.epsilon_init = 0;
        let mut reg = ProtocolConfig::new(Protocol::RegularFl);
        reg.rounds = 3;
        reg.epsilon = 2;
        let a = run_cefl(&c, &setup(), &data, 21).unwrap();
        let b = run_regular_fl(&reg, &setup(), &data, 21).unwrap();
        let fl = |r: &RunResult| -> Vec<f64> {
            r.rounds
                .iter()
                .filter(|m| m.stage == "round" && m.round > 0)
                .map(|m| m.mean_acc)
                .collect()
        };
        assert_eq!(fl(&a), fl(&b));
        assert_eq!(a.final_models, b.final_models);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut data = clients(2, 4, 8);
        data[1].test = Batch::from_rows(&[vec![0.0; 5]], vec![0]).unwrap();
        let mut cfg = ProtocolConfig::new(Protocol::Individual);
        cfg.individual_episodes = 1;
        assert!(run_individual(&cfg, &setup(), &data, 0).is_err());
    }
}
