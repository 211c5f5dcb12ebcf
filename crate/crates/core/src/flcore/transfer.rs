use crate::clustering::Clustering;
use crate::cost::{CostLedger, Endpoint, Phase, SizeModel};
use crate::error::{Error, Result};
use crate::model::{train_episodes, ClientState, TrainConfig};

use super::ProtocolConfig;

/// What happened to each client during transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    /// Fine-tuning episodes run per client (0 for leaders).
    pub episodes: Vec<usize>,
    /// Test accuracy per client after 0, 1, 2, ... fine-tuning episodes.
    /// Leaders hold a single entry; clients without test data hold `None`.
    pub curves: Vec<Vec<Option<f64>>>,
}

/// Sends each leader's full model to its cluster members, then fine-tunes
/// every member for at most `cfg.eta` episodes, stopping once test accuracy
/// has not improved by more than `cfg.min_delta` for `cfg.patience`
/// consecutive episodes.
///
/// One full-model transmission is recorded per cluster.
pub fn transfer_session(
    clients: &mut [ClientState],
    clustering: &Clustering,
    cfg: &ProtocolConfig,
    train: &TrainConfig,
    sizes: &SizeModel,
    ledger: &mut CostLedger,
) -> Result<TransferOutcome> {
    if clustering.len() != clients.len() {
        return Err(Error::input(format!(
            "clustering covers {} clients, run has {}",
            clustering.len(),
            clients.len()
        )));
    }
    let n = clients.len();
    let mut episodes = vec![0; n];
    let mut curves: Vec<Vec<Option<f64>>> =
        clients.iter().map(|c| vec![c.test_accuracy()]).collect();
    let layers = 0..sizes.layer_count();
    for (k, members) in clustering.clusters().iter().enumerate() {
        let leader = clustering.leaders()[k];
        ledger.record(
            sizes,
            Phase::Transfer,
            None,
            Endpoint::Client(leader),
            Endpoint::Broadcast,
            layers.clone(),
        );
        let model = clients[leader].params().clone();
        for &m in members.iter().filter(|&&m| m != leader) {
            let c = &mut clients[m];
            c.set_params(model.clone());
            let curve = &mut curves[m];
            curve[0] = c.test_accuracy();
            let mut best = curve[0];
            let mut stale = 0;
            while episodes[m] < cfg.eta {
                train_episodes(c, 1, train)?;
                if c.train.is_empty() {
                    break;
                }
                episodes[m] += 1;
                let acc = c.history.last().and_then(|r| r.test_accuracy);
                curve.push(acc);
                if let (Some(a), Some(b)) = (acc, best) {
                    if a > b + cfg.min_delta {
                        best = acc;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= cfg.patience {
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(TransferOutcome { episodes, curves })
}
