//! Communication metering: per-layer sizes, an append-only event ledger, and
//! the closed-form totals the ledger must reproduce.
//!
//! All bit counts are exact integers.

use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Bits transmitted per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizeModel {
    pub delta: Vec<u64>,
}

impl SizeModel {
    pub fn new(delta: Vec<u64>) -> Result<Self> {
        if delta.is_empty() || delta.contains(&0) {
            return Err(Error::input("every layer size must be positive"));
        }
        Ok(Self { delta })
    }

    /// `delta[l] = flat_layer(l).len() * bits_per_param`.
    pub fn from_model(m: &ModelParams, bits_per_param: u64) -> Result<Self> {
        if bits_per_param == 0 {
            return Err(Error::config("bits_per_param must be positive"));
        }
        Self::new(
            m.layers()
                .iter()
                .map(|l| l.param_count() as u64 * bits_per_param)
                .collect(),
        )
    }

    pub fn layer_count(&self) -> usize {
        self.delta.len()
    }

    pub fn bits(&self, layers: Range<usize>) -> u64 {
        self.delta[layers].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.delta.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitUpload,
    FlUpload,
    FlBroadcast,
    Transfer,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::InitUpload,
        Phase::FlUpload,
        Phase::FlBroadcast,
        Phase::Transfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::InitUpload => "init_upload",
            Phase::FlUpload => "fl_upload",
            Phase::FlBroadcast => "fl_broadcast",
            Phase::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Client(usize),
    Broadcast,
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Client(id) => write!(f, "client{id}"),
            Endpoint::Broadcast => f.write_str("broadcast"),
        }
    }
}

/// One simulated transmission of layers `layers` (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEvent {
    pub phase: Phase,
    pub round: Option<usize>,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub layers: Range<usize>,
    pub bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    events: Vec<CostEvent>,
    total: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a transmission of `layers`, sized by `sizes`.
    pub fn record(
        &mut self,
        sizes: &SizeModel,
        phase: Phase,
        round: Option<usize>,
        sender: Endpoint,
        receiver: Endpoint,
        layers: Range<usize>,
    ) {
        let bits = sizes.bits(layers.clone());
        self.total += bits;
        self.events.push(CostEvent {
            phase,
            round,
            sender,
            receiver,
            layers,
            bits,
        });
    }

    pub fn events(&self) -> &[CostEvent] {
        &self.events
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn phase_bits(&self, phase: Phase) -> u64 {
        self.events
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.bits)
            .sum()
    }

    pub fn phase_count(&self, phase: Phase) -> usize {
        self.events.iter().filter(|e| e.phase == phase).count()
    }

    /// Bits recorded up to and including FL round `round` (events without a
    /// round, such as initial uploads, always count).
    pub fn bits_through_round(&self, round: usize) -> u64 {
        self.events
            .iter()
            .filter(|e| e.phase != Phase::Transfer && e.round.map_or(true, |r| r <= round))
            .map(|e| e.bits)
            .sum()
    }

    /// CSV with header `phase,round,sender,receiver,layers,bits`; `layers` is
    /// written 1-based inclusive as `first-last`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "phase,round,sender,receiver,layers,bits")?;
        for e in &self.events {
            writeln!(
                out,
                "{},{},{},{},{}-{},{}",
                e.phase.as_str(),
                e.round.map(|r| r.to_string()).unwrap_or_default(),
                e.sender,
                e.receiver,
                e.layers.start + 1,
                e.layers.end,
                e.bits
            )?;
        }
        Ok(())
    }
}

/// Exact sum of the ledger's event sizes.
pub fn ledger_total(ledger: &CostLedger) -> u64 {
    ledger.events().iter().map(|e| e.bits).sum()
}

fn check_base(base_layers: usize, sizes: &SizeModel) -> Result<()> {
    if base_layers == 0 || base_layers > sizes.layer_count() {
        return Err(Error::input(format!(
            "base layer count {base_layers} must lie in 1..={}",
            sizes.layer_count()
        )));
    }
    Ok(())
}

/// Total bits of a clustered run:
/// `(N + K) * sum_{l<=L} delta_l + T * (K + 1) * sum_{l<=B} delta_l`.
pub fn closed_form_delta(
    n_clients: u64,
    n_clusters: u64,
    rounds: u64,
    base_layers: usize,
    sizes: &SizeModel,
) -> Result<u64> {
    check_base(base_layers, sizes)?;
    Ok((n_clients + n_clusters) * sizes.total()
        + rounds * (n_clusters + 1) * sizes.bits(0..base_layers))
}

/// Total bits of server-client averaging over `shared_layers` layers:
/// `N` uploads plus one broadcast per round, `T * (N + 1) * sum_{l<=B} delta_l`.
/// With `shared_layers = L` this is plain federated averaging.
pub fn closed_form_federated(
    n_clients: u64,
    rounds: u64,
    shared_layers: usize,
    sizes: &SizeModel,
) -> Result<u64> {
    check_base(shared_layers, sizes)?;
    Ok(rounds * (n_clients + 1) * sizes.bits(0..shared_layers))
}

/// `1 - candidate / baseline`.
pub fn savings_ratio(candidate_bits: u64, baseline_bits: u64) -> Result<f64> {
    if baseline_bits == 0 {
        return Err(Error::input("baseline cost must be positive"));
    }
    Ok(1.0 - candidate_bits as f64 / baseline_bits as f64)
}

/// Per-phase subtotals next to the closed form they should equal.
#[derive(Debug, Clone, Serialize)]
pub struct CostSummary {
    pub init_upload: u64,
    pub fl_upload: u64,
    pub fl_broadcast: u64,
    pub transfer: u64,
    pub total: u64,
    pub closed_form: u64,
    #[serde(rename = "match")]
    pub matches: bool,
}

impl CostSummary {
    pub fn new(ledger: &CostLedger, closed_form: u64) -> Self {
        Self {
            init_upload: ledger.phase_bits(Phase::InitUpload),
            fl_upload: ledger.phase_bits(Phase::FlUpload),
            fl_broadcast: ledger.phase_bits(Phase::FlBroadcast),
            transfer: ledger.phase_bits(Phase::Transfer),
            total: ledger.total(),
            closed_form,
            matches: ledger.total() == closed_form,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_substitution() {
        let sizes = SizeModel::new(vec![10, 20]).unwrap();
        assert_eq!(closed_form_delta(4, 2, 3, 1, &sizes).unwrap(), 270);
        assert_eq!(closed_form_delta(4, 2, 0, 1, &sizes).unwrap(), 6 * 30);
        assert!(closed_form_delta(4, 2, 3, 3, &sizes).is_err());
        assert!(closed_form_delta(4, 2, 3, 0, &sizes).is_err());
    }

    #[test]
    fn ledger_sums_exactly() {
        let sizes = SizeModel::new(vec![100, 250]).unwrap();
        let mut ledger = CostLedger::new();
        assert_eq!(ledger_total(&ledger), 0);
        ledger.record(
            &sizes,
            Phase::FlUpload,
            Some(1),
            Endpoint::Client(0),
            Endpoint::Server,
            0..1,
        );
        ledger.record(
            &sizes,
            Phase::FlBroadcast,
            Some(1),
            Endpoint::Server,
            Endpoint::Broadcast,
            1..2,
        );
        assert_eq!(ledger_total(&ledger), 350);
        assert_eq!(ledger.total(), 350);
    }

    #[test]
    fn savings() {
        assert_eq!(savings_ratio(5, 5).unwrap(), 0.0);
        assert!((savings_ratio(1231, 79730).unwrap() - 0.98456).abs() < 1e-5);
        assert_eq!(savings_ratio(0, 79730).unwrap(), 1.0);
        assert!(savings_ratio(1, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let sizes = SizeModel::new(vec![8, 16, 4]).unwrap();
        let mut ledger = CostLedger::new();
        ledger.record(
            &sizes,
            Phase::InitUpload,
            None,
            Endpoint::Client(3),
            Endpoint::Server,
            0..3,
        );
        ledger.record(
            &sizes,
            Phase::FlBroadcast,
            Some(2),
            Endpoint::Server,
            Endpoint::Broadcast,
            0..2,
        );
        let mut out = Vec::new();
        ledger.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "phase,round,sender,receiver,layers,bits\n\
             init_upload,,client3,server,1-3,28\n\
             fl_broadcast,2,server,broadcast,1-2,24\n"
        );
    }

    #[test]
    fn size_model_from_parameters() {
        use crate::model::{init_model, Activation, LayerSpec};
        let m = init_model(
            &[
                LayerSpec::new(4, 3, Activation::Relu),
                LayerSpec::new(3, 2, Activation::Softmax),
            ],
            0,
        )
        .unwrap();
        assert_eq!(
            SizeModel::from_model(&m, 32).unwrap().delta,
            vec![15 * 32, 8 * 32]
        );
        assert_eq!(
            SizeModel::from_model(&m, 64).unwrap().delta,
            vec![15 * 64, 8 * 64]
        );
    }
}
