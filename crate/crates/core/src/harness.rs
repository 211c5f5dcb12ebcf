//! Runs every configured (protocol, seed) pair and writes metrics, ledgers,
//! summaries and a cross-protocol comparison table.
//!
//! Layout under the output directory:
//!
//! ```text
//! <label>_seed<s>/metrics.csv, ledger.csv, summary.json
//!                 graph.tsv, clustering.json        (clustered runs)
//! comparison.csv, comparison.txt
//! ksweep/k<K>.csv, ksweep/<label>_seed<s>/...       (with a K-sweep)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::cost::CostSummary;
use crate::error::{Error, Result};
use crate::flcore::{run_protocol, ClientData, Protocol, ProtocolConfig, RunResult};

/// One finished run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub result: RunResult,
}

/// One line of the comparison table, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub protocol: Protocol,
    pub aggregation_rounds: usize,
    pub episodes_per_round: usize,
    pub local_episodes: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub cost_bits: u64,
    pub savings_vs_regular: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    label: &'a str,
    protocol: Protocol,
    seed: u64,
    final_mean_acc: f64,
    final_std_acc: f64,
    final_accuracy: &'a [Option<f64>],
    aggregation_rounds: usize,
    episodes_per_round: usize,
    local_episodes: f64,
    cost: CostSummary,
    clusters: Option<usize>,
    louvain_communities: Option<usize>,
    louvain_modularity: Option<f64>,
    final_modularity: Option<f64>,
    partial_layer_checks: usize,
    partial_layer_violations: usize,
    warnings: &'a [String],
}

/// Per-round metrics CSV.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("stage,round,protocol,mean_acc,std_acc,cumulative_cost_bits\n");
    for m in &record.result.rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.stage, m.round, record.label, m.mean_acc, m.std_acc, m.cumulative_bits
        );
    }
    out
}

fn summary_json(record: &RunRecord) -> Result<String> {
    let r = &record.result;
    let report = r.cluster_report.as_ref();
    let summary = Summary {
        label: &record.label,
        protocol: r.protocol,
        seed: record.seed,
        final_mean_acc: r.final_mean,
        final_std_acc: r.final_std,
        final_accuracy: &r.final_accuracy,
        aggregation_rounds: r.aggregation_rounds,
        episodes_per_round: r.episodes_per_round,
        local_episodes: r.local_episodes,
        cost: CostSummary::new(&r.ledger, r.expected_bits),
        clusters: r.clustering.as_ref().map(|c| c.k()),
        louvain_communities: report.map(|c| c.louvain_communities),
        louvain_modularity: report.map(|c| c.louvain_modularity),
        final_modularity: report.map(|c| c.final_modularity),
        partial_layer_checks: r.partial_layer_checks,
        partial_layer_violations: r.partial_layer_violations,
        warnings: &r.warnings,
    };
    Ok(serde_json::to_string_pretty(&summary)? + "\n")
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the artifacts of one run into `dir`.
pub fn write_run(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), metrics_csv(record).as_bytes())?;
    let mut ledger = Vec::new();
    record
        .result
        .ledger
        .write_csv(&mut ledger)
        .map_err(|e| Error::io(dir.join("ledger.csv"), e))?;
    write(&dir.join("ledger.csv"), &ledger)?;
    write(&dir.join("summary.json"), summary_json(record)?.as_bytes())?;
    if let Some(g) = &record.result.graph {
        let mut edges = Vec::new();
        g.write_edge_list(&mut edges)
            .map_err(|e| Error::io(dir.join("graph.tsv"), e))?;
        write(&dir.join("graph.tsv"), &edges)?;
    }
    if let Some(c) = &record.result.clustering {
        write(
            &dir.join("clustering.json"),
            (c.to_json() + "\n").as_bytes(),
        )?;
    }
    Ok(())
}

/// Averages runs per label, in the order labels first appear.
pub fn comparison(records: &[RunRecord]) -> Vec<ComparisonRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut rows: Vec<ComparisonRow> = labels
        .iter()
        .map(|label| {
            let runs: Vec<&RunResult> = records
                .iter()
                .filter(|r| r.label == *label)
                .map(|r| &r.result)
                .collect();
            let n = runs.len() as f64;
            let first = runs[0];
            ComparisonRow {
                label: label.to_string(),
                protocol: first.protocol,
                aggregation_rounds: first.aggregation_rounds,
                episodes_per_round: first.episodes_per_round,
                local_episodes: runs.iter().map(|r| r.local_episodes).sum::<f64>() / n,
                mean_acc: runs.iter().map(|r| r.final_mean).sum::<f64>() / n,
                std_acc: runs.iter().map(|r| r.final_std).sum::<f64>() / n,
                // Cost does not depend on the data, so every seed agrees.
                cost_bits: first.ledger.total(),
                savings_vs_regular: None,
            }
        })
        .collect();
    let regular = rows
        .iter()
        .find(|r| r.protocol == Protocol::RegularFl)
        .map(|r| r.cost_bits)
        .filter(|&b| b > 0);
    if let Some(base) = regular {
        for row in &mut rows {
            row.savings_vs_regular = Some(1.0 - row.cost_bits as f64 / base as f64);
        }
    }
    rows
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "label,protocol,aggregation_rounds,episodes_per_round,local_episodes,mean_acc,std_acc,cost_bits,savings_vs_regular\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.protocol,
            r.aggregation_rounds,
            r.episodes_per_round,
            r.local_episodes,
            r.mean_acc,
            r.std_acc,
            r.cost_bits,
            r.savings_vs_regular
                .map(|s| s.to_string())
                .unwrap_or_default()
        );
    }
    out
}

/// The comparison as an aligned plain-text table, accuracy in percent.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let header = [
        "model",
        "rounds",
        "eps/round",
        "local eps",
        "accuracy (%)",
        "cost (bits)",
        "savings",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.aggregation_rounds.to_string(),
                r.episodes_per_round.to_string(),
                format!("{:.1}", r.local_episodes),
                format!("{:.2} +- {:.2}", 100.0 * r.mean_acc, 100.0 * r.std_acc),
                r.cost_bits.to_string(),
                r.savings_vs_regular
                    .map(|s| format!("{:.2}%", 100.0 * s))
                    .unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..7)
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for r in &body {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

fn run_all(
    cfg: &RunConfig,
    protocols: &[ProtocolConfig],
    data: &[ClientData],
    seed: u64,
    out_dir: &Path,
    records: &mut Vec<RunRecord>,
) -> Result<()> {
    let setup = cfg.setup();
    for p in protocols {
        let label = p.label();
        info!("running {label} with seed {seed}");
        let result = run_protocol(p, &setup, data, seed)?;
        let record = RunRecord {
            label,
            seed,
            result,
        };
        write_run(
            &record,
            &out_dir.join(format!("{}_seed{seed}", record.label)),
        )?;
        records.push(record);
    }
    Ok(())
}

/// Runs everything `cfg` asks for and writes the artifacts under `out_dir`.
pub fn execute(cfg: &RunConfig, out_dir: &Path) -> Result<(Vec<RunRecord>, Vec<RunRecord>)> {
    cfg.validate()?;
    let sweep = cfg.sweep_protocols()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    let mut sweep_records = Vec::new();
    for &seed in &cfg.seeds {
        let shards = cfg.shards(seed)?;
        let data: Vec<ClientData> = shards.iter().map(ClientData::from).collect();
        for p in cfg.protocols.iter().chain(&sweep) {
            p.validate(cfg.model.layers.len(), data.len())?;
        }
        run_all(cfg, &cfg.protocols, &data, seed, out_dir, &mut records)?;
        run_all(
            cfg,
            &sweep,
            &data,
            seed,
            &out_dir.join("ksweep"),
            &mut sweep_records,
        )?;
    }
    let rows = comparison(&records);
    write(
        &out_dir.join("comparison.csv"),
        comparison_csv(&rows).as_bytes(),
    )?;
    write(
        &out_dir.join("comparison.txt"),
        comparison_text(&rows).as_bytes(),
    )?;
    for p in &sweep {
        let mut csv = String::from("seed,stage,round,mean_acc,std_acc,cumulative_cost_bits\n");
        for r in sweep_records.iter().filter(|r| r.label == p.label()) {
            for m in &r.result.rounds {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    r.seed, m.stage, m.round, m.mean_acc, m.std_acc, m.cumulative_bits
                );
            }
        }
        write(
            &out_dir.join("ksweep").join(format!("k{}.csv", p.clusters)),
            csv.as_bytes(),
        )?;
    }
    Ok((records, sweep_records))
}
