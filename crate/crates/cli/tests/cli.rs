use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seeds = [0, 1, 2]
output_dir = "out"

[dataset]
kind = "synthetic"
profiles = [
  { n_samples = 30, class_weights = [0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125] },
  { n_samples = 20, class_weights = [0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0] },
  { n_samples = 25, class_weights = [0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.4] },
  { n_samples = 20, class_weights = [0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125] },
]

[model]
layers = [
  { input_dim = 1200, output_dim = 8, activation = "relu" },
  { input_dim = 8, output_dim = 8, activation = "softmax" },
]

[train]
learning_rate = 0.001

[[protocols]]
protocol = "regular_fl"
rounds = 2
epsilon = 1

[[protocols]]
protocol = "fedper"
rounds = 2
epsilon = 1

[[protocols]]
protocol = "individual"
individual_episodes = 3

[[protocols]]
protocol = "cefl"
clusters = 2
rounds = 2
epsilon = 1
eta = 3
"#;

fn cefl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cefl"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn validate_accepts_a_good_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = cefl().arg("validate").arg(&cfg).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stderr.is_empty());
}

#[test]
fn validate_names_the_base_layer_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}base_layers = 3\n"));
    let out = cefl().arg("validate").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("base_layers") && err.contains("B <= L"),
        "{err}"
    );
}

#[test]
fn validate_names_the_weight_normalization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SMALL}aggregation_weights = [0.5, 0.4]\n"),
    );
    let out = cefl().arg("validate").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum to 1"));
}

#[test]
fn validate_reports_unreadable_file() {
    let out = cefl()
        .args(["validate", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn run_writes_one_directory_per_protocol_and_seed_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for out_dir in ["a", "b"] {
        let out = cefl()
            .arg("run")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(tmp.path().join(out_dir))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = tmp.path().join("a");
    let runs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(runs.len(), 12);
    for run in &runs {
        for file in ["metrics.csv", "ledger.csv", "summary.json"] {
            assert!(run.join(file).is_file(), "{}", run.display());
        }
    }
    assert!(a.join("cefl_seed1/clustering.json").is_file());
    assert!(a.join("cefl_seed1/graph.tsv").is_file());
    let table = fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(a.join("comparison.txt").is_file());
    assert_eq!(read_tree(&a), read_tree(&tmp.path().join("b")));
}

#[test]
fn comparison_cost_equals_ledger_total() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = cefl()
        .arg("run")
        .arg(&cfg)
        .args(["--seed-override", "5"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = tmp.path().join("out");
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    for row in table.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        let ledger = fs::read_to_string(out.join(format!("{}_seed5/ledger.csv", cols[0]))).unwrap();
        let total: u64 = ledger
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(cols[7].parse::<u64>().unwrap(), total, "{row}");
    }
}

#[test]
fn k_sweep_emits_one_curve_per_k() {
    let tmp = tempfile::tempdir().unwrap();
    let text =
        SMALL.replace("seeds = [0, 1, 2]", "seeds = [0]") + "\n[k_sweep]\nclusters = [1, 2, 4]\n";
    let cfg = write_config(tmp.path(), &text);
    let out = cefl()
        .arg("run")
        .arg(&cfg)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sweep = tmp.path().join("out/ksweep");
    for k in [1, 2, 4] {
        let curve = fs::read_to_string(sweep.join(format!("k{k}.csv"))).unwrap();
        assert!(curve.starts_with("seed,stage,round,mean_acc"));
        assert!(curve.lines().any(|l| l.contains(",round,2,")), "k={k}");
        let clustering =
            fs::read_to_string(sweep.join(format!("cefl_k{k}_seed0/clustering.json"))).unwrap();
        assert_eq!(clustering.matches("],[").count() + 1, k);
    }
}
