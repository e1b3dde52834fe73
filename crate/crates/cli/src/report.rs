//! Artifact writers: the metrics CSV, the run summary, method-comparison
//! reports, and the optional feature/attention dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stylefed_core::federation::{
    convergence_round, Federation, FederationConfig, Method, RoundRecord,
};
use stylefed_core::server::PrototypeTensor;
use stylefed_core::{Error, Result};

/// Fixed column set. Wall time is deliberately absent: the CSV must be
/// byte-identical across reruns of the same spec and seed.
pub const METRICS_COLUMNS: &str =
    "round,mean_acc,std_acc,mean_f1,std_f1,brier,loss_ce,loss_pull,loss_shared,loss_server,bytes_up,bytes_down";

pub fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_COLUMNS);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.mean_acc,
            r.std_acc,
            r.mean_f1,
            r.std_f1,
            r.brier,
            r.loss_ce,
            r.loss_pull,
            r.loss_shared,
            r.loss_server,
            r.bytes_up,
            r.bytes_down
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a FederationConfig,
    rounds_evaluated: usize,
    best_acc: f64,
    best_acc_round: usize,
    best_macro_f1: f64,
    best_f1_round: usize,
    min_brier: f64,
    min_brier_round: usize,
    final_mean_acc: f64,
    final_std_acc: f64,
    convergence_round: Option<usize>,
    total_wall_ms: u64,
}

pub fn write_summary_json(
    path: &Path,
    config: &FederationConfig,
    records: &[RoundRecord],
) -> Result<()> {
    let last = records.last().ok_or(Error::Domain {
        op: "write_summary_json",
        message: "no evaluation records".into(),
    })?;
    let best_acc = records
        .iter()
        .max_by(|a, b| a.mean_acc.total_cmp(&b.mean_acc))
        .expect("nonempty");
    let best_f1 = records
        .iter()
        .max_by(|a, b| a.mean_f1.total_cmp(&b.mean_f1))
        .expect("nonempty");
    let min_brier = records
        .iter()
        .min_by(|a, b| a.brier.total_cmp(&b.brier))
        .expect("nonempty");
    let summary = Summary {
        config,
        rounds_evaluated: records.len(),
        best_acc: best_acc.mean_acc,
        best_acc_round: best_acc.round,
        best_macro_f1: best_f1.mean_f1,
        best_f1_round: best_f1.round,
        min_brier: min_brier.brier,
        min_brier_round: min_brier.round,
        final_mean_acc: last.mean_acc,
        final_std_acc: last.std_acc,
        convergence_round: convergence_round(records, 0.95),
        total_wall_ms: records.iter().map(|r| r.wall_ms).sum(),
    };
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-sample personalized features on every client's held-out shard, for
/// external projection tools. 17 significant digits round-trip exactly.
pub fn write_embeddings_csv(path: &Path, fed: &Federation) -> Result<()> {
    let globals = fed.globals().values().clone();
    let initialized = fed.globals().initialized().to_vec();
    let dim = fed.config().feature_dim;
    let mut out = String::from("client_id,label");
    for j in 0..dim {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for client in fed.clients() {
        let shard = client.test_shard();
        if shard.is_empty() {
            continue;
        }
        let features = client.personalized_features(shard, &globals, &initialized)?;
        for (i, &label) in shard.labels().iter().enumerate() {
            write!(out, "{},{label}", client.id).expect("string write");
            for v in features.row(i) {
                write!(out, ",{v:.16e}").expect("string write");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Current per-class aggregation weights over the clients' present shared
/// means: the trained attention pattern, or uniform weights for the
/// averaging baseline.
pub fn write_attention_csv(path: &Path, fed: &Federation) -> Result<()> {
    let class_count = fed.config().data.class_count;
    let mut uploads = Vec::new();
    for client in fed.clients() {
        if client.train_shard().is_empty() {
            continue;
        }
        let entries = client.compute_shared_means()?;
        if entries.is_empty() {
            continue;
        }
        uploads.push(stylefed_core::client::ClientUpload {
            client_id: client.id,
            class_count,
            entries,
        });
    }
    let cp = PrototypeTensor::assemble(&uploads, class_count)?;
    let weights = match fed.aggregator() {
        Some(agg) => agg.aggregate(&cp)?.1.weights,
        None => {
            let mut w = vec![vec![0.0; cp.clients()]; class_count];
            for (c, row) in w.iter_mut().enumerate() {
                let rows = cp.present_rows(c);
                for &k in &rows {
                    row[k] = 1.0 / rows.len() as f64;
                }
            }
            w
        }
    };
    let mut out = String::from("class,client_id,weight\n");
    for (c, row) in weights.iter().enumerate() {
        for (k, &weight) in row.iter().enumerate() {
            writeln!(out, "{c},{},{weight}", cp.client_ids()[k]).expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One method arm's final per-client accuracies across all seeds.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub per_seed_mean_acc: Vec<f64>,
    pub mean_final_acc: f64,
    /// Keyed by (seed, client_id); the pairing key across arms.
    pub accuracies: std::collections::BTreeMap<(u64, usize), f64>,
}

/// Paired comparison of two arms. `wilcoxon_p` is `None` when fewer than 5
/// nonzero paired differences exist.
#[derive(Debug, Clone)]
pub struct PairStat {
    pub a: Method,
    pub b: Method,
    pub mean_diff: f64,
    pub wilcoxon_p: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodRun>,
    pub pairs: Vec<PairStat>,
}

#[derive(Serialize)]
struct MethodDoc<'a> {
    method: &'static str,
    mean_final_acc: f64,
    per_seed_mean_acc: &'a [f64],
}

#[derive(Serialize)]
struct PairDoc {
    a: &'static str,
    b: &'static str,
    mean_diff: f64,
    wilcoxon_p: Option<f64>,
    pairs: usize,
}

#[derive(Serialize)]
struct ComparisonDoc<'a> {
    config: &'a FederationConfig,
    seeds: &'a [u64],
    methods: Vec<MethodDoc<'a>>,
    pairs: Vec<PairDoc>,
}

/// Writes comparison.json and the paired per-client accuracy table; returns
/// both paths.
pub fn write_comparison(
    dir: &Path,
    config: &FederationConfig,
    comparison: &Comparison,
) -> Result<(PathBuf, PathBuf)> {
    let doc = ComparisonDoc {
        config,
        seeds: &comparison.seeds,
        methods: comparison
            .methods
            .iter()
            .map(|m| MethodDoc {
                method: m.method.as_str(),
                mean_final_acc: m.mean_final_acc,
                per_seed_mean_acc: &m.per_seed_mean_acc,
            })
            .collect(),
        pairs: comparison
            .pairs
            .iter()
            .map(|p| PairDoc {
                a: p.a.as_str(),
                b: p.b.as_str(),
                mean_diff: p.mean_diff,
                wilcoxon_p: p.wilcoxon_p,
                pairs: p.pairs,
            })
            .collect(),
    };
    let json_path = dir.join("comparison.json");
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("comparison serialization: {e}")))?;
    text.push('\n');
    std::fs::write(&json_path, text)?;

    // Rows are the pairing keys every arm evaluated.
    let keys: Vec<(u64, usize)> = comparison
        .methods
        .iter()
        .map(|m| {
            m.accuracies
                .keys()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
        })
        .reduce(|a, b| a.intersection(&b).copied().collect())
        .unwrap_or_default()
        .into_iter()
        .collect();
    let mut csv = String::from("seed,client_id");
    for m in &comparison.methods {
        write!(csv, ",acc_{}", m.method.as_str()).expect("string write");
    }
    csv.push('\n');
    for key in keys {
        write!(csv, "{},{}", key.0, key.1).expect("string write");
        for m in &comparison.methods {
            write!(csv, ",{}", m.accuracies[&key]).expect("string write");
        }
        csv.push('\n');
    }
    let csv_path = dir.join("paired_accuracies.csv");
    std::fs::write(&csv_path, csv)?;
    Ok((json_path, csv_path))
}
