//! Library surface of the experiment runner: spec loading, experiment and
//! comparison drivers, and artifact emission. The binary is a thin argument
//! parser over these functions, so tests can drive the same paths.

pub mod report;
pub mod spec;

use std::collections::BTreeMap;
use std::path::PathBuf;

pub use spec::{load_spec, ExperimentSpec, Overrides};

use stylefed_core::federation::{Federation, Method, RoundRecord};
use stylefed_core::metrics::wilcoxon_signed_rank;
use stylefed_core::{Error, Result};

/// Paths and records produced by one experiment run.
pub struct RunArtifacts {
    pub records: Vec<RoundRecord>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs the spec's configured method once (spec seed) and writes
/// metrics.csv, summary.json, and any requested dumps into the out dir.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunArtifacts> {
    let mut fed = Federation::new(spec.config.clone())?;
    let records = fed.run()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let metrics_path = spec.out_dir.join("metrics.csv");
    report::write_metrics_csv(&metrics_path, &records)?;
    let summary_path = spec.out_dir.join("summary.json");
    report::write_summary_json(&summary_path, &fed.config().clone(), &records)?;
    if spec.dump_embeddings {
        report::write_embeddings_csv(&spec.out_dir.join("embeddings.csv"), &fed)?;
    }
    if spec.dump_attention {
        report::write_attention_csv(&spec.out_dir.join("attention.csv"), &fed)?;
    }
    Ok(RunArtifacts {
        records,
        metrics_path,
        summary_path,
    })
}

/// Runs every method arm over the spec's seeds (same data and partition per
/// seed) and pairs final per-client accuracies for significance testing.
pub fn compare(spec: &ExperimentSpec, methods: &[Method]) -> Result<report::Comparison> {
    if methods.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 methods, got {}",
            methods.len()
        )));
    }
    let mut runs: Vec<report::MethodRun> = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut per_seed_mean_acc = Vec::with_capacity(spec.seeds.len());
        let mut accuracies = BTreeMap::new();
        for &seed in &spec.seeds {
            let mut config = spec.config.clone();
            config.method = method;
            config.seed = seed;
            let mut fed = Federation::new(config)?;
            let records = fed.run()?;
            let last = records.last().ok_or(Error::Domain {
                op: "compare",
                message: "run produced no evaluation records".into(),
            })?;
            per_seed_mean_acc.push(last.mean_acc);
            for c in &last.clients {
                accuracies.insert((seed, c.client_id), c.accuracy);
            }
        }
        let mean_final_acc = per_seed_mean_acc.iter().sum::<f64>() / per_seed_mean_acc.len() as f64;
        runs.push(report::MethodRun {
            method,
            per_seed_mean_acc,
            mean_final_acc,
            accuracies,
        });
    }

    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (key, &ax) in &a.accuracies {
                if let Some(&bx) = b.accuracies.get(key) {
                    xs.push(ax);
                    ys.push(bx);
                }
            }
            let wilcoxon_p = match wilcoxon_signed_rank(&xs, &ys) {
                Ok(p) => Some(p),
                Err(Error::Domain { .. }) => None,
                Err(e) => return Err(e),
            };
            let mean_diff =
                xs.iter().sum::<f64>() / xs.len() as f64 - ys.iter().sum::<f64>() / ys.len() as f64;
            pairs.push(report::PairStat {
                a: a.method,
                b: b.method,
                mean_diff,
                wilcoxon_p,
                pairs: xs.len(),
            });
        }
    }
    Ok(report::Comparison {
        seeds: spec.seeds.clone(),
        methods: runs,
        pairs,
    })
}

/// Runs a comparison and writes comparison.json plus the paired accuracy
/// table into the out dir.
pub fn compare_experiment(spec: &ExperimentSpec, methods: &[Method]) -> Result<report::Comparison> {
    let comparison = compare(spec, methods)?;
    std::fs::create_dir_all(&spec.out_dir)?;
    report::write_comparison(&spec.out_dir, &spec.config, &comparison)?;
    Ok(comparison)
}

/// Exit-code policy: 2 for spec problems, 3 for failures inside a federation
/// round (the message carries the round index), 1 for anything else.
pub fn exit_code(err: &Error) -> i32 {
    if err.round_index().is_some() {
        3
    } else if matches!(err, Error::Config(_)) {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stylefed_core::federation::{DataConfig, FederationConfig};

    fn tiny_spec(dir: &std::path::Path, seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            config: FederationConfig {
                clients: 3,
                participation: 1.0,
                rounds: 2,
                local_epochs: 1,
                eval_interval: 1,
                seed: seeds[0],
                feature_dim: 4,
                hidden: vec![6],
                heads: 2,
                aggregator_steps: 1,
                threads: 1,
                data: DataConfig {
                    class_count: 2,
                    input_dim: 4,
                    samples_per_class: 12,
                    separation: 5.0,
                    alpha: 1.0,
                    proportion_noise_var: 0.0,
                    style_offset_std: 0.3,
                    style_scale_jitter: 0.1,
                    style_noise_std: 0.02,
                    test_fraction: 0.25,
                },
                ..FederationConfig::default()
            },
            seeds,
            out_dir: dir.to_path_buf(),
            dump_embeddings: false,
            dump_attention: false,
        }
    }

    #[test]
    fn run_writes_metrics_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path(), vec![3]);
        spec.dump_embeddings = true;
        spec.dump_attention = true;
        let artifacts = run_experiment(&spec).unwrap();
        let csv = std::fs::read_to_string(&artifacts.metrics_path).unwrap();
        assert!(csv.starts_with(report::METRICS_COLUMNS));
        assert_eq!(csv.lines().count(), 1 + artifacts.records.len());
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&artifacts.summary_path).unwrap())
                .unwrap();
        assert_eq!(summary["config"]["seed"], 3);
        assert!(summary["best_acc"].as_f64().unwrap() >= 0.0);
        assert!(summary["convergence_round"].as_u64().is_some());

        let emb = std::fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
        let header = emb.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + spec.config.feature_dim);
        // Every value round-trips through the decimal form.
        for line in emb.lines().skip(1) {
            for field in line.split(',').skip(2) {
                let v: f64 = field.parse().unwrap();
                assert!(v.is_finite());
            }
        }
        let att = std::fs::read_to_string(dir.path().join("attention.csv")).unwrap();
        assert!(att.starts_with("class,client_id,weight"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_experiment(&tiny_spec(dir_a.path(), vec![9])).unwrap();
        let b = run_experiment(&tiny_spec(dir_b.path(), vec![9])).unwrap();
        assert_eq!(
            std::fs::read(&a.metrics_path).unwrap(),
            std::fs::read(&b.metrics_path).unwrap()
        );
    }

    #[test]
    fn compare_same_method_gives_p_one() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path(), vec![5, 6]);
        let comparison = compare_experiment(&spec, &[Method::Full, Method::Full]).unwrap();
        assert_eq!(comparison.pairs.len(), 1);
        // Identical arms: all paired differences are zero.
        assert_eq!(comparison.pairs[0].wilcoxon_p, Some(1.0));
        assert_eq!(comparison.pairs[0].mean_diff, 0.0);
        let doc: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("comparison.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(doc["pairs"][0]["wilcoxon_p"], 1.0);
        let csv = std::fs::read_to_string(dir.path().join("paired_accuracies.csv")).unwrap();
        assert!(csv.starts_with("seed,client_id,acc_full,acc_full"));
        assert!(csv.lines().count() > 1);
    }

    #[test]
    fn compare_requires_two_methods() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path(), vec![1]);
        assert!(matches!(
            compare(&spec, &[Method::Full]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("bad".into())), 2);
        assert_eq!(exit_code(&Error::EmptyRound.in_round(7)), 3);
        assert_eq!(exit_code(&Error::EmptyRound), 1);
    }
}
