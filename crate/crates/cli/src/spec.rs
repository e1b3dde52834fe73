//! Experiment spec files: TOML (or JSON) with every field optional except
//! the seed, resolved against documented defaults and echoed into outputs.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use stylefed_core::federation::{DataConfig, FederationConfig, Method};
use stylefed_core::{Error, Result};

/// Fully resolved experiment: the federation config plus output plumbing.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: FederationConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dump_embeddings: bool,
    pub dump_attention: bool,
}

/// Command-line overrides applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub dump_embeddings: bool,
    pub dump_attention: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    class_count: Option<usize>,
    input_dim: Option<usize>,
    samples_per_class: Option<usize>,
    separation: Option<f64>,
    alpha: Option<f64>,
    proportion_noise_var: Option<f64>,
    style_offset_std: Option<f64>,
    style_scale_jitter: Option<f64>,
    style_noise_std: Option<f64>,
    test_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    clients: Option<usize>,
    participation: Option<f64>,
    rounds: Option<usize>,
    local_epochs: Option<usize>,
    lambda_shared: Option<f64>,
    lambda_pull: Option<f64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    eval_interval: Option<usize>,
    method: Option<Method>,
    feature_dim: Option<usize>,
    hidden: Option<Vec<usize>>,
    heads: Option<usize>,
    aggregator_steps: Option<usize>,
    aggregator_lr: Option<f64>,
    shared_encoder_init: Option<bool>,
    threads: Option<usize>,
    out_dir: Option<PathBuf>,
    dump_embeddings: Option<bool>,
    dump_attention: Option<bool>,
    data: Option<RawData>,
}

/// Parses and resolves a spec file. JSON is used for `.json` paths, TOML for
/// everything else. The seed has no default: a spec without one (and without
/// a `--seed` override) is rejected naming the field.
pub fn load_spec(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let raw: RawSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("spec parse error ({}): {e}", path.display())))?
    } else {
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("spec parse error ({}): {e}", path.display())))?
    };
    resolve(raw, overrides)
}

fn resolve(raw: RawSpec, overrides: &Overrides) -> Result<ExperimentSpec> {
    let seed = overrides.seed.or(raw.seed);
    let seeds = match (&raw.seeds, seed) {
        (Some(list), _) if !list.is_empty() => list.clone(),
        (_, Some(s)) => vec![s],
        _ => {
            return Err(Error::Config(
                "spec field `seed` is required (set `seed`, `seeds`, or pass --seed)".into(),
            ))
        }
    };
    let defaults = FederationConfig::default();
    let data_defaults = DataConfig::default();
    let rd = raw.data.unwrap_or_default();
    let config = FederationConfig {
        clients: raw.clients.unwrap_or(defaults.clients),
        participation: raw.participation.unwrap_or(defaults.participation),
        rounds: raw.rounds.unwrap_or(defaults.rounds),
        local_epochs: raw.local_epochs.unwrap_or(defaults.local_epochs),
        lambda_shared: raw.lambda_shared.unwrap_or(defaults.lambda_shared),
        lambda_pull: raw.lambda_pull.unwrap_or(defaults.lambda_pull),
        learning_rate: raw.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: raw.batch_size,
        eval_interval: raw.eval_interval.unwrap_or(defaults.eval_interval),
        seed: seed.unwrap_or(seeds[0]),
        method: raw.method.unwrap_or(defaults.method),
        feature_dim: raw.feature_dim.unwrap_or(defaults.feature_dim),
        hidden: raw.hidden.unwrap_or(defaults.hidden),
        heads: raw.heads.unwrap_or(defaults.heads),
        aggregator_steps: raw.aggregator_steps.unwrap_or(defaults.aggregator_steps),
        aggregator_lr: raw.aggregator_lr.unwrap_or(defaults.aggregator_lr),
        shared_encoder_init: raw
            .shared_encoder_init
            .unwrap_or(defaults.shared_encoder_init),
        threads: overrides
            .threads
            .or(raw.threads)
            .unwrap_or(defaults.threads),
        data: DataConfig {
            class_count: rd.class_count.unwrap_or(data_defaults.class_count),
            input_dim: rd.input_dim.unwrap_or(data_defaults.input_dim),
            samples_per_class: rd
                .samples_per_class
                .unwrap_or(data_defaults.samples_per_class),
            separation: rd.separation.unwrap_or(data_defaults.separation),
            alpha: rd.alpha.unwrap_or(data_defaults.alpha),
            proportion_noise_var: rd
                .proportion_noise_var
                .unwrap_or(data_defaults.proportion_noise_var),
            style_offset_std: rd
                .style_offset_std
                .unwrap_or(data_defaults.style_offset_std),
            style_scale_jitter: rd
                .style_scale_jitter
                .unwrap_or(data_defaults.style_scale_jitter),
            style_noise_std: rd.style_noise_std.unwrap_or(data_defaults.style_noise_std),
            test_fraction: rd.test_fraction.unwrap_or(data_defaults.test_fraction),
        },
    };
    config.validate()?;
    Ok(ExperimentSpec {
        config,
        seeds,
        out_dir: overrides
            .out_dir
            .clone()
            .or(raw.out_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
        dump_embeddings: overrides.dump_embeddings || raw.dump_embeddings.unwrap_or(false),
        dump_attention: overrides.dump_attention || raw.dump_attention.unwrap_or(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str, ext: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(format!("spec.{ext}")), content).unwrap();
        dir
    }

    #[test]
    fn toml_spec_resolves_with_defaults() {
        let dir = write_temp("seed = 7\nrounds = 3\n[data]\nclass_count = 4\n", "toml");
        let spec = load_spec(&dir.path().join("spec.toml"), &Overrides::default()).unwrap();
        assert_eq!(spec.config.seed, 7);
        assert_eq!(spec.config.rounds, 3);
        assert_eq!(spec.config.data.class_count, 4);
        assert_eq!(spec.config.clients, FederationConfig::default().clients);
        assert_eq!(spec.seeds, vec![7]);
    }

    #[test]
    fn json_spec_parses_by_extension() {
        let dir = write_temp(r#"{"seed": 9, "method": "uniform_average"}"#, "json");
        let spec = load_spec(&dir.path().join("spec.json"), &Overrides::default()).unwrap();
        assert_eq!(spec.config.seed, 9);
        assert_eq!(spec.config.method, Method::UniformAverage);
    }

    #[test]
    fn missing_seed_is_rejected_naming_the_field() {
        let dir = write_temp("rounds = 2\n", "toml");
        let err = load_spec(&dir.path().join("spec.toml"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("seed"), "message: {err}");
    }

    #[test]
    fn seed_override_fills_missing_spec_seed() {
        let dir = write_temp("rounds = 2\n", "toml");
        let overrides = Overrides {
            seed: Some(42),
            ..Overrides::default()
        };
        let spec = load_spec(&dir.path().join("spec.toml"), &overrides).unwrap();
        assert_eq!(spec.config.seed, 42);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = write_temp("seed = 1\nlerning_rate = 0.1\n", "toml");
        assert!(load_spec(&dir.path().join("spec.toml"), &Overrides::default()).is_err());
    }

    #[test]
    fn invalid_values_surface_as_config_errors() {
        let dir = write_temp("seed = 1\nparticipation = 1.5\n", "toml");
        let err = load_spec(&dir.path().join("spec.toml"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("participation"));
    }
}
