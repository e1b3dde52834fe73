//! Round orchestration across clients and server: seeded participant
//! sampling, parallel local updates, aggregation (attention-based or uniform
//! averaging), aggregator training, and population evaluation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientHyper, ClientState, ClientUpload, LocalStats};
use crate::data::{
    apply_style_shift, dirichlet_partition, generate_gaussian_mixture, split_train_test,
    StyleShiftSpec,
};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_rng, stream};
use crate::server::{AggregatorState, GlobalPrototypes, PrototypeTensor};

/// Comparison arms. The ablation keeps attention aggregation but strips the
/// personalization branch; uniform averaging strips both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    AblationAttentionOnly,
    UniformAverage,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::AblationAttentionOnly => "ablation_attention_only",
            Method::UniformAverage => "uniform_average",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "ablation_attention_only" => Ok(Method::AblationAttentionOnly),
            "uniform_average" => Ok(Method::UniformAverage),
            other => Err(Error::Config(format!(
                "method must be one of full, ablation_attention_only, uniform_average; got {other}"
            ))),
        }
    }
}

/// Synthetic data scenario: a Gaussian mixture partitioned by Dirichlet
/// label skew, with a per-client affine style shift.
#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub class_count: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub alpha: f64,
    pub proportion_noise_var: f64,
    pub style_offset_std: f64,
    pub style_scale_jitter: f64,
    pub style_noise_std: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            class_count: 8,
            input_dim: 16,
            samples_per_class: 60,
            separation: 6.0,
            alpha: 0.1,
            proportion_noise_var: 0.05,
            style_offset_std: 2.0,
            style_scale_jitter: 0.5,
            style_noise_std: 0.1,
            test_fraction: 0.2,
        }
    }
}

/// Full experiment configuration. Defaults are the desk-scale scenario:
/// 20 clients at 30% participation for 40 rounds, 5 local epochs.
#[derive(Debug, Clone, Serialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lambda_shared: f64,
    pub lambda_pull: f64,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
    pub eval_interval: usize,
    pub seed: u64,
    pub method: Method,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub aggregator_steps: usize,
    pub aggregator_lr: f64,
    pub shared_encoder_init: bool,
    pub threads: usize,
    pub data: DataConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 20,
            participation: 0.3,
            rounds: 40,
            local_epochs: 5,
            lambda_shared: 1.0,
            lambda_pull: 0.7,
            learning_rate: 0.005,
            batch_size: None,
            eval_interval: 5,
            seed: 0,
            method: Method::Full,
            feature_dim: 32,
            hidden: vec![64, 64],
            heads: 4,
            aggregator_steps: 10,
            aggregator_lr: 1e-3,
            shared_encoder_init: true,
            threads: 1,
            data: DataConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if !(self.lambda_shared >= 0.0) || !(self.lambda_pull >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_shared and lambda_pull must be >= 0, got {} and {}",
                self.lambda_shared, self.lambda_pull
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1 when set".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.heads == 0 || self.feature_dim == 0 || !self.feature_dim.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "feature_dim {} must be a positive multiple of heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.aggregator_steps == 0 && self.method != Method::UniformAverage {
            return Err(Error::Config("aggregator_steps must be >= 1".into()));
        }
        if !(self.aggregator_lr >= 0.0) || !self.aggregator_lr.is_finite() {
            return Err(Error::Config(format!(
                "aggregator_lr must be finite and >= 0, got {}",
                self.aggregator_lr
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.data.class_count == 0
            || self.data.input_dim == 0
            || self.data.samples_per_class == 0
        {
            return Err(Error::Config(
                "data.class_count, data.input_dim, data.samples_per_class must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "data.test_fraction must lie in [0, 1), got {}",
                self.data.test_fraction
            )));
        }
        Ok(())
    }

    /// Participants per round. The product is compared against integers with
    /// a 1e-9 slack so 0.3 * 20 counts as 6, not ceil(6.0000000000000009).
    pub fn sample_count(&self) -> usize {
        let raw = (self.participation * self.clients as f64 - 1e-9).ceil() as usize;
        raw.clamp(1, self.clients)
    }

    fn client_hyper(&self) -> ClientHyper {
        let personalization = self.method == Method::Full;
        ClientHyper {
            lambda_pull: if personalization {
                self.lambda_pull
            } else {
                0.0
            },
            lambda_shared: self.lambda_shared,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            personalization,
            force_alpha_one: false,
            eps: 1e-8,
        }
    }
}

/// One client's held-out metrics at an evaluation round.
#[derive(Debug, Clone, Serialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub brier: f64,
    pub samples: usize,
}

/// Population snapshot emitted at every evaluation round. Loss components
/// are the participating clients' per-round training means; std is the
/// population form over evaluated clients. `wall_ms` never reaches the
/// metrics CSV, which must be byte-identical across reruns.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub brier: f64,
    pub loss_ce: f64,
    pub loss_pull: f64,
    pub loss_shared: f64,
    pub loss_server: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: u64,
    pub clients: Vec<ClientEval>,
}

/// The whole simulation: client states, the global prototype table, and the
/// aggregator (absent for the uniform-averaging baseline).
pub struct Federation {
    config: FederationConfig,
    clients: Vec<ClientState>,
    globals: GlobalPrototypes,
    aggregator: Option<AggregatorState>,
}

impl Federation {
    /// Builds the synthetic scenario and all client states. Every stage
    /// draws from its own seed stream, so changing one stage's parameters
    /// leaves the others' draws untouched.
    pub fn new(config: FederationConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let data = &config.data;
        let base = generate_gaussian_mixture(
            data.class_count,
            data.input_dim,
            data.samples_per_class,
            data.separation,
            seed,
        )?;
        let plan = dirichlet_partition(
            &base,
            config.clients,
            data.alpha,
            data.proportion_noise_var,
            seed,
        )?;
        let specs = StyleShiftSpec::generate(
            config.clients,
            data.input_dim,
            data.style_scale_jitter,
            data.style_offset_std,
            data.style_noise_std,
            seed,
        )?;
        let shards = apply_style_shift(&base, &plan, &specs, seed)?;

        let shared_encoder = if config.shared_encoder_init {
            let mut rng = derive_rng(seed, &[stream::CLIENT_INIT]);
            Some(EncoderParams::init(
                data.input_dim,
                &config.hidden,
                config.feature_dim,
                false,
                &mut rng,
            )?)
        } else {
            None
        };
        let hyper = config.client_hyper();
        let mut clients = Vec::with_capacity(config.clients);
        for (k, shard) in shards.into_iter().enumerate() {
            let mut split_rng = derive_rng(seed, &[stream::SPLIT, k as u64]);
            let (train, test) = split_train_test(&shard, data.test_fraction, &mut split_rng)?;
            let encoder = match &shared_encoder {
                Some(e) => e.clone(),
                None => {
                    let mut rng = derive_rng(seed, &[stream::CLIENT_INIT, k as u64, 1]);
                    EncoderParams::init(
                        data.input_dim,
                        &config.hidden,
                        config.feature_dim,
                        false,
                        &mut rng,
                    )?
                }
            };
            clients.push(ClientState::new(
                k,
                seed,
                encoder,
                train,
                test,
                hyper.clone(),
            )?);
        }

        let globals = GlobalPrototypes::new(data.class_count, config.feature_dim);
        let aggregator = match config.method {
            Method::UniformAverage => None,
            _ => Some(AggregatorState::new(
                config.clients,
                data.class_count,
                config.feature_dim,
                config.heads,
                seed,
            )?),
        };
        Ok(Federation {
            config,
            clients,
            globals,
            aggregator,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn globals(&self) -> &GlobalPrototypes {
        &self.globals
    }

    /// `None` for the uniform-averaging baseline.
    pub fn aggregator(&self) -> Option<&AggregatorState> {
        self.aggregator.as_ref()
    }

    /// Runs all rounds and returns one record per evaluation round. Errors
    /// inside round t are wrapped with that round index.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut records = Vec::new();
        for t in 1..=self.config.rounds {
            match self.run_round(t, &pool) {
                Ok(Some(record)) => records.push(record),
                Ok(None) => {}
                Err(e) => return Err(e.in_round(t)),
            }
        }
        Ok(records)
    }

    /// One synchronous round; returns a record only on evaluation rounds
    /// (every `eval_interval`, plus the final round).
    fn run_round(&mut self, round: usize, pool: &rayon::ThreadPool) -> Result<Option<RoundRecord>> {
        let start = Instant::now();
        let cfg = &self.config;
        let class_count = cfg.data.class_count;
        let d = cfg.feature_dim;

        let mut sampled = rand::seq::index::sample(
            &mut derive_rng(cfg.seed, &[stream::SAMPLE, round as u64]),
            cfg.clients,
            cfg.sample_count(),
        )
        .into_vec();
        sampled.sort_unstable();

        let globals_values = self.globals.values().clone();
        let initialized = self.globals.initialized().to_vec();
        let epochs = cfg.local_epochs;
        // Clients with no training data sit the round out.
        let mut participants: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| sampled.binary_search(&c.id).is_ok() && !c.train_shard().is_empty())
            .collect();
        if participants.is_empty() {
            return Err(Error::EmptyRound);
        }
        let results: Result<Vec<(ClientUpload, LocalStats)>> = pool.install(|| {
            participants
                .par_iter_mut()
                .map(|c| c.local_update(&globals_values, &initialized, epochs, round as u64))
                .collect()
        });
        let results = results?;
        let uploads: Vec<ClientUpload> = results.iter().map(|(u, _)| u.clone()).collect();
        let stats: Vec<LocalStats> = results.iter().map(|(_, s)| *s).collect();

        let bytes_up: u64 = uploads.iter().map(|u| u.wire_bytes() as u64).sum();
        // Downlink per participant: the full prototype table plus the
        // initialized-bit mask, mirroring the uplink bookkeeping.
        let bytes_down =
            uploads.len() as u64 * (8 * d * class_count + class_count.div_ceil(8)) as u64;

        let cp = PrototypeTensor::assemble(&uploads, class_count)?;
        let loss_server = match &mut self.aggregator {
            Some(agg) => {
                let (per_class, _, _) = agg.aggregate(&cp)?;
                self.globals.apply(&per_class)?;
                let outcome = agg.train(&cp, cfg.aggregator_steps, cfg.aggregator_lr)?;
                outcome.final_loss
            }
            None => {
                self.globals.apply(&uniform_average(&cp))?;
                0.0
            }
        };

        if !round.is_multiple_of(cfg.eval_interval) && round != cfg.rounds {
            return Ok(None);
        }

        let globals_values = self.globals.values().clone();
        let initialized = self.globals.initialized().to_vec();
        let evals: Result<Vec<ClientEval>> = pool.install(|| {
            self.clients
                .par_iter()
                .filter(|c| !c.test_shard().is_empty())
                .map(|c| {
                    let (res, _) = c.evaluate(c.test_shard(), &globals_values, &initialized)?;
                    Ok(ClientEval {
                        client_id: c.id,
                        accuracy: res.accuracy,
                        macro_f1: res.macro_f1,
                        brier: res.brier,
                        samples: res.samples,
                    })
                })
                .collect()
        });
        let evals = evals?;
        if evals.is_empty() {
            return Err(Error::Domain {
                op: "evaluate_round",
                message: "no client has a nonempty test shard".into(),
            });
        }
        let (mean_acc, std_acc) = mean_std(evals.iter().map(|e| e.accuracy));
        let (mean_f1, std_f1) = mean_std(evals.iter().map(|e| e.macro_f1));
        let (brier, _) = mean_std(evals.iter().map(|e| e.brier));
        let n = stats.len() as f64;
        Ok(Some(RoundRecord {
            round,
            mean_acc,
            std_acc,
            mean_f1,
            std_f1,
            brier,
            loss_ce: stats.iter().map(|s| s.loss_ce).sum::<f64>() / n,
            loss_pull: stats.iter().map(|s| s.loss_pull).sum::<f64>() / n,
            loss_shared: stats.iter().map(|s| s.loss_shared).sum::<f64>() / n,
            loss_server,
            bytes_up,
            bytes_down,
            wall_ms: start.elapsed().as_millis() as u64,
            clients: evals,
        }))
    }
}

/// Population mean and std (divisor N) over an iterator of finite values.
fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let xs: Vec<f64> = values.collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Uniform prototype averaging baseline: each class's global prototype is
/// the arithmetic mean of the uploaded means; absent classes stay stale.
pub fn uniform_average(cp: &PrototypeTensor) -> Vec<Option<Tensor>> {
    (0..cp.class_count())
        .map(|c| {
            let rows = cp.present_rows(c);
            if rows.is_empty() {
                return None;
            }
            let mut sum = vec![0.0; cp.dim()];
            for &k in &rows {
                for (s, v) in sum.iter_mut().zip(cp.values().row(cp.token(k, c))) {
                    *s += v;
                }
            }
            let m = rows.len() as f64;
            Some(Tensor::vector(sum.into_iter().map(|s| s / m).collect()))
        })
        .collect()
}

/// Earliest evaluated round whose mean accuracy reaches `threshold` times
/// the maximum over all evaluated rounds. `None` when no records exist.
pub fn convergence_round(records: &[RoundRecord], threshold: f64) -> Option<usize> {
    let max = records
        .iter()
        .map(|r| r.mean_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    records
        .iter()
        .find(|r| r.mean_acc >= threshold * max)
        .map(|r| r.round)
}
