//! Round-based federated training over in-memory client shards.

use super::algorithms::{
    aggregate_fedavg, aggregate_fednova, local_sgd, local_update_ditto, local_update_fedprox,
    local_update_scaffold, sample_weights, LocalSettings,
};
use super::model::{evaluate, ModelSpec, Sample};
use super::registry::Registry;
use super::FedError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_LOCAL_EPOCHS: usize = 1;
pub const DEFAULT_MU: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_ROUNDS: usize = 20;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
    FedNova,
    Ditto,
}

impl Algorithm {
    pub fn from_id(id: &str) -> Option<Self> {
        match id.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fedavg" => Some(Self::FedAvg),
            "fedprox" => Some(Self::FedProx),
            "scaffold" => Some(Self::Scaffold),
            "fednova" => Some(Self::FedNova),
            "ditto" => Some(Self::Ditto),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub algorithm: String,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sample_fraction: f64,
    pub mu: f64,
    pub lambda: f64,
    pub model: ModelSpec,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn with_defaults(algorithm: &str, model: ModelSpec, seed: u64) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            rounds: DEFAULT_ROUNDS,
            local_epochs: DEFAULT_LOCAL_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            sample_fraction: 1.0,
            mu: DEFAULT_MU,
            lambda: DEFAULT_LAMBDA,
            model,
            seed,
        }
    }

    /// Checks field ranges and that the algorithm is registered and executable.
    pub fn validate(&self, registry: &Registry) -> Result<Algorithm, FedError> {
        let bad = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if self.local_epochs < 1 {
            return bad("local_epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0, 1]");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.model.inputs == 0 || self.model.classes < 2 {
            return bad("model needs inputs and at least two classes");
        }
        let entry = registry
            .get(&self.algorithm)
            .ok_or_else(|| FedError::UnknownAlgorithm(self.algorithm.clone()))?;
        if !entry.executable {
            return Err(FedError::NotExecutable(entry.id.clone()));
        }
        Algorithm::from_id(&entry.id).ok_or_else(|| FedError::NotExecutable(entry.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub client: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<String>,
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub local_loss: Vec<f64>,
    pub local_accuracy: Vec<f64>,
    pub global_loss: f64,
    pub global_accuracy: f64,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum TrainingEvent<'a> {
    Started { clients: &'a [String] },
    SkippedClient { client: &'a str, reason: &'a str },
    Round(&'a RoundLog),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub rounds: Vec<RoundLog>,
    pub global: Vec<f64>,
    /// SCAFFOLD server control variate.
    pub control_global: Option<Vec<f64>>,
    /// SCAFFOLD client control variates, aligned with `clients`.
    pub control_locals: Option<Vec<Vec<f64>>>,
    /// Ditto personalized models, aligned with `clients`.
    pub personalized: Option<Vec<Vec<f64>>>,
    pub clients: Vec<String>,
}

/// Derives an independent stream for `(seed, round, slot)`.
pub fn stream_rng(seed: u64, round: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) ^ slot);
    rng
}

const SAMPLING_SLOT: u64 = u32::MAX as u64;

pub fn run_federated_training(
    config: &TrainingConfig,
    registry: &Registry,
    shards: &[Shard],
    test: Option<&[Sample]>,
    mut observer: impl FnMut(TrainingEvent<'_>),
) -> Result<TrainingOutcome, FedError> {
    let algorithm = config.validate(registry)?;
    let spec = config.model;
    let mut active: Vec<&Shard> = Vec::new();
    for s in shards {
        if s.samples.is_empty() {
            observer(TrainingEvent::SkippedClient {
                client: &s.client,
                reason: "empty shard",
            });
        } else if s.samples.iter().any(|x| x.x.len() != spec.inputs || x.y >= spec.classes) {
            return Err(FedError::InvalidConfig(format!(
                "shard {} does not match the model spec",
                s.client
            )));
        } else {
            active.push(s);
        }
    }
    if active.is_empty() {
        return Err(FedError::NoData);
    }
    let clients: Vec<String> = active.iter().map(|s| s.client.clone()).collect();
    observer(TrainingEvent::Started { clients: &clients });

    let settings = LocalSettings {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
    };
    let dim = spec.param_count();
    let mut global = spec.init(config.seed);
    let n_clients = active.len();
    let mut control_global = vec![0.0; dim];
    let mut control_locals = vec![vec![0.0; dim]; n_clients];
    let mut personalized = vec![global.clone(); n_clients];
    let mut logs = Vec::with_capacity(config.rounds);
    let per_round = ((config.sample_fraction * n_clients as f64).round() as usize).clamp(1, n_clients);

    for round in 1..=config.rounds {
        let mut picked: Vec<usize> = (0..n_clients).collect();
        if per_round < n_clients {
            picked.shuffle(&mut stream_rng(config.seed, round, SAMPLING_SLOT));
            picked.truncate(per_round);
            picked.sort_unstable();
        }
        let counts: Vec<usize> = picked.iter().map(|&k| active[k].samples.len()).collect();
        let mut locals = Vec::with_capacity(picked.len());
        let mut steps = Vec::with_capacity(picked.len());
        let mut local_loss = Vec::with_capacity(picked.len());
        let mut local_accuracy = Vec::with_capacity(picked.len());
        let mut control_deltas = Vec::new();
        for &k in &picked {
            let shard = &active[k].samples;
            let mut rng = stream_rng(config.seed, round, k as u64);
            let run = match algorithm {
                Algorithm::FedAvg | Algorithm::FedNova => {
                    local_sgd(&spec, &global, shard, &settings, &mut rng, |_, _| {})?
                }
                Algorithm::FedProx => local_update_fedprox(&spec, &global, shard, config.mu, &settings, &mut rng)?,
                Algorithm::Scaffold => {
                    let u = local_update_scaffold(
                        &spec,
                        &global,
                        shard,
                        &control_global,
                        &control_locals[k],
                        &settings,
                        &mut rng,
                    )?;
                    let delta: Vec<f64> = u.control_new.iter().zip(&control_locals[k]).map(|(a, b)| a - b).collect();
                    control_deltas.push(delta);
                    control_locals[k] = u.control_new;
                    u.run
                }
                Algorithm::Ditto => {
                    let u = local_update_ditto(&spec, &global, &personalized[k], shard, config.lambda, &settings, &mut rng)?;
                    personalized[k] = u.personal_run.theta;
                    u.global_run
                }
            };
            let (_, acc) = evaluate(&spec, &run.theta, shard);
            local_loss.push(run.loss);
            local_accuracy.push(acc);
            steps.push(run.steps);
            locals.push(run.theta);
        }
        global = match algorithm {
            Algorithm::FedNova => aggregate_fednova(&global, &locals, &steps, &counts)?,
            _ => aggregate_fedavg(&locals, &counts)?,
        };
        if algorithm == Algorithm::Scaffold {
            // c ← c + (1/N) Σ_{k∈S} Δc_k keeps c equal to the mean of all c_k
            for delta in &control_deltas {
                for (c, d) in control_global.iter_mut().zip(delta) {
                    *c += d / n_clients as f64;
                }
            }
        }
        if global.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite(format!("global model diverged in round {round}")));
        }
        let pooled: Vec<Sample> = picked.iter().flat_map(|&k| active[k].samples.iter().cloned()).collect();
        let (global_loss, global_accuracy) = evaluate(&spec, &global, &pooled);
        let log = RoundLog {
            round,
            participants: picked.iter().map(|&k| clients[k].clone()).collect(),
            weights: sample_weights(&counts)?,
            counts,
            local_loss,
            local_accuracy,
            global_loss,
            global_accuracy,
            test_accuracy: test.filter(|t| !t.is_empty()).map(|t| evaluate(&spec, &global, t).1),
        };
        observer(TrainingEvent::Round(&log));
        logs.push(log);
    }

    Ok(TrainingOutcome {
        rounds: logs,
        global,
        control_global: (algorithm == Algorithm::Scaffold).then_some(control_global),
        control_locals: (algorithm == Algorithm::Scaffold).then_some(control_locals),
        personalized: (algorithm == Algorithm::Ditto).then_some(personalized),
        clients,
    })
}

/// Single-model SGD over `samples` using the round streams a one-client
/// federation would use; the reference for the single-client reduction.
pub fn centralized_sgd(config: &TrainingConfig, samples: &[Sample]) -> Result<Vec<Vec<f64>>, FedError> {
    let settings = LocalSettings {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
    };
    let mut theta = config.model.init(config.seed);
    let mut trajectory = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let mut rng = stream_rng(config.seed, round, 0);
        theta = local_sgd(&config.model, &theta, samples, &settings, &mut rng, |_, _| {})?.theta;
        trajectory.push(theta.clone());
    }
    Ok(trajectory)
}
