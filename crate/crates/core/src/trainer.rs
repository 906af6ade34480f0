//! Trainer channel: loads harmonized client data, runs the federated engine
//! and persists config, round logs and checkpoints. Model parameters stay on
//! this channel and never reach the message bus.

use crate::fedcore::checkpoint::encode_checkpoint;
use crate::fedcore::{run_federated_training, ModelSpec, Registry, Sample, Shard, TrainingConfig, TrainingEvent};
use crate::image::{GrayImage, CANONICAL_SIDE};
use crate::protocol::TaskSpec;
use crate::trace::{TraceEvent, TraceSink};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fs;
use std::path::Path;

/// Side of the downscaled model input.
pub const INPUT_SIDE: u32 = 16;

/// Flattened model input: canonical resolution, 2×2 block average, centred
/// and scaled by the task profile.
pub fn features(img: &GrayImage, task: &TaskSpec) -> Vec<f64> {
    let p = task.canonical_profile;
    let small = img
        .resize(CANONICAL_SIDE, CANONICAL_SIDE)
        .resize(INPUT_SIDE, INPUT_SIDE);
    small
        .pixels
        .iter()
        .map(|&v| (v as f64 - p.mean) / p.std.max(1e-6))
        .collect()
}

fn load_class_dir(dir: &Path, label: usize, task: &TaskSpec, out: &mut Vec<Sample>) -> std::io::Result<()> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.path())
        .collect();
    names.sort();
    for p in names {
        if let Ok((img, _)) = GrayImage::decode(&fs::read(&p)?) {
            out.push(Sample {
                x: features(&img, task),
                y: label,
            });
        }
    }
    Ok(())
}

/// Samples of one client: every `<dataset>/<class>/` folder whose name is a
/// target-schema class, in sorted order.
pub fn load_client_samples(root: &Path, client: &str, task: &TaskSpec) -> std::io::Result<Vec<Sample>> {
    let base = root.join("clients").join(client);
    let mut datasets: Vec<_> = fs::read_dir(&base)?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .map(|e| e.path())
        .collect();
    datasets.sort();
    let mut out = Vec::new();
    for ds in datasets {
        for (label, class) in task.target_schema.iter().enumerate() {
            let dir = ds.join(class);
            if dir.is_dir() {
                load_class_dir(&dir, label, task, &mut out)?;
            }
        }
    }
    Ok(out)
}

/// Held-out split written by the generator under `<root>/<dir>/<class>/`.
pub fn load_heldout(root: &Path, dir: &str, task: &TaskSpec) -> std::io::Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (label, class) in task.target_schema.iter().enumerate() {
        load_class_dir(&root.join(dir).join(class), label, task, &mut out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaunchReceipt {
    pub config_valid: bool,
    pub initialized: bool,
    pub start_signal_logged: bool,
    pub run_id: Option<String>,
    pub errors: Vec<String>,
    pub rounds_completed: usize,
}

impl LaunchReceipt {
    pub fn all_ok(&self) -> bool {
        self.config_valid && self.initialized && self.start_signal_logged
    }
}

const REQUIRED_FIELDS: [&str; 11] = [
    "algorithm",
    "rounds",
    "local_epochs",
    "batch_size",
    "learning_rate",
    "sample_fraction",
    "mu",
    "lambda",
    "hidden_width",
    "seed",
    "clients",
];

/// Builds a training config from launch arguments; every field is required.
pub fn parse_launch_args(args: &Map<String, Value>, task: &TaskSpec) -> Result<(TrainingConfig, Vec<String>), Vec<String>> {
    let missing: Vec<String> = REQUIRED_FIELDS
        .iter()
        .filter(|f| args.get(**f).is_none_or(Value::is_null))
        .map(|f| format!("missing field {f}"))
        .collect();
    if !missing.is_empty() {
        return Err(missing);
    }
    let mut errors = Vec::new();
    let int = |k: &str, errors: &mut Vec<String>| -> u64 {
        args[k].as_u64().unwrap_or_else(|| {
            errors.push(format!("{k} must be a non-negative integer"));
            0
        })
    };
    let num = |k: &str, errors: &mut Vec<String>| -> f64 {
        args[k].as_f64().unwrap_or_else(|| {
            errors.push(format!("{k} must be a number"));
            0.0
        })
    };
    let algorithm = args["algorithm"].as_str().unwrap_or_default().to_string();
    let rounds = int("rounds", &mut errors) as usize;
    let local_epochs = int("local_epochs", &mut errors) as usize;
    let batch_size = int("batch_size", &mut errors) as usize;
    let hidden = int("hidden_width", &mut errors) as usize;
    let seed = int("seed", &mut errors);
    let learning_rate = num("learning_rate", &mut errors);
    let sample_fraction = num("sample_fraction", &mut errors);
    let mu = num("mu", &mut errors);
    let lambda = num("lambda", &mut errors);
    let clients: Vec<String> = args["clients"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default();
    if clients.is_empty() {
        errors.push("clients must list at least one client".into());
    }
    if hidden > 512 || rounds > 1000 || local_epochs > 100 {
        errors.push("rounds, local_epochs or hidden_width exceed limits".into());
    }
    let config = TrainingConfig {
        algorithm,
        rounds,
        local_epochs,
        batch_size,
        learning_rate,
        sample_fraction,
        mu,
        lambda,
        model: ModelSpec {
            inputs: (INPUT_SIDE * INPUT_SIDE) as usize,
            classes: task.target_schema.len(),
            hidden,
        },
        seed,
    };
    if errors.is_empty() {
        Ok((config, clients))
    } else {
        Err(errors)
    }
}

/// Validates, starts and runs training; writes artifacts to
/// `<root>/server/training/<run_id>/`.
pub fn launch(
    root: &Path,
    args: &Map<String, Value>,
    task: &TaskSpec,
    registry: &Registry,
    trace: &TraceSink,
    run_id: &str,
) -> LaunchReceipt {
    let mut receipt = LaunchReceipt::default();
    let (config, clients) = match parse_launch_args(args, task) {
        Ok(v) => v,
        Err(e) => {
            receipt.errors = e;
            return receipt;
        }
    };
    if let Err(e) = config.validate(registry) {
        receipt.errors.push(e.to_string());
        return receipt;
    }
    let mut shards = Vec::new();
    for c in &clients {
        let valid_id = !c.is_empty() && c.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
        if !valid_id || !root.join("clients").join(c).is_dir() {
            receipt.errors.push(format!("unknown client {c}"));
            return receipt;
        }
    }
    receipt.config_valid = true;
    receipt.run_id = Some(run_id.to_string());
    for c in &clients {
        match load_client_samples(root, c, task) {
            Ok(samples) => shards.push(Shard {
                client: c.clone(),
                samples,
            }),
            Err(e) => receipt.errors.push(format!("{c}: {e}")),
        }
    }
    let out_dir = root.join("server").join("training").join(run_id);
    if let Err(e) = fs::create_dir_all(&out_dir) {
        receipt.errors.push(e.to_string());
        return receipt;
    }
    let _ = fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({"config": config, "clients": clients})).unwrap() + "\n",
    );
    let mut rounds = Vec::new();
    let mut started = false;
    let result = run_federated_training(&config, registry, &shards, None, |ev| match ev {
        TrainingEvent::Started { clients } => {
            started = true;
            trace.record(TraceEvent::TrainingStart {
                run_id: run_id.to_string(),
                algorithm: config.algorithm.clone(),
                clients: clients.to_vec(),
            });
        }
        TrainingEvent::SkippedClient { .. } => {}
        TrainingEvent::Round(log) => {
            trace.record(TraceEvent::Round(log.clone()));
            rounds.push(log.clone());
        }
    });
    receipt.initialized = started;
    receipt.start_signal_logged = started;
    receipt.rounds_completed = rounds.len();
    let _ = crate::trace::write_ndjson(&out_dir.join("rounds.ndjson"), &rounds);
    match result {
        Ok(outcome) => {
            let _ = fs::write(out_dir.join("checkpoint.bin"), encode_checkpoint(&config.model, &outcome.global));
        }
        Err(e) => receipt.errors.push(e.to_string()),
    }
    receipt
}
