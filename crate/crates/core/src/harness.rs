//! Repeated episode runs on isolated workspace copies, persisted artifacts,
//! and scoring from those artifacts.

use crate::agent::remote::{EndpointSettings, EndpointSettingsOverride, HttpTransport, RemoteCore};
use crate::agent::runtime::{run_episode, CoreSet, EpisodeSettings, PhaseOutcome, FAIL_TRANSPORT};
use crate::agent::{AgentCore, CoreKind, NoisyCore, OracleCore};
use crate::envgen::{generate_environment, list_files, EnvironmentConfig, GroundTruthManifest, MANIFEST_SCHEMA_VERSION};
use crate::evaluator::{aggregate, score_run, MetricsReport, RunArtifacts, Snapshot, Thresholds};
use crate::fedcore::Registry;
use crate::protocol::{GuidanceMode, RoleKind, TaskSpec};
use crate::toolkit::sha256_hex;
use crate::trace::{read_ndjson, write_ndjson, TraceEvent, TRACE_SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_INDEX_FILE: &str = "runs.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("workspace: {0}")]
    Workspace(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One core assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    pub kind: CoreKind,
    #[serde(default)]
    pub name: Option<String>,
    /// Flip probability of a noisy core.
    #[serde(default)]
    pub p: Option<f64>,
    /// Flip seed of a noisy core; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub endpoint: EndpointSettingsOverride,
}

impl CoreSpec {
    pub fn oracle() -> Self {
        Self {
            kind: CoreKind::ScriptedOracle,
            name: None,
            p: None,
            seed: None,
            endpoint: EndpointSettingsOverride::default(),
        }
    }

    pub fn noisy(p: f64) -> Self {
        Self {
            kind: CoreKind::ScriptedNoisy,
            p: Some(p),
            ..Self::oracle()
        }
    }

    fn build(&self, run_seed: u64) -> Result<Arc<dyn AgentCore>, HarnessError> {
        Ok(match self.kind {
            CoreKind::ScriptedOracle => Arc::new(OracleCore::new()),
            CoreKind::ScriptedNoisy => {
                let p = self.p.ok_or_else(|| HarnessError::Config("scripted_noisy core needs p".into()))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(HarnessError::Config("p must lie in [0,1]".into()));
                }
                Arc::new(NoisyCore::new(p, self.seed.unwrap_or(run_seed)))
            }
            CoreKind::RemoteLlm => {
                let settings = EndpointSettings::from_env(&self.endpoint).map_err(|e| HarnessError::Config(e.to_string()))?;
                let name = self.name.clone().unwrap_or_else(|| settings.model.clone());
                Arc::new(RemoteCore::new(name, Box::new(HttpTransport::new(settings))))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Existing generated workspace.
    pub workspace: Option<PathBuf>,
    /// Generated into `<output>/environment` when no workspace is given.
    pub environment: Option<EnvironmentConfig>,
    pub guidance_mode: Option<GuidanceMode>,
    pub runs: usize,
    /// Seed of run i is `seeds[i]` when given, else `seed + i`.
    pub seed: u64,
    pub seeds: Option<Vec<u64>>,
    pub turn_budget: usize,
    pub token_budget: u64,
    pub deterministic: bool,
    pub output: PathBuf,
    pub label: Option<String>,
    /// `default` plus optional per-role overrides keyed by role name.
    pub cores: BTreeMap<String, CoreSpec>,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = EpisodeSettings::default();
        Self {
            workspace: None,
            environment: None,
            guidance_mode: None,
            runs: 5,
            seed: 0,
            seeds: None,
            turn_budget: s.turn_budget,
            token_budget: s.token_budget,
            deterministic: true,
            output: PathBuf::from("out"),
            label: None,
            cores: BTreeMap::from([("default".to_string(), CoreSpec::oracle())]),
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if let Some(s) = &self.seeds {
            if s.len() < self.runs {
                return Err(HarnessError::Config(format!("seeds lists {} entries for {} runs", s.len(), self.runs)));
            }
        }
        if self.workspace.is_none() && self.environment.is_none() {
            return Err(HarnessError::Config("set either workspace or [environment]".into()));
        }
        if !self.cores.contains_key("default") {
            return Err(HarnessError::Config("cores.default is required".into()));
        }
        for key in self.cores.keys() {
            if key != "default" && key.parse::<RoleKind>().map_or(true, |k| k == RoleKind::User) {
                return Err(HarnessError::Config(format!("unknown role `{key}` in cores")));
            }
        }
        Ok(())
    }

    pub fn seed_of(&self, run: usize) -> u64 {
        self.seeds
            .as_ref()
            .and_then(|s| s.get(run).copied())
            .unwrap_or(self.seed.wrapping_add(run as u64))
    }

    /// Builds every core up front so misconfiguration fails before any run.
    pub fn core_set(&self, run_seed: u64) -> Result<CoreSet, HarnessError> {
        let mut set = CoreSet::uniform(self.cores["default"].build(run_seed)?);
        for (key, spec) in &self.cores {
            if key != "default" {
                let kind: RoleKind = key.parse().map_err(HarnessError::Config)?;
                set = set.with(kind, spec.build(run_seed)?);
            }
        }
        Ok(set)
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let d = &self.cores["default"];
            match d.kind {
                CoreKind::ScriptedOracle => "oracle".into(),
                CoreKind::ScriptedNoisy => format!("noisy_p{}", d.p.unwrap_or(0.0)),
                CoreKind::RemoteLlm => d.name.clone().or(d.endpoint.model.clone()).unwrap_or_else(|| "remote".into()),
            }
        })
    }
}

/// Input of the generate command: destination plus environment knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub output: PathBuf,
    #[serde(default)]
    pub environment: EnvironmentConfig,
}

impl GenerateConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: GenerateConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.environment.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(c)
    }
}

/// Headline counts of a generated environment.
pub fn manifest_summary(manifest: &GroundTruthManifest, manifest_bytes: &[u8]) -> serde_json::Value {
    let ds = &manifest.datasets;
    let sum = |f: &dyn Fn(&crate::envgen::DatasetLedger) -> usize| ds.iter().map(f).sum::<usize>();
    json!({
        "modality": manifest.config.modality.as_str(),
        "seed": manifest.config.seed,
        "clients": manifest.clients.len(),
        "eligible_clients": manifest.eligible_clients.len(),
        "datasets": ds.len(),
        "clean_files": sum(&|d| d.clean.len()),
        "duplicates": sum(&|d| d.duplicates.len()),
        "off_modality": sum(&|d| d.off_modality.len()),
        "mislabeled": sum(&|d| d.mislabeled.len()),
        "junk": sum(&|d| d.junk.len()),
        "perturbations": sum(&|d| d.perturbations.len()),
        "manifest_sha256": sha256_hex(manifest_bytes),
    })
}

/// Copies `src` into `dst`, skipping the manifest at the top level.
pub fn copy_workspace(src: &Path, dst: &Path) -> std::io::Result<()> {
    for rel in list_files(src, src)? {
        if rel == MANIFEST_FILE {
            continue;
        }
        let to = dst.join(&rel);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src.join(&rel), to)?;
    }
    Ok(())
}

/// Hash over relative paths and contents of every file except the manifest.
pub fn tree_hash(root: &Path) -> std::io::Result<String> {
    let mut acc = Vec::new();
    for rel in list_files(root, root)? {
        if rel == MANIFEST_FILE {
            continue;
        }
        acc.extend_from_slice(rel.as_bytes());
        acc.push(0);
        acc.extend_from_slice(sha256_hex(&fs::read(root.join(&rel))?).as_bytes());
        acc.push(b'\n');
    }
    Ok(sha256_hex(&acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_index: usize,
    pub seed: u64,
    pub label: String,
    pub guidance: GuidanceMode,
    pub cores: serde_json::Value,
    pub initial_tree_hash: String,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub environment: PathBuf,
    pub label: String,
    pub runs: Vec<String>,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output: PathBuf,
    pub pristine_hash: String,
    pub metas: Vec<RunMeta>,
}

impl RunSummary {
    pub fn completed(&self) -> usize {
        self.metas.iter().filter(|m| m.completed).count()
    }
}

pub fn run_dir_name(i: usize) -> String {
    format!("run_{:02}", i + 1)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Schema(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> std::io::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("serializable") + "\n")
}

/// Runs one episode on a fresh copy of `env` and persists its artifacts.
pub fn run_once(config: &RunConfig, env: &Path, index: usize, out: &Path) -> Result<RunMeta, HarnessError> {
    let seed = config.seed_of(index);
    let cores = config.core_set(seed)?;
    let dir = out.join(run_dir_name(index));
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let ws = dir.join("workspace");
    fs::create_dir_all(&ws)?;
    copy_workspace(env, &ws)?;
    let initial_tree_hash = tree_hash(&ws)?;
    let mut task: TaskSpec = read_json(&ws.join("server").join("task.json"))?;
    if let Some(g) = config.guidance_mode {
        task.guidance_mode = g;
    }
    let registry = match fs::read_to_string(ws.join("server").join("registry.json")) {
        Ok(t) => Registry::from_json(&t).map_err(|e| HarnessError::Workspace(e.to_string()))?,
        Err(_) => Registry::builtin(),
    };
    let settings = EpisodeSettings {
        turn_budget: config.turn_budget,
        token_budget: config.token_budget,
        deterministic: config.deterministic,
        seed,
        run_index: index,
    };
    let result = run_episode(&ws, &task, &registry, &cores, &settings);
    write_ndjson(&dir.join("trace.ndjson"), &result.events)?;
    write_ndjson(&dir.join("changelog.ndjson"), &result.changes)?;
    write_json(&dir.join("snapshot.json"), &result.snapshot)?;
    write_json(&dir.join("phases.json"), &result.phases)?;
    let completed = !result
        .phases
        .iter()
        .all(|p| p.failure.as_deref().is_some_and(|f| f.starts_with(FAIL_TRANSPORT)));
    let meta = RunMeta {
        run_index: index,
        seed,
        label: config.label(),
        guidance: task.guidance_mode,
        cores: cores.describe(),
        initial_tree_hash,
        completed,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// Resolves the environment, then runs `config.runs` isolated episodes with
/// up to `jobs` in flight.
pub fn run_all(config: &RunConfig, jobs: usize) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    for i in 0..config.runs {
        config.core_set(config.seed_of(i))?;
    }
    let out = config.output.clone();
    fs::create_dir_all(&out)?;
    let env = match (&config.workspace, &config.environment) {
        (Some(ws), _) => {
            if !ws.join("server").join("task.json").is_file() {
                return Err(HarnessError::Workspace(format!("{} is not a generated workspace", ws.display())));
            }
            ws.clone()
        }
        (None, Some(env_cfg)) => {
            let dest = out.join("environment");
            if !dest.join(MANIFEST_FILE).is_file() {
                generate_environment(env_cfg, &dest).map_err(|e| HarnessError::Workspace(e.to_string()))?;
            }
            dest
        }
        (None, None) => unreachable!("validated"),
    };
    let env = env.canonicalize()?;
    let pristine_hash = tree_hash(&env)?;
    let jobs = jobs.max(1);
    let mut metas: Vec<Option<Result<RunMeta, HarnessError>>> = (0..config.runs).map(|_| None).collect();
    for chunk in (0..config.runs).collect::<Vec<_>>().chunks(jobs) {
        let results: Vec<(usize, Result<RunMeta, HarnessError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let env = &env;
                    let out = &out;
                    s.spawn(move || (i, run_once(config, env, i, out)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        });
        for (i, r) in results {
            metas[i] = Some(r);
        }
    }
    let metas: Vec<RunMeta> = metas.into_iter().map(|m| m.expect("every run executed")).collect::<Result<_, _>>()?;
    if tree_hash(&env)? != pristine_hash {
        return Err(HarnessError::Workspace("pristine workspace changed during runs".into()));
    }
    let index = RunIndex {
        environment: env,
        label: config.label(),
        runs: (0..config.runs).map(run_dir_name).collect(),
        thresholds: config.thresholds,
    };
    write_json(&out.join(RUN_INDEX_FILE), &index)?;
    Ok(RunSummary {
        output: out,
        pristine_hash,
        metas,
    })
}

pub fn load_run(dir: &Path) -> Result<(RunMeta, RunArtifacts), HarnessError> {
    let meta: RunMeta = read_json(&dir.join("meta.json"))?;
    let events: Vec<TraceEvent> = read_ndjson(&dir.join("trace.ndjson"))
        .map_err(|e| HarnessError::Schema(format!("{}: {e}", dir.join("trace.ndjson").display())))?;
    match events.first() {
        Some(TraceEvent::EpisodeStart { schema_version, .. }) if *schema_version == TRACE_SCHEMA_VERSION => {}
        Some(TraceEvent::EpisodeStart { schema_version, .. }) => {
            return Err(HarnessError::Schema(format!(
                "trace schema {schema_version}, expected {TRACE_SCHEMA_VERSION}"
            )))
        }
        _ => return Err(HarnessError::Schema("trace does not start with an episode_start event".into())),
    }
    let phases: Vec<PhaseOutcome> = read_json(&dir.join("phases.json"))?;
    let snapshot: Snapshot = read_json(&dir.join("snapshot.json"))?;
    Ok((
        meta.clone(),
        RunArtifacts {
            run_index: meta.run_index,
            phases,
            events,
            snapshot,
        },
    ))
}

/// Scores every run under `traces` from disk alone.
pub fn evaluate_dir(traces: &Path, manifest_override: Option<&Path>) -> Result<MetricsReport, HarnessError> {
    let index: RunIndex = read_json(&traces.join(RUN_INDEX_FILE))?;
    let env = manifest_override.map(Path::to_path_buf).unwrap_or(index.environment.clone());
    let manifest_path = if env.is_dir() { env.join(MANIFEST_FILE) } else { env.clone() };
    let manifest: GroundTruthManifest = read_json(&manifest_path)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(HarnessError::Schema(format!(
            "manifest schema {}, expected {MANIFEST_SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    let mut scores = Vec::new();
    let mut guidance = manifest.task.guidance_mode;
    for name in &index.runs {
        let dir = traces.join(name);
        let (meta, run) = load_run(&dir)?;
        guidance = meta.guidance;
        let ws = dir.join("workspace");
        let registry = fs::read_to_string(ws.join("server").join("registry.json"))
            .ok()
            .and_then(|t| Registry::from_json(&t).ok())
            .unwrap_or_else(Registry::builtin);
        scores.push(score_run(&manifest, &registry, &run, &ws, &index.thresholds));
    }
    let mut report = aggregate(&index.label, &manifest, index.thresholds, scores);
    report.guidance = guidance.as_str().to_string();
    Ok(report)
}

/// Writes `report.json`, `report.csv` and `report.md` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        ("report.json", report.to_json()),
        ("report.csv", report.to_csv()),
        ("report.md", report.to_markdown()),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        out.push(p);
    }
    Ok(out)
}

/// Every `report.json` below `dir`, sorted by path.
pub fn find_reports(dir: &Path) -> Result<Vec<MetricsReport>, HarnessError> {
    let mut paths: Vec<String> = list_files(dir, dir)?
        .into_iter()
        .filter(|p| p.rsplit('/').next() == Some("report.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(&dir.join(p))).collect()
}

/// Per-run plot series of score against tokens.
pub fn plot_series(reports: &[MetricsReport]) -> String {
    let mut out = String::from("label,run,overall_cells,tokens\n");
    for r in reports {
        for run in &r.per_run {
            let hits = run.cells.values().filter(|v| **v).count();
            out.push_str(&format!(
                "{},{},{:.4},{}\n",
                r.label,
                run.run_index,
                100.0 * hits as f64 / run.cells.len().max(1) as f64,
                run.tokens()
            ));
        }
    }
    out
}

/// Convenience for callers that already have a summary in hand.
pub fn summary_json(summary: &RunSummary) -> serde_json::Value {
    json!({
        "runs": summary.metas.len(),
        "completed": summary.completed(),
        "pristine_hash": summary.pristine_hash,
    })
}
