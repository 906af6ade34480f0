//! Scores episodes against the ground-truth manifest and renders reports.
//!
//! Everything here is a pure function of the manifest, the run artifacts
//! persisted on disk and the final workspace.

use crate::agent::runtime::PhaseOutcome;
use crate::envgen::{list_files, DatasetLedger, GroundTruthManifest, FLAT_SEPARATOR};
use crate::fedcore::Registry;
use crate::image::{is_image_name, CanonicalProfile, GrayImage, ImageFormat, PROFILE_TOLERANCE};
use crate::protocol::{MessageKind, Phase, RoleKind, TaskSpec};
use crate::toolkit::{class_of, sha256_hex};
use crate::trace::{ParseFailureKind, TraceEvent};
use crate::vocab::Modality;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Consecutive action-free replies that count as overthinking.
pub const OVERTHINKING_TURNS: usize = 10;
/// Agent cells in table order.
pub const CELLS: [RoleKind; 7] = [
    RoleKind::S1,
    RoleKind::C1,
    RoleKind::S2,
    RoleKind::C2,
    RoleKind::C3,
    RoleKind::S3,
    RoleKind::S4,
];

/// A ratio that reports 1.0 when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub num: usize,
    pub den: usize,
    pub vacuous: bool,
}

impl Rate {
    pub fn new(num: usize, den: usize) -> Self {
        if den == 0 {
            Self {
                value: 1.0,
                num,
                den,
                vacuous: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                num,
                den,
                vacuous: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Minimum for higher-is-better rates.
    pub higher: f64,
    /// Maximum conflict rate.
    pub conflict: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            higher: 0.95,
            conflict: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision, recall and F1 of `selected` against `eligible`.
pub fn score_client_selection(selected: &BTreeSet<String>, eligible: &BTreeSet<String>) -> SelectionScore {
    let hit = selected.intersection(eligible).count();
    let precision = if selected.is_empty() {
        if eligible.is_empty() { 1.0 } else { 0.0 }
    } else {
        hit as f64 / selected.len() as f64
    };
    let recall = Rate::new(hit, eligible.len()).value;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SelectionScore { precision, recall, f1 }
}

/// What happened to one local class during harmonization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub dataset: String,
    pub class: String,
    pub canonical: String,
    /// Distinct targets in the reported table, in order.
    pub targets: Vec<String>,
    /// Folders holding the surviving samples of the class.
    pub placements: BTreeSet<String>,
}

impl ClassMapping {
    pub fn mapped(&self) -> bool {
        !self.targets.is_empty()
    }

    pub fn conflicting(&self) -> bool {
        self.targets.len() >= 2
            || self.placements.len() >= 2
            || (self.targets.len() == 1 && !self.placements.is_empty() && !self.placements.contains(&self.targets[0]))
    }

    pub fn exact(&self) -> bool {
        self.targets.len() == 1 && self.targets[0] == self.canonical && self.placements.iter().all(|p| *p == self.canonical)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationScore {
    pub exact: Rate,
    pub coverage: Rate,
    pub conflict: Rate,
}

pub fn score_harmonization(classes: &[ClassMapping]) -> HarmonizationScore {
    let n = classes.len();
    let conflict = Rate::new(classes.iter().filter(|c| c.conflicting()).count(), n);
    HarmonizationScore {
        exact: Rate::new(classes.iter().filter(|c| c.exact()).count(), n),
        coverage: Rate::new(classes.iter().filter(|c| c.mapped()).count(), n),
        // No classes means no conflicts.
        conflict: Rate {
            value: if n == 0 { 0.0 } else { conflict.value },
            ..conflict
        },
    }
}

/// Distinct targets of a table cell that is a string or a list of strings.
pub fn table_targets(cell: &Value) -> Vec<String> {
    let raw: Vec<String> = match cell {
        Value::String(s) => vec![s.clone()],
        Value::Array(a) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
        _ => vec![],
    };
    let mut seen = BTreeSet::new();
    raw.into_iter().filter(|t| !t.is_empty() && seen.insert(t.clone())).collect()
}

/// One file of the workspace as seen right after preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub format: Option<ImageFormat>,
    pub width: u32,
    pub height: u32,
    pub mean: f64,
    pub std: f64,
}

impl FileRecord {
    pub fn matches(&self, p: &CanonicalProfile) -> bool {
        self.format == Some(p.format)
            && self.width == p.width
            && self.height == p.height
            && (self.mean - p.mean).abs() <= PROFILE_TOLERANCE
            && (self.std - p.std).abs() <= PROFILE_TOLERANCE
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub files: Vec<FileRecord>,
}

impl Snapshot {
    /// Records every file under `<root>/clients`.
    pub fn capture(root: &Path) -> Self {
        let mut files = Vec::new();
        for path in list_files(root, &root.join("clients")).unwrap_or_default() {
            let Ok(bytes) = fs::read(root.join(&path)) else {
                continue;
            };
            let mut rec = FileRecord {
                sha256: sha256_hex(&bytes),
                path,
                format: None,
                width: 0,
                height: 0,
                mean: 0.0,
                std: 0.0,
            };
            if let Ok((img, fmt)) = GrayImage::decode(&bytes) {
                let (m, s) = img.stats();
                rec.format = Some(fmt);
                rec.width = img.width;
                rec.height = img.height;
                rec.mean = m;
                rec.std = s;
            }
            files.push(rec);
        }
        Self { files }
    }
}

/// File name without extension and without a flat class prefix.
pub fn file_stem(path: &str) -> &str {
    let name = path.rsplit('/').next().unwrap_or(path);
    let name = name.split_once(FLAT_SEPARATOR).map(|(_, n)| n).unwrap_or(name);
    name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name)
}

fn file_name(path: &str) -> &str {
    let name = path.rsplit('/').next().unwrap_or(path);
    name.split_once(FLAT_SEPARATOR).map(|(_, n)| n).unwrap_or(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessScore {
    pub schema_compliance: Rate,
    pub duplicate_removal: Rate,
    pub format_normalization: Rate,
}

/// Per-dataset tallies for the preprocessing rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessCounts {
    pub structured: usize,
    pub expected: usize,
    pub duplicates_removed: usize,
    pub duplicates: usize,
    pub normalized: usize,
    pub perturbed: usize,
}

impl PreprocessCounts {
    pub fn add(&mut self, o: &PreprocessCounts) {
        self.structured += o.structured;
        self.expected += o.expected;
        self.duplicates_removed += o.duplicates_removed;
        self.duplicates += o.duplicates;
        self.normalized += o.normalized;
        self.perturbed += o.perturbed;
    }

    pub fn score(&self) -> PreprocessScore {
        PreprocessScore {
            schema_compliance: Rate::new(self.structured, self.expected),
            duplicate_removal: Rate::new(self.duplicates_removed, self.duplicates),
            format_normalization: Rate::new(self.normalized, self.perturbed),
        }
    }
}

/// Compares one dataset's ledger with the files present after preprocessing.
///
/// Clean samples must sit in `<dataset>/<class>/`; junk, off-modality and
/// mislabeled files must be gone.
pub fn preprocess_counts(ledger: &DatasetLedger, files: &[&FileRecord], profile: &CanonicalProfile) -> PreprocessCounts {
    let dir = ledger.dir();
    let mut by_stem: BTreeMap<&str, Vec<&FileRecord>> = BTreeMap::new();
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for f in files {
        by_stem.entry(file_stem(&f.path)).or_default().push(f);
        names.insert(file_name(&f.path));
    }
    let gone = |stem: &str| !by_stem.get(stem).is_some_and(|v| v.iter().any(|f| is_image_name(&f.path)));
    let mut c = PreprocessCounts::default();
    for (stem, clean) in &ledger.clean {
        c.expected += 1;
        let placed = by_stem.get(stem.as_str()).is_some_and(|v| {
            v.iter().any(|f| {
                is_image_name(&f.path)
                    && f.path.rsplit_once('/').map(|(d, _)| d) == Some(format!("{dir}/{}", clean.class).as_str())
            })
        });
        c.structured += placed as usize;
    }
    for j in &ledger.junk {
        c.expected += 1;
        c.structured += !names.contains(file_name(j)) as usize;
    }
    let removable = ledger
        .off_modality
        .iter()
        .map(|o| o.path.as_str())
        .chain(ledger.mislabeled.iter().map(|m| m.path.as_str()));
    for p in removable {
        c.expected += 1;
        c.structured += gone(file_stem(p)) as usize;
    }
    for d in &ledger.duplicates {
        c.duplicates += 1;
        c.duplicates_removed += gone(file_stem(&d.path)) as usize;
    }
    for p in &ledger.perturbations {
        c.perturbed += 1;
        let ok = by_stem
            .get(p.stem.as_str())
            .is_some_and(|v| v.iter().any(|f| f.matches(profile)));
        c.normalized += ok as usize;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingScore {
    pub run_id: Option<String>,
    pub algorithm: Option<String>,
    pub algorithm_suitable: bool,
    pub config_valid: bool,
    pub initialized: bool,
    pub start_signal_logged: bool,
    pub t: f64,
    pub reason: Option<String>,
}

/// Three-part start check from the training directory and the trace.
pub fn score_training(
    artifacts: &Value,
    events: &[TraceEvent],
    workspace: &Path,
    task: &TaskSpec,
    registry: &Registry,
    suitable: &BTreeSet<String>,
) -> TrainingScore {
    let algorithm = artifacts["algorithm"].as_str().map(str::to_string);
    let algorithm_suitable = algorithm
        .as_deref()
        .is_some_and(|a| suitable.iter().any(|s| s.eq_ignore_ascii_case(a.trim())));
    let run_id = artifacts["receipt"]["run_id"]
        .as_str()
        .or(artifacts["run_id"].as_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    let mut score = TrainingScore {
        run_id: run_id.clone(),
        algorithm,
        algorithm_suitable,
        config_valid: false,
        initialized: false,
        start_signal_logged: false,
        t: 0.0,
        reason: None,
    };
    let Some(run_id) = run_id else {
        score.reason = Some("no training run was launched".into());
        return score;
    };
    let safe = run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    let dir = workspace.join("server").join("training").join(&run_id);
    let config: Option<Value> = safe
        .then(|| fs::read_to_string(dir.join("config.json")).ok())
        .flatten()
        .and_then(|t| serde_json::from_str(&t).ok());
    score.config_valid = config
        .as_ref()
        .and_then(|c| serde_json::from_value::<crate::fedcore::TrainingConfig>(c["config"].clone()).ok())
        .is_some_and(|c| c.validate(registry).is_ok() && c.model.classes == task.target_schema.len());
    let rounds_logged = safe
        && crate::trace::read_ndjson::<Value>(&dir.join("rounds.ndjson"))
            .map(|r| !r.is_empty())
            .unwrap_or(false);
    let start_pos = events
        .iter()
        .position(|e| matches!(e, TraceEvent::TrainingStart { run_id: r, .. } if *r == run_id));
    score.start_signal_logged = start_pos.is_some();
    score.initialized = rounds_logged
        && start_pos.is_some_and(|i| events[i..].iter().any(|e| matches!(e, TraceEvent::Round(_))));
    score.t = (score.config_valid && score.initialized && score.start_signal_logged) as u8 as f64;
    if score.t < 1.0 {
        score.reason = Some(
            [
                (!score.config_valid).then_some("invalid configuration"),
                (!score.initialized).then_some("training not initialized"),
                (!score.start_signal_logged).then_some("no start signal"),
            ]
            .into_iter()
            .flatten()
            .collect::<Vec<_>>()
            .join(", "),
        );
    }
    score
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub domain_reasoning: usize,
    pub multi_step_planning: usize,
    pub shortcutting: usize,
    pub hallucination: usize,
    pub mismatch: usize,
    pub overthinking: usize,
}

impl FailureCounts {
    pub fn add(&mut self, o: &FailureCounts) {
        self.domain_reasoning += o.domain_reasoning;
        self.multi_step_planning += o.multi_step_planning;
        self.shortcutting += o.shortcutting;
        self.hallucination += o.hallucination;
        self.mismatch += o.mismatch;
        self.overthinking += o.overthinking;
    }

    pub fn total(&self) -> usize {
        self.domain_reasoning
            + self.multi_step_planning
            + self.shortcutting
            + self.hallucination
            + self.mismatch
            + self.overthinking
    }
}

/// Rule-based failure signatures over a trace.
pub fn classify_failures(events: &[TraceEvent], task: &TaskSpec) -> FailureCounts {
    let mut out = FailureCounts::default();
    let modality = serde_json::to_value(task.modality).unwrap();
    let task_kind = serde_json::to_value(task.task_kind).unwrap();
    let vocab_target = |class: &str| {
        Modality::ALL
            .into_iter()
            .find_map(|m| m.vocabulary().coarse_of(class))
            .map(str::to_string)
    };
    // Tool calls of the current conversation of each role.
    let mut calls: BTreeMap<String, Vec<(String, Value)>> = BTreeMap::new();
    let mut streak: BTreeMap<String, (usize, bool)> = BTreeMap::new();
    let mut offers: BTreeMap<String, bool> = BTreeMap::new();
    for e in events {
        match e {
            TraceEvent::ParseFailure { role, kind, .. } => {
                if *kind == ParseFailureKind::NoAction {
                    let s = streak.entry(role.to_string()).or_default();
                    s.0 += 1;
                    if s.0 >= OVERTHINKING_TURNS && !s.1 {
                        s.1 = true;
                        out.overthinking += 1;
                    }
                } else {
                    out.hallucination += 1;
                }
            }
            TraceEvent::ToolCall { role, tool, args } => {
                streak.entry(role.to_string()).or_default().0 = 0;
                calls.entry(role.to_string()).or_default().push((tool.clone(), args.clone()));
            }
            TraceEvent::ToolResult { error_kind, .. } => {
                if matches!(error_kind.as_deref(), Some("access_denied") | Some("schema")) {
                    out.hallucination += 1;
                }
            }
            TraceEvent::Message(m) if m.kind == MessageKind::DatasetOffer => {
                let fits = m.payload["datasets"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .any(|d| d["modality"] == modality && d["task_kind"] == task_kind);
                if let Some(c) = m.payload["client"].as_str() {
                    offers.insert(c.to_string(), fits);
                }
            }
            TraceEvent::AgentEnd { role, final_answer, .. } => {
                let key = role.to_string();
                streak.remove(&key);
                let made = calls.remove(&key).unwrap_or_default();
                let called = |tool: &str, dataset: Option<&str>| {
                    made.iter().any(|(t, a)| t == tool && dataset.is_none_or(|d| a["dataset"] == d))
                };
                let Some(fin) = final_answer else {
                    continue;
                };
                match role.kind {
                    RoleKind::S1 => {
                        out.mismatch += (fin["modality"] != modality || fin["task_kind"] != task_kind) as usize;
                    }
                    RoleKind::C1 => {
                        out.multi_step_planning += !called("read_datacard", None) as usize;
                        out.mismatch += fin["datasets"]
                            .as_array()
                            .into_iter()
                            .flatten()
                            .filter(|d| d["modality"] != modality || d["task_kind"] != task_kind)
                            .count();
                    }
                    RoleKind::S2 => {
                        for s in fin["selected"].as_array().into_iter().flatten() {
                            let c = s["client"].as_str().unwrap_or_default();
                            out.mismatch += !offers.get(c).copied().unwrap_or(false) as usize;
                        }
                    }
                    RoleKind::C2 => {
                        let inspected: BTreeSet<String> = made
                            .iter()
                            .filter(|(t, _)| t == "stat_dataset")
                            .filter_map(|(_, a)| a["dataset"].as_str().map(str::to_string))
                            .collect();
                        for d in &inspected {
                            for tool in ["detect_duplicates", "detect_outliers", "normalize_images"] {
                                out.multi_step_planning += !called(tool, Some(d)) as usize;
                            }
                        }
                    }
                    RoleKind::C3 => {
                        for (d, rows) in fin["mappings"].as_object().into_iter().flatten() {
                            let probed = called("enumerate_labels", Some(d));
                            out.multi_step_planning +=
                                (called("apply_label_mapping", Some(d)) && !probed) as usize;
                            for (class, cell) in rows.as_object().into_iter().flatten() {
                                let targets = table_targets(cell);
                                let Some(canonical) = vocab_target(class) else {
                                    continue;
                                };
                                if !targets.is_empty() && targets != [canonical] {
                                    if probed {
                                        out.domain_reasoning += 1;
                                    } else {
                                        out.shortcutting += 1;
                                    }
                                }
                            }
                        }
                    }
                    RoleKind::S4 => {
                        out.multi_step_planning += !called("launch_training", None) as usize;
                    }
                    RoleKind::S3 | RoleKind::User => {}
                }
            }
            _ => {}
        }
    }
    out
}

/// Everything persisted for one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_index: usize,
    pub phases: Vec<PhaseOutcome>,
    pub events: Vec<TraceEvent>,
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVerdict {
    pub phase: Phase,
    pub success: bool,
    pub failure: Option<String>,
    pub elapsed_seconds: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run_index: usize,
    pub selection: SelectionScore,
    pub preprocessing: PreprocessScore,
    pub harmonization: HarmonizationScore,
    pub training: TrainingScore,
    /// Role → cell success.
    pub cells: BTreeMap<String, bool>,
    pub phases: Vec<PhaseVerdict>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub elapsed_seconds: f64,
    pub failures: FailureCounts,
}

impl RunScore {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

fn phase_artifacts(run: &RunArtifacts, phase: Phase) -> Value {
    run.phases
        .iter()
        .find(|p| p.phase == phase)
        .map(|p| p.artifacts.clone())
        .unwrap_or(Value::Null)
}

/// Folders holding the surviving samples of each true class: clean files
/// and any mislabeled file that was not removed.
pub fn placements(ledger: &DatasetLedger, workspace: &Path) -> BTreeMap<String, BTreeSet<String>> {
    let dir = ledger.dir();
    let mislabeled: BTreeMap<&str, &str> = ledger
        .mislabeled
        .iter()
        .map(|m| (file_stem(&m.path), m.true_class.as_str()))
        .collect();
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for f in list_files(workspace, &workspace.join(&dir)).unwrap_or_default() {
        if !is_image_name(&f) {
            continue;
        }
        let stem = file_stem(&f);
        let class = ledger
            .clean
            .get(stem)
            .map(|c| c.class.as_str())
            .or_else(|| mislabeled.get(stem).copied());
        if let (Some(class), Some(folder)) = (class, class_of(&dir, &f)) {
            out.entry(class.to_string()).or_default().insert(folder);
        }
    }
    out
}

/// Scores one run. `workspace` is the final workspace of the run.
pub fn score_run(
    manifest: &GroundTruthManifest,
    registry: &Registry,
    run: &RunArtifacts,
    workspace: &Path,
    thresholds: &Thresholds,
) -> RunScore {
    let task = &manifest.task;
    let sel = phase_artifacts(run, Phase::ClientSelection);
    let selected: BTreeSet<String> = sel["selected"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|s| s["client"].as_str().map(str::to_string))
        .collect();
    let selection = score_client_selection(&selected, &manifest.eligible_clients);

    let mut counts = PreprocessCounts::default();
    let mut classes = Vec::new();
    let maps = phase_artifacts(run, Phase::LabelHarmonization);
    for ledger in manifest.in_scope() {
        let prefix = format!("{}/", ledger.dir());
        let files: Vec<&FileRecord> = run.snapshot.files.iter().filter(|f| f.path.starts_with(&prefix)).collect();
        counts.add(&preprocess_counts(ledger, &files, &task.canonical_profile));
        let placed = placements(ledger, workspace);
        for class in &ledger.classes {
            let cell = &maps["mappings"][&ledger.client][&ledger.dataset][class];
            classes.push(ClassMapping {
                dataset: ledger.dir(),
                class: class.clone(),
                canonical: manifest.canonical_label_map.get(class).cloned().unwrap_or_default(),
                targets: table_targets(cell),
                placements: placed.get(class).cloned().unwrap_or_default(),
            });
        }
    }
    let preprocessing = counts.score();
    let harmonization = score_harmonization(&classes);
    let training = score_training(
        &phase_artifacts(run, Phase::FederatedTraining),
        &run.events,
        workspace,
        task,
        registry,
        &manifest.suitable_algorithms,
    );

    let hi = |r: f64| r >= thresholds.higher;
    let query = &sel["query"];
    let s1 = query["modality"] == serde_json::to_value(task.modality).unwrap()
        && query["task_kind"] == serde_json::to_value(task.task_kind).unwrap()
        && query["labels"] == serde_json::to_value(&task.target_schema).unwrap();
    let c1 = manifest.clients.iter().all(|c| {
        let want: BTreeSet<&str> = manifest
            .in_scope()
            .filter(|d| d.client == *c)
            .map(|d| d.dataset.as_str())
            .collect();
        sel["offers"].get(c).and_then(Value::as_array).is_some_and(|a| {
            let got: BTreeSet<&str> = a.iter().filter_map(|d| d["name"].as_str()).collect();
            got == want
        })
    });
    let sel_ok = hi(selection.precision) && hi(selection.recall) && hi(selection.f1);
    let pre_ok = hi(preprocessing.schema_compliance.value)
        && hi(preprocessing.duplicate_removal.value)
        && hi(preprocessing.format_normalization.value);
    let harm_ok = hi(harmonization.exact.value)
        && hi(harmonization.coverage.value)
        && harmonization.conflict.value <= thresholds.conflict;
    let t_ok = training.t >= 1.0;
    let cells: BTreeMap<String, bool> = [
        (RoleKind::S1, s1),
        (RoleKind::C1, c1),
        (RoleKind::S2, sel_ok),
        (RoleKind::C2, pre_ok),
        (RoleKind::C3, harm_ok),
        (RoleKind::S3, training.algorithm_suitable),
        (RoleKind::S4, t_ok),
    ]
    .into_iter()
    .map(|(k, v)| (k.as_str().to_string(), v))
    .collect();
    let metric_ok = |p: Phase| match p {
        Phase::ClientSelection => sel_ok,
        Phase::DataPreprocessing => pre_ok,
        Phase::LabelHarmonization => harm_ok,
        Phase::FederatedTraining => t_ok && training.algorithm_suitable,
    };
    let phases = Phase::ALL
        .iter()
        .map(|&p| {
            let rec = run.phases.iter().find(|o| o.phase == p);
            let failure = rec.and_then(|o| o.failure.clone());
            PhaseVerdict {
                phase: p,
                success: rec.is_some() && failure.is_none() && metric_ok(p),
                failure,
                elapsed_seconds: rec.map(|o| o.elapsed_seconds).unwrap_or(0.0),
                tokens: rec.map(|o| o.tokens).unwrap_or(0),
            }
        })
        .collect();
    let (mut prompt_tokens, mut completion_tokens, mut elapsed_seconds) = (0, 0, 0.0);
    for e in &run.events {
        match e {
            TraceEvent::CoreTurn {
                prompt_tokens: p,
                completion_tokens: c,
                ..
            } => {
                prompt_tokens += p;
                completion_tokens += c;
            }
            TraceEvent::EpisodeEnd { elapsed_seconds: s, .. } => elapsed_seconds = *s,
            _ => {}
        }
    }
    RunScore {
        run_index: run.run_index,
        selection,
        preprocessing,
        harmonization,
        training,
        cells,
        phases,
        prompt_tokens,
        completion_tokens,
        elapsed_seconds,
        failures: classify_failures(&run.events, task),
    }
}

/// Overall percentage from per-cell success counts over `runs` runs.
pub fn overall_percent(cells: &[usize], runs: usize) -> f64 {
    if cells.is_empty() || runs == 0 {
        return 0.0;
    }
    100.0 * cells.iter().sum::<usize>() as f64 / (cells.len() * runs) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub schema_compliance: f64,
    pub duplicate_removal: f64,
    pub format_normalization: f64,
    pub exact_match: f64,
    pub coverage: f64,
    pub conflict: f64,
    pub start_verification: f64,
}

impl MetricMeans {
    pub fn of(runs: &[RunScore]) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunScore) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            precision: mean(&|r| r.selection.precision),
            recall: mean(&|r| r.selection.recall),
            f1: mean(&|r| r.selection.f1),
            schema_compliance: mean(&|r| r.preprocessing.schema_compliance.value),
            duplicate_removal: mean(&|r| r.preprocessing.duplicate_removal.value),
            format_normalization: mean(&|r| r.preprocessing.format_normalization.value),
            exact_match: mean(&|r| r.harmonization.exact.value),
            coverage: mean(&|r| r.harmonization.coverage.value),
            conflict: mean(&|r| r.harmonization.conflict.value),
            start_verification: mean(&|r| r.training.t),
        }
    }

    /// Higher-is-better values followed by the conflict rate.
    pub fn higher_better(&self) -> [(&'static str, f64); 9] {
        [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("schema_compliance", self.schema_compliance),
            ("duplicate_removal", self.duplicate_removal),
            ("format_normalization", self.format_normalization),
            ("exact_match", self.exact_match),
            ("coverage", self.coverage),
            ("start_verification", self.start_verification),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub label: String,
    pub guidance: String,
    pub modality: Modality,
    pub runs: usize,
    pub thresholds: Thresholds,
    pub phase_success_rate: BTreeMap<String, f64>,
    pub means: MetricMeans,
    /// Role → successful runs.
    pub cells: BTreeMap<String, usize>,
    pub overall_score: f64,
    pub mean_tokens: f64,
    pub mean_elapsed_seconds: f64,
    pub failures: FailureCounts,
    pub per_run: Vec<RunScore>,
}

pub fn aggregate(label: &str, manifest: &GroundTruthManifest, thresholds: Thresholds, per_run: Vec<RunScore>) -> MetricsReport {
    let n = per_run.len();
    let cells: BTreeMap<String, usize> = CELLS
        .iter()
        .map(|k| {
            let name = k.as_str().to_string();
            let hits = per_run.iter().filter(|r| r.cells.get(&name) == Some(&true)).count();
            (name, hits)
        })
        .collect();
    let phase_success_rate = Phase::ALL
        .iter()
        .map(|&p| {
            let hits = per_run
                .iter()
                .filter(|r| r.phases.iter().any(|v| v.phase == p && v.success))
                .count();
            (p.as_str().to_string(), Rate::new(hits, n).value * (n > 0) as u8 as f64)
        })
        .collect();
    let chips: Vec<usize> = CELLS.iter().map(|k| cells[k.as_str()]).collect();
    let mut failures = FailureCounts::default();
    for r in &per_run {
        failures.add(&r.failures);
    }
    let denom = n.max(1) as f64;
    MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: label.to_string(),
        guidance: manifest.task.guidance_mode.as_str().to_string(),
        modality: manifest.task.modality,
        runs: n,
        thresholds,
        phase_success_rate,
        means: MetricMeans::of(&per_run),
        overall_score: overall_percent(&chips, n),
        cells,
        mean_tokens: per_run.iter().map(|r| r.tokens() as f64).sum::<f64>() / denom,
        mean_elapsed_seconds: per_run.iter().map(|r| r.elapsed_seconds).sum::<f64>() / denom,
        failures,
        per_run,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,precision,recall,f1,schema_compliance,duplicate_removal,format_normalization,exact_match,coverage,conflict,start_verification",
        );
        for k in CELLS {
            let _ = write!(out, ",{}", k.as_str());
        }
        out.push_str(",prompt_tokens,completion_tokens,elapsed_seconds\n");
        for r in &self.per_run {
            let _ = write!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.run_index,
                r.selection.precision,
                r.selection.recall,
                r.selection.f1,
                r.preprocessing.schema_compliance.value,
                r.preprocessing.duplicate_removal.value,
                r.preprocessing.format_normalization.value,
                r.harmonization.exact.value,
                r.harmonization.coverage.value,
                r.harmonization.conflict.value,
                r.training.t
            );
            for k in CELLS {
                let _ = write!(out, ",{}", r.cells.get(k.as_str()).copied().unwrap_or(false) as u8);
            }
            let _ = writeln!(out, ",{},{},{:.3}", r.prompt_tokens, r.completion_tokens, r.elapsed_seconds);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let m = &self.means;
        let mut out = String::new();
        let _ = writeln!(out, "# {} ({}, {})\n", self.label, self.modality, self.guidance);
        let _ = writeln!(out, "Runs: {}\n", self.runs);
        out.push_str("| Client selection (P, R, F1) | Preprocessing (S, D, F) | Harmonization (E, C, Co) | Training (T) |\n");
        out.push_str("|---|---|---|---|\n");
        let _ = writeln!(
            out,
            "| {:.2}, {:.2}, {:.2} | {:.2}, {:.2}, {:.2} | {:.2}, {:.2}, {:.2} | {:.2} |\n",
            m.precision,
            m.recall,
            m.f1,
            m.schema_compliance,
            m.duplicate_removal,
            m.format_normalization,
            m.exact_match,
            m.coverage,
            m.conflict,
            m.start_verification
        );
        let header: Vec<&str> = CELLS.iter().map(|k| k.as_str()).collect();
        let _ = writeln!(out, "| {} | Overall |", header.join(" | "));
        let _ = writeln!(out, "|{}---|", "---|".repeat(CELLS.len()));
        let chips: Vec<String> = CELLS
            .iter()
            .map(|k| format!("{}/{}", self.cells[k.as_str()], self.runs))
            .collect();
        let _ = writeln!(out, "| {} | {:.2}% |\n", chips.join(" | "), self.overall_score);
        out.push_str("| Phase | Success rate |\n|---|---|\n");
        for p in Phase::ALL {
            let _ = writeln!(out, "| {} | {:.2} |", p.as_str(), self.phase_success_rate[p.as_str()]);
        }
        let f = &self.failures;
        let _ = writeln!(
            out,
            "\nMean tokens per run: {:.0}. Mean elapsed seconds: {:.2}.\n",
            self.mean_tokens, self.mean_elapsed_seconds
        );
        out.push_str("| Failure signature | Count |\n|---|---|\n");
        for (name, v) in [
            ("domain reasoning", f.domain_reasoning),
            ("multi-step planning", f.multi_step_planning),
            ("shortcutting", f.shortcutting),
            ("hallucination", f.hallucination),
            ("task/modality mismatch", f.mismatch),
            ("overthinking", f.overthinking),
        ] {
            let _ = writeln!(out, "| {name} | {v} |");
        }
        out
    }
}

/// One leaderboard row per report.
pub fn leaderboard(reports: &[MetricsReport]) -> (String, String) {
    let mut md = String::from("| Label | Modality | Guidance | Runs | Overall | Mean tokens |\n|---|---|---|---|---|---|\n");
    let mut csv = String::from("label,modality,guidance,runs,overall_score,mean_tokens,mean_elapsed_seconds\n");
    for r in reports {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.2}% | {:.0} |",
            r.label, r.modality, r.guidance, r.runs, r.overall_score, r.mean_tokens
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.4},{:.2},{:.3}",
            r.label, r.modality, r.guidance, r.runs, r.overall_score, r.mean_tokens, r.mean_elapsed_seconds
        );
    }
    (md, csv)
}
