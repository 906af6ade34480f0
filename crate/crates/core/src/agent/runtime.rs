//! The four-phase episode: agents converse with their cores, call tools,
//! and hand results to each other over the message bus.

use super::core::{AgentCore, Conversation, CoreError, Turn, Usage};
use super::grammar::{parse_action, Action};
use super::prompts::PromptSet;
use crate::fedcore::Registry;
use crate::protocol::{AgentMessage, MessageBus, MessageKind, Phase, Role, RoleKind, TaskSpec};
use crate::toolkit::{execute, tool_spec, ChangeLog, ChangeRecord, ToolCall, ToolContext, ToolResult};
use crate::trace::{ParseFailureKind, TraceEvent, TraceSink};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

pub const DEFAULT_TURN_BUDGET: usize = 40;
pub const DEFAULT_TOKEN_BUDGET: u64 = 200_000;
/// Longest tool feedback shown to a core, in characters.
pub const FEEDBACK_LIMIT: usize = 6000;

pub const FAIL_BUDGET: &str = "budget_exhausted";
pub const FAIL_TRANSPORT: &str = "transport";
pub const FAIL_CORE_CONFIG: &str = "core_config";
pub const FAIL_NO_CLIENTS: &str = "no_selected_clients";

/// Which core drives each role.
#[derive(Clone)]
pub struct CoreSet {
    cores: BTreeMap<RoleKind, Arc<dyn AgentCore>>,
}

impl CoreSet {
    pub fn uniform(core: Arc<dyn AgentCore>) -> Self {
        Self {
            cores: RoleKind::AGENTS.iter().map(|k| (*k, core.clone())).collect(),
        }
    }

    pub fn with(mut self, kind: RoleKind, core: Arc<dyn AgentCore>) -> Self {
        self.cores.insert(kind, core);
        self
    }

    pub fn get(&self, kind: RoleKind) -> &Arc<dyn AgentCore> {
        &self.cores[&kind]
    }

    pub fn describe(&self) -> Value {
        let m: Map<String, Value> = self
            .cores
            .iter()
            .map(|(k, c)| (k.as_str().to_string(), json!(format!("{} ({})", c.name(), c.kind().as_str()))))
            .collect();
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    /// Core replies allowed per agent conversation.
    pub turn_budget: usize,
    pub token_budget: u64,
    /// Logical clock and client-ordered execution.
    pub deterministic: bool,
    pub seed: u64,
    pub run_index: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            turn_budget: DEFAULT_TURN_BUDGET,
            token_budget: DEFAULT_TOKEN_BUDGET,
            deterministic: true,
            seed: 0,
            run_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub phase: Phase,
    /// Filled in by the evaluator.
    pub success: Option<bool>,
    /// Runtime failure reason, such as an exhausted budget.
    pub failure: Option<String>,
    pub artifacts: Value,
    pub elapsed_seconds: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub phases: Vec<PhaseOutcome>,
    pub events: Vec<TraceEvent>,
    pub changes: Vec<ChangeRecord>,
    pub snapshot: crate::evaluator::Snapshot,
    pub tokens: u64,
    pub elapsed_seconds: f64,
}

struct AgentRun {
    final_answer: Option<Value>,
    failure: Option<String>,
    conversation: Conversation,
}

struct Episode<'a> {
    root: &'a Path,
    task: &'a TaskSpec,
    registry: &'a Registry,
    cores: &'a CoreSet,
    settings: &'a EpisodeSettings,
    prompts: &'static PromptSet,
    trace: TraceSink,
    bus: MessageBus,
    changes: ChangeLog,
    run_counter: Arc<Mutex<usize>>,
    tokens: AtomicU64,
    clock: Mutex<f64>,
    started: Instant,
}

fn briefing(messages: &[AgentMessage]) -> Value {
    Value::Array(
        messages
            .iter()
            .map(|m| json!({"from": m.sender.to_string(), "kind": m.kind, "payload": m.payload}))
            .collect(),
    )
}

fn truncate(s: String, limit: usize) -> String {
    if s.chars().count() <= limit {
        return s;
    }
    let cut: String = s.chars().take(limit).collect();
    format!("{cut}... [truncated]")
}

fn tool_feedback(tool: &str, r: &ToolResult) -> String {
    let status = if r.ok { "ok" } else { "error" };
    let data = serde_json::to_string(&r.data).unwrap_or_default();
    truncate(format!("{tool} -> {status}: {}\n{data}", r.summary), FEEDBACK_LIMIT)
}

fn is_str_list(v: &Value) -> bool {
    v.as_array().is_some_and(|a| a.iter().all(Value::is_string))
}

/// Checks the shape of a role's final result.
pub fn validate_final(kind: RoleKind, v: &Value) -> Result<(), String> {
    let need = |cond: bool, what: &str| if cond { Ok(()) } else { Err(what.to_string()) };
    match kind {
        RoleKind::S1 => {
            need(v["modality"].is_string(), "modality must be a string")?;
            need(v["task_kind"].is_string(), "task_kind must be a string")?;
            need(is_str_list(&v["labels"]), "labels must be a list of strings")
        }
        RoleKind::C1 => need(
            v["datasets"]
                .as_array()
                .is_some_and(|a| a.iter().all(|d| d["name"].is_string())),
            "datasets must be a list of objects with a name",
        ),
        RoleKind::S2 => need(
            v["selected"]
                .as_array()
                .is_some_and(|a| a.iter().all(|s| s["client"].is_string() && is_str_list(&s["datasets"]))),
            "selected must be a list of {client, datasets, justification}",
        ),
        RoleKind::C2 => need(is_str_list(&v["processed"]), "processed must be a list of dataset names"),
        RoleKind::C3 => need(
            v["mappings"].as_object().is_some_and(|m| {
                m.values().all(|rows| {
                    rows.as_object()
                        .is_some_and(|r| r.values().all(|t| t.is_string() || is_str_list(t)))
                })
            }),
            "mappings must map dataset -> local class -> target class list",
        ),
        RoleKind::S3 => need(
            v["algorithm"].as_str().is_some_and(|s| !s.trim().is_empty()),
            "algorithm must be a non-empty string",
        ),
        RoleKind::S4 => need(v["run_id"].is_string(), "run_id must be a string"),
        RoleKind::User => Ok(()),
    }
}

impl Episode<'_> {
    fn now(&self) -> f64 {
        if self.settings.deterministic {
            *self.clock.lock().unwrap()
        } else {
            self.started.elapsed().as_secs_f64()
        }
    }

    fn tokens(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }

    fn send(&self, from: &Role, to: &Role, kind: MessageKind, payload: Value) {
        // Rejections are traced by the bus guard.
        let _ = self.bus.send(from, to, kind, payload);
    }

    fn parse_failure(&self, role: &Role, kind: ParseFailureKind, detail: String) -> (Value, String) {
        self.trace.record(TraceEvent::ParseFailure {
            role: role.clone(),
            kind,
            detail: detail.clone(),
        });
        let feedback = format!("Your reply was not accepted ({}): {detail}. Reply with exactly one ```action block.", serde_json::to_value(kind).unwrap().as_str().unwrap_or_default());
        (json!({"parse_error": kind, "detail": detail}), feedback)
    }

    fn converse(&self, role: Role, phase: Phase, inbox: Vec<AgentMessage>) -> AgentRun {
        let core = self.cores.get(role.kind);
        let brief = briefing(&inbox);
        let mut conv = Conversation {
            system: self.prompts.system(&role, self.task.guidance_mode),
            opening: self
                .prompts
                .opening(phase, &serde_json::to_string_pretty(&brief).unwrap_or_default()),
            briefing: brief,
            role: role.clone(),
            phase,
            turns: Vec::new(),
            usage: Usage::default(),
        };
        let mut ctx = ToolContext::new(self.root, role.clone(), self.trace.clone(), self.changes.clone(), self.registry, self.task);
        ctx.run_counter = self.run_counter.clone();
        let mut final_answer = None;
        let mut failure = None;
        loop {
            if conv.turns.len() >= self.settings.turn_budget || self.tokens() >= self.settings.token_budget {
                failure = Some(FAIL_BUDGET.to_string());
                break;
            }
            let reply = match core.respond(&conv) {
                Ok(r) => r,
                Err(CoreError::Transport(e)) => {
                    failure = Some(format!("{FAIL_TRANSPORT}: {e}"));
                    break;
                }
                Err(CoreError::Config(e)) => {
                    failure = Some(format!("{FAIL_CORE_CONFIG}: {e}"));
                    break;
                }
            };
            conv.usage.prompt_tokens += reply.usage.prompt_tokens;
            conv.usage.completion_tokens += reply.usage.completion_tokens;
            self.tokens.fetch_add(reply.usage.total(), Ordering::SeqCst);
            *self.clock.lock().unwrap() += 1.0;
            self.trace.record(TraceEvent::CoreTurn {
                role: role.clone(),
                phase,
                turn: conv.turns.len() + 1,
                text: reply.text.clone(),
                prompt_tokens: reply.usage.prompt_tokens,
                completion_tokens: reply.usage.completion_tokens,
            });
            let (tool, result, ok, feedback) = match parse_action(&reply.text) {
                Err((kind, detail)) => {
                    let (r, f) = self.parse_failure(&role, kind, detail);
                    (None, r, false, f)
                }
                Ok(Action::Final(v)) => match validate_final(role.kind, &v) {
                    Ok(()) => {
                        final_answer = Some(v);
                        conv.turns.push(Turn {
                            output: reply.text,
                            tool: None,
                            result: Value::Null,
                            ok: true,
                            feedback: String::new(),
                        });
                        break;
                    }
                    Err(detail) => {
                        let (r, f) = self.parse_failure(&role, ParseFailureKind::InvalidFinal, detail);
                        (None, r, false, f)
                    }
                },
                Ok(Action::Tool { tool, args }) => match tool_spec(&tool) {
                    None => {
                        let (r, f) = self.parse_failure(&role, ParseFailureKind::UnknownTool, format!("no tool named `{tool}`"));
                        (None, r, false, f)
                    }
                    Some(spec) if !spec.roles.contains(&role.kind) => {
                        let detail = format!("{tool} is not available to {}", role.kind.as_str());
                        let (r, f) = self.parse_failure(&role, ParseFailureKind::ToolNotAssigned, detail);
                        (None, r, false, f)
                    }
                    Some(_) => {
                        self.trace.record(TraceEvent::ToolCall {
                            role: role.clone(),
                            tool: tool.clone(),
                            args: args.clone(),
                        });
                        let r = execute(&ctx, &ToolCall { tool: tool.clone(), args });
                        self.trace.record(TraceEvent::ToolResult {
                            role: role.clone(),
                            tool: tool.clone(),
                            ok: r.ok,
                            summary: r.summary.clone(),
                            data: r.data.clone(),
                            error_kind: r.error_kind.map(|k| k.as_str().to_string()),
                        });
                        let feedback = tool_feedback(&tool, &r);
                        (Some(tool), serde_json::to_value(&r).unwrap(), r.ok, feedback)
                    }
                },
            };
            conv.turns.push(Turn {
                output: reply.text,
                tool,
                result,
                ok,
                feedback,
            });
        }
        self.trace.record(TraceEvent::AgentEnd {
            role,
            phase,
            final_answer: final_answer.clone(),
            failure: failure.clone(),
            turns: conv.turns.len(),
            tool_calls: conv.tool_turns().count(),
            tokens: conv.usage.total(),
        });
        AgentRun {
            final_answer,
            failure,
            conversation: conv,
        }
    }

    /// Runs one conversation per client, concurrently unless deterministic.
    fn per_client<F>(&self, clients: &[String], kind: RoleKind, phase: Phase, brief: F) -> Vec<(String, AgentRun)>
    where
        F: Fn(&str) -> Vec<AgentMessage> + Sync,
    {
        let run = |c: &String| (c.clone(), self.converse(Role::client(kind, c.as_str()), phase, brief(c)));
        if self.settings.deterministic || clients.len() < 2 {
            return clients.iter().map(run).collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = clients.iter().map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
        })
    }
}

fn list_clients(root: &Path) -> Vec<String> {
    let mut out: Vec<String> = std::fs::read_dir(root.join("clients"))
        .map(|rd| {
            rd.filter_map(Result::ok)
                .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

fn first_failure<'r>(runs: impl IntoIterator<Item = &'r AgentRun>) -> Option<String> {
    runs.into_iter().find_map(|r| r.failure.clone())
}

/// Approved clients and their datasets, in client order.
type Selection = BTreeMap<String, Vec<String>>;

/// Runs all four phases in order on the workspace at `root`.
pub fn run_episode(
    root: &Path,
    task: &TaskSpec,
    registry: &Registry,
    cores: &CoreSet,
    settings: &EpisodeSettings,
) -> EpisodeResult {
    let trace = TraceSink::memory();
    let ep = Episode {
        root,
        task,
        registry,
        cores,
        settings,
        prompts: PromptSet::builtin(),
        bus: MessageBus::new(trace.clone()),
        trace,
        changes: ChangeLog::new(),
        run_counter: Arc::new(Mutex::new(0)),
        tokens: AtomicU64::new(0),
        clock: Mutex::new(0.0),
        started: Instant::now(),
    };
    ep.trace.record(TraceEvent::EpisodeStart {
        schema_version: crate::trace::TRACE_SCHEMA_VERSION,
        run_index: settings.run_index,
        seed: settings.seed,
        guidance: task.guidance_mode.as_str().to_string(),
        cores: cores.describe(),
    });
    let clients = list_clients(root);
    let mut phases = Vec::new();
    let mut snapshot = crate::evaluator::Snapshot::default();
    let mut selection = Selection::new();
    let mut selection_failure = None;

    for phase in Phase::ALL {
        ep.bus.set_phase(phase);
        ep.trace.record(TraceEvent::PhaseStart { phase });
        let (t0, k0) = (ep.now(), ep.tokens());
        let (failure, artifacts) = match phase {
            Phase::ClientSelection => {
                let (f, a, sel) = client_selection(&ep, &clients);
                selection = sel;
                selection_failure = f.clone();
                (f, a)
            }
            Phase::DataPreprocessing => {
                let out = data_preprocessing(&ep, &selection);
                snapshot = crate::evaluator::Snapshot::capture(root);
                out
            }
            Phase::LabelHarmonization => label_harmonization(&ep, &selection),
            Phase::FederatedTraining => federated_training(&ep, &selection),
        };
        // A client phase with nobody selected carries the selection failure.
        let failure = match phase {
            Phase::DataPreprocessing | Phase::LabelHarmonization if selection.is_empty() => {
                failure.or_else(|| Some(selection_failure.clone().unwrap_or_else(|| FAIL_NO_CLIENTS.to_string())))
            }
            _ => failure,
        };
        let elapsed = ep.now() - t0;
        let tokens = ep.tokens() - k0;
        ep.trace.record(TraceEvent::PhaseEnd {
            phase,
            failure: failure.clone(),
            elapsed_seconds: elapsed,
            tokens,
        });
        phases.push(PhaseOutcome {
            phase,
            success: None,
            failure,
            artifacts,
            elapsed_seconds: elapsed,
            tokens,
        });
    }
    let elapsed = ep.now();
    ep.trace.record(TraceEvent::EpisodeEnd {
        tokens: ep.tokens(),
        elapsed_seconds: elapsed,
    });
    EpisodeResult {
        phases,
        events: ep.trace.events(),
        changes: ep.changes.records(),
        snapshot,
        tokens: ep.tokens(),
        elapsed_seconds: elapsed,
    }
}

fn client_selection(ep: &Episode<'_>, clients: &[String]) -> (Option<String>, Value, Selection) {
    let s1 = Role::server(RoleKind::S1);
    let s2 = Role::server(RoleKind::S2);
    ep.send(
        &Role::user(),
        &s1,
        MessageKind::Query,
        json!({
            "task": ep.task.objective,
            "target_classes": ep.task.target_schema,
            "fl_preferences": ep.task.fl_preferences,
        }),
    );
    let parser = ep.converse(s1.clone(), Phase::ClientSelection, ep.bus.drain(&s1));
    let query = parser.final_answer.clone().unwrap_or(Value::Null);
    let mut runs = vec![parser];
    let mut offers = Map::new();
    for c in clients {
        let c1 = Role::client(RoleKind::C1, c.as_str());
        if !query.is_null() {
            ep.send(&s1, &c1, MessageKind::Query, query.clone());
        }
        let run = ep.converse(c1.clone(), Phase::ClientSelection, ep.bus.drain(&c1));
        if let Some(f) = &run.final_answer {
            offers.insert(c.clone(), f["datasets"].clone());
            ep.send(&c1, &s2, MessageKind::DatasetOffer, json!({"client": c, "datasets": f["datasets"]}));
        }
        runs.push(run);
    }
    ep.send(&s1, &s2, MessageKind::Config, json!({ "query": query }));
    let selector = ep.converse(s2.clone(), Phase::ClientSelection, ep.bus.drain(&s2));
    let mut selection = Selection::new();
    let mut selected = Vec::new();
    if let Some(f) = &selector.final_answer {
        for s in f["selected"].as_array().into_iter().flatten() {
            let client = s["client"].as_str().unwrap_or_default().to_string();
            if !clients.contains(&client) || selection.contains_key(&client) {
                continue;
            }
            let datasets: Vec<String> = s["datasets"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|d| d.as_str().map(str::to_string))
                .collect();
            let c1 = Role::client(RoleKind::C1, client.as_str());
            ep.send(&s2, &c1, MessageKind::Approval, json!({"datasets": datasets}));
            ep.bus.drain(&c1);
            selected.push(json!({"client": client, "datasets": datasets, "justification": s["justification"]}));
            selection.insert(client, datasets);
        }
    }
    runs.push(selector);
    let failure = first_failure(&runs);
    (failure, json!({"query": query, "offers": offers, "selected": selected}), selection)
}

fn data_preprocessing(ep: &Episode<'_>, selection: &Selection) -> (Option<String>, Value) {
    let s2 = Role::server(RoleKind::S2);
    let clients: Vec<String> = selection.keys().cloned().collect();
    for (c, datasets) in selection {
        ep.send(
            &s2,
            &Role::client(RoleKind::C2, c.as_str()),
            MessageKind::Config,
            json!({"datasets": datasets, "profile": ep.task.canonical_profile}),
        );
    }
    let runs = ep.per_client(&clients, RoleKind::C2, Phase::DataPreprocessing, |c| {
        ep.bus.drain(&Role::client(RoleKind::C2, c))
    });
    let mut processed = Map::new();
    for (c, run) in &runs {
        let done = run.final_answer.as_ref().map(|f| f["processed"].clone()).unwrap_or(json!([]));
        ep.send(
            &Role::client(RoleKind::C2, c.as_str()),
            &s2,
            MessageKind::Status,
            json!({"processed": done, "failure": run.failure}),
        );
        processed.insert(c.clone(), done);
    }
    ep.bus.drain(&s2);
    let failure = first_failure(runs.iter().map(|(_, r)| r));
    (failure, json!({"processed": processed, "changes": ep.changes.len()}))
}

fn label_harmonization(ep: &Episode<'_>, selection: &Selection) -> (Option<String>, Value) {
    let s2 = Role::server(RoleKind::S2);
    let clients: Vec<String> = selection.keys().cloned().collect();
    for (c, datasets) in selection {
        ep.send(
            &s2,
            &Role::client(RoleKind::C3, c.as_str()),
            MessageKind::Config,
            json!({"datasets": datasets, "target_schema": ep.task.target_schema}),
        );
    }
    let runs = ep.per_client(&clients, RoleKind::C3, Phase::LabelHarmonization, |c| {
        ep.bus.drain(&Role::client(RoleKind::C3, c))
    });
    let mut mappings = Map::new();
    for (c, run) in &runs {
        let table = run.final_answer.as_ref().map(|f| f["mappings"].clone()).unwrap_or(json!({}));
        ep.send(
            &Role::client(RoleKind::C3, c.as_str()),
            &s2,
            MessageKind::Status,
            json!({"mappings": table, "failure": run.failure}),
        );
        mappings.insert(c.clone(), table);
    }
    ep.bus.drain(&s2);
    let failure = first_failure(runs.iter().map(|(_, r)| r));
    (failure, json!({ "mappings": mappings }))
}

fn federated_training(ep: &Episode<'_>, selection: &Selection) -> (Option<String>, Value) {
    let s2 = Role::server(RoleKind::S2);
    let s3 = Role::server(RoleKind::S3);
    let s4 = Role::server(RoleKind::S4);
    let clients: Vec<&String> = selection.keys().collect();
    ep.send(
        &s2,
        &s3,
        MessageKind::Config,
        json!({
            "fl_preferences": ep.task.fl_preferences,
            "modality": ep.task.modality,
            "task_kind": ep.task.task_kind,
            "clients": clients,
        }),
    );
    let selector = ep.converse(s3.clone(), Phase::FederatedTraining, ep.bus.drain(&s3));
    let algorithm = selector.final_answer.as_ref().map(|f| f["algorithm"].clone()).unwrap_or(Value::Null);
    let rationale = selector.final_answer.as_ref().map(|f| f["rationale"].clone()).unwrap_or(Value::Null);
    ep.send(
        &s3,
        &s4,
        MessageKind::Config,
        json!({"algorithm": algorithm, "clients": clients, "seed": ep.settings.seed}),
    );
    let launcher = ep.converse(s4.clone(), Phase::FederatedTraining, ep.bus.drain(&s4));
    let receipt = launcher
        .conversation
        .tool_turns()
        .filter(|t| t.tool.as_deref() == Some("launch_training"))
        .last()
        .map(|t| t.result["data"].clone())
        .unwrap_or(Value::Null);
    let run_id = launcher.final_answer.as_ref().map(|f| f["run_id"].clone()).unwrap_or(Value::Null);
    if receipt["config_valid"] == true {
        for c in &clients {
            let c1 = Role::client(RoleKind::C1, c.as_str());
            ep.send(&s4, &c1, MessageKind::Status, json!({"run_id": run_id, "algorithm": algorithm}));
            ep.bus.drain(&c1);
            ep.send(&c1, &s4, MessageKind::Status, json!({"acknowledged": true}));
        }
        ep.bus.drain(&s4);
    }
    let failure = first_failure([&selector, &launcher]);
    (
        failure,
        json!({"algorithm": algorithm, "rationale": rationale, "run_id": run_id, "receipt": receipt}),
    )
}
