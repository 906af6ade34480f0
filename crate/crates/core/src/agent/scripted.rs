//! Scripted cores. Each script re-runs from the start on every turn,
//! consuming recorded tool results in order and emitting the first call
//! that has no result yet.

use super::core::{AgentCore, CoreError, CoreKind, CoreReply, Conversation, Usage};
use super::grammar::Action;
use crate::protocol::{Role, RoleKind};
use crate::vocab::{Modality, TaskKind};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

/// Launch parameters the scripts use.
pub const LAUNCH_DEFAULTS: [(&str, f64); 8] = [
    ("rounds", 20.0),
    ("local_epochs", 1.0),
    ("batch_size", 16.0),
    ("learning_rate", 0.1),
    ("sample_fraction", 1.0),
    ("mu", 0.01),
    ("lambda", 1.0),
    ("hidden_width", 0.0),
];

/// Source of decision flips. The oracle never flips.
trait Flips {
    fn unit(&self, role: &Role, key: &str) -> Option<f64>;

    fn flip(&self, role: &Role, key: &str) -> bool {
        self.unit(role, key).is_some()
    }
}

struct Never;

impl Flips for Never {
    fn unit(&self, _: &Role, _: &str) -> Option<f64> {
        None
    }
}

/// Uniform in [0,1) from a hash of (seed, role, key).
pub fn decision_unit(seed: u64, role: &Role, key: &str) -> f64 {
    let h = Sha256::digest(format!("{seed}|{role}|{key}").as_bytes());
    let v = u64::from_le_bytes(h[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

struct Noise {
    p: f64,
    seed: u64,
}

impl Flips for Noise {
    /// On a flip returns a second, independent unit for choosing the error.
    fn unit(&self, role: &Role, key: &str) -> Option<f64> {
        (decision_unit(self.seed, role, key) < self.p).then(|| decision_unit(self.seed, role, &format!("{key}#how")))
    }
}

type Step<T> = Result<T, Action>;

struct Cursor<'c> {
    results: Vec<&'c Value>,
    next: usize,
}

impl<'c> Cursor<'c> {
    fn new(conv: &'c Conversation) -> Self {
        Self {
            results: conv.tool_turns().map(|t| &t.result).collect(),
            next: 0,
        }
    }

    /// The recorded result of this call, or the call itself when it has not
    /// been made yet.
    fn call(&mut self, tool: &str, args: Value) -> Step<&'c Value> {
        match self.results.get(self.next) {
            Some(r) => {
                self.next += 1;
                Ok(r)
            }
            None => Err(Action::Tool {
                tool: tool.to_string(),
                args,
            }),
        }
    }
}

fn ok(r: &Value) -> bool {
    r["ok"].as_bool().unwrap_or(false)
}

fn strs(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

/// First payload of the given message kind in the briefing.
fn message<'c>(conv: &'c Conversation, kind: &str) -> Option<&'c Value> {
    conv.briefing
        .as_array()?
        .iter()
        .find(|m| m["kind"] == kind)
        .map(|m| &m["payload"])
}

fn messages<'c>(conv: &'c Conversation, kind: &str) -> Vec<&'c Value> {
    conv.briefing
        .as_array()
        .map(|a| a.iter().filter(|m| m["kind"] == kind).map(|m| &m["payload"]).collect())
        .unwrap_or_default()
}

fn parse_task_kind(text: &str) -> Option<TaskKind> {
    let t = text.to_ascii_lowercase();
    [
        ("classif", TaskKind::Classification),
        ("segment", TaskKind::Segmentation),
        ("detect", TaskKind::Detection),
        ("regress", TaskKind::Regression),
    ]
    .into_iter()
    .find(|(k, _)| t.contains(k))
    .map(|(_, kind)| kind)
}

fn s1(conv: &Conversation, f: &dyn Flips) -> Step<Value> {
    let role = &conv.role;
    let task = message(conv, "query").cloned().unwrap_or(Value::Null);
    let text = task["task"].as_str().unwrap_or_default();
    let lower = text.to_ascii_lowercase();
    let modality = Modality::ALL.into_iter().find(|m| lower.contains(m.as_str()));
    let mut labels = strs(&task["target_classes"]);
    if f.flip(role, "labels") && !labels.is_empty() {
        labels.pop();
    }
    Ok(json!({
        "modality": modality.map(Modality::as_str),
        "task_kind": parse_task_kind(text).map(TaskKind::as_str),
        "labels": labels,
        "objective": text,
    }))
}

fn fits(card: &Value, query: &Value) -> bool {
    !query["modality"].is_null() && card["modality"] == query["modality"] && card["task_kind"] == query["task_kind"]
}

fn c1(conv: &Conversation, f: &dyn Flips, cur: &mut Cursor<'_>) -> Step<Value> {
    let role = &conv.role;
    let client = role.client.clone().unwrap_or_default();
    let query = message(conv, "query").cloned().unwrap_or(Value::Null);
    let card = cur.call("read_datacard", json!({"client": client}))?;
    let mut offers = Vec::new();
    for d in card["data"]["datasets"].as_array().into_iter().flatten() {
        let name = d["dataset_name"].as_str().unwrap_or_default();
        if fits(d, &query) && !f.flip(role, &format!("omit:{name}")) {
            offers.push(json!({
                "name": name,
                "modality": d["modality"],
                "task_kind": d["task_kind"],
                "labels": d["label_set"],
            }));
        }
    }
    Ok(json!({ "datasets": offers }))
}

fn s2(conv: &Conversation, f: &dyn Flips) -> Step<Value> {
    let role = &conv.role;
    let query = message(conv, "config").map(|c| c["query"].clone()).unwrap_or(Value::Null);
    let mut selected = Vec::new();
    for offer in messages(conv, "dataset_offer") {
        let client = offer["client"].as_str().unwrap_or_default();
        let fitting: Vec<&str> = offer["datasets"]
            .as_array()
            .into_iter()
            .flatten()
            .filter(|d| fits(d, &query))
            .filter_map(|d| d["name"].as_str())
            .collect();
        if !fitting.is_empty() ^ f.flip(role, &format!("select:{client}")) {
            let why = if fitting.is_empty() {
                "client offered no dataset for the query".to_string()
            } else {
                format!("offers {} matching the queried modality and task", fitting.join(", "))
            };
            selected.push(json!({"client": client, "datasets": fitting, "justification": why}));
        }
    }
    Ok(json!({ "selected": selected }))
}

fn c2(conv: &Conversation, f: &dyn Flips, cur: &mut Cursor<'_>) -> Step<Value> {
    let role = &conv.role;
    let config = message(conv, "config").cloned().unwrap_or(Value::Null);
    let profile = &config["profile"];
    let datasets = strs(&config["datasets"]);
    let mut processed = Vec::new();
    for d in &datasets {
        let mut stat = cur.call("stat_dataset", json!({"dataset": d}))?;
        if !ok(stat) {
            continue;
        }
        if stat["data"]["layout"] != "nested" && !f.flip(role, &format!("restructure:{d}")) {
            let mut plan = Map::new();
            for key in ["class_folders", "flat_prefixes"] {
                for c in stat["data"][key].as_object().into_iter().flatten().map(|(c, _)| c) {
                    plan.insert(c.clone(), Value::String(c.clone()));
                }
            }
            cur.call("restructure_by_class", json!({"dataset": d, "plan": plan}))?;
            stat = cur.call("stat_dataset", json!({"dataset": d}))?;
        }
        let mut remove: BTreeSet<String> = BTreeSet::new();
        if !f.flip(role, &format!("dedup:{d}")) {
            let r = cur.call("detect_duplicates", json!({"dataset": d}))?;
            remove.extend(strs(&r["data"]["remove"]));
        }
        if !f.flip(role, &format!("outliers:{d}")) {
            let r = cur.call("detect_outliers", json!({"dataset": d}))?;
            remove.extend(strs(&r["data"]["off_modality"]));
            remove.extend(strs(&r["data"]["suspect_labels"]));
        }
        if !f.flip(role, &format!("junk:{d}")) {
            remove.extend(strs(&stat["data"]["non_image_files"]));
        }
        if !remove.is_empty() {
            cur.call("remove_files", json!({"paths": remove}))?;
        }
        if !f.flip(role, &format!("normalize:{d}")) {
            cur.call(
                "normalize_images",
                json!({
                    "dataset": d, "format": profile["format"], "width": profile["width"],
                    "height": profile["height"], "mean": profile["mean"], "std": profile["std"],
                }),
            )?;
        }
        processed.push(d.clone());
    }
    Ok(json!({ "processed": processed }))
}

/// Coarse target of a local class name from the known vocabularies.
fn coarse_target(label: &str, schema: &[String]) -> Option<String> {
    if schema.iter().any(|s| s == label) {
        return Some(label.to_string());
    }
    Modality::ALL
        .into_iter()
        .filter_map(|m| m.vocabulary().coarse_of(label))
        .find(|c| schema.iter().any(|s| s == c))
        .map(str::to_string)
}

fn c3(conv: &Conversation, f: &dyn Flips, cur: &mut Cursor<'_>) -> Step<Value> {
    let role = &conv.role;
    let config = message(conv, "config").cloned().unwrap_or(Value::Null);
    let schema = strs(&config["target_schema"]);
    let mut table = Map::new();
    for d in strs(&config["datasets"]) {
        let r = cur.call("enumerate_labels", json!({"dataset": d}))?;
        if !ok(r) {
            continue;
        }
        let mut rows = Map::new();
        let mut physical = BTreeMap::new();
        for label in strs(&r["data"]["labels"]) {
            let Some(target) = coarse_target(&label, &schema) else {
                continue;
            };
            let others: Vec<&String> = schema.iter().filter(|s| **s != target).collect();
            let mut targets = vec![target.clone()];
            if let Some(u) = f.unit(role, &format!("map:{d}:{label}")) {
                let other = others.get(((u * 7.0) as usize) % others.len().max(1)).map(|s| (*s).clone());
                match ((u * 3.0) as usize, other) {
                    (0, Some(o)) => targets = vec![o],
                    (1, Some(o)) => targets.push(o),
                    _ => targets.clear(),
                }
            }
            if let Some(first) = targets.first() {
                physical.insert(label.clone(), Value::String(first.clone()));
            }
            rows.insert(label, json!(targets));
        }
        if !physical.is_empty() {
            cur.call("apply_label_mapping", json!({"dataset": d, "mapping": physical}))?;
        }
        table.insert(d, Value::Object(rows));
    }
    Ok(json!({ "mappings": table }))
}

/// Registry tags whose words all occur in the preference text.
fn matched_tags(tags: &[String], prefs: &str) -> Vec<String> {
    let lower = prefs.to_ascii_lowercase().replace('-', " ");
    tags.iter()
        .filter(|t| t.split('_').all(|w| lower.contains(w)))
        .cloned()
        .collect()
}

fn s3(conv: &Conversation, f: &dyn Flips, cur: &mut Cursor<'_>) -> Step<Value> {
    let role = &conv.role;
    let config = message(conv, "config").cloned().unwrap_or(Value::Null);
    let prefs = config["fl_preferences"].as_str().unwrap_or_default();
    let r = cur.call("query_algorithm_registry", json!({}))?;
    let algos: Vec<&Value> = r["data"]["algorithms"].as_array().map(|a| a.iter().collect()).unwrap_or_default();
    let executable: Vec<&Value> = algos.iter().copied().filter(|a| a["executable"] == true).collect();
    let fitting = |a: &Value| -> Vec<String> { matched_tags(&strs(&a["tags"]), prefs) };
    let any_tag = algos.iter().any(|a| !fitting(a).is_empty());
    let suits = |a: &Value| if any_tag { !fitting(a).is_empty() } else { a["family"] == "classical" };
    let wrong = f.flip(role, "algorithm");
    let pick = executable.iter().find(|a| suits(a) != wrong).or(executable.first());
    let Some(pick) = pick else {
        return Ok(json!({"algorithm": "", "rationale": "registry lists no executable algorithm"}));
    };
    let id = pick["id"].as_str().unwrap_or_default();
    let rationale = if any_tag {
        format!("{id} carries tags {} requested by the preferences", fitting(pick).join(", "))
    } else {
        format!("no stated preference; {id} is an executable classical method")
    };
    Ok(json!({"algorithm": id, "rationale": rationale}))
}

fn s4(conv: &Conversation, f: &dyn Flips, cur: &mut Cursor<'_>) -> Step<Value> {
    let role = &conv.role;
    let config = message(conv, "config").cloned().unwrap_or(Value::Null);
    let mut args = Map::new();
    args.insert("algorithm".into(), config["algorithm"].clone());
    for (k, v) in LAUNCH_DEFAULTS {
        let val = if v.fract() == 0.0 && !matches!(k, "learning_rate" | "sample_fraction" | "mu" | "lambda") {
            json!(v as u64)
        } else {
            json!(v)
        };
        args.insert(k.into(), val);
    }
    args.insert("seed".into(), json!(config["seed"].as_u64().unwrap_or(0)));
    args.insert("clients".into(), config["clients"].clone());
    if let Some(u) = f.unit(role, "launch") {
        let keys: Vec<String> = args.keys().cloned().collect();
        let k = &keys[((u * keys.len() as f64) as usize).min(keys.len() - 1)];
        args.remove(k);
    }
    let r = cur.call("launch_training", Value::Object(args))?;
    Ok(json!({"run_id": r["data"]["run_id"].as_str().unwrap_or_default()}))
}

fn script(conv: &Conversation, f: &dyn Flips) -> Action {
    let mut cur = Cursor::new(conv);
    let out = match conv.role.kind {
        RoleKind::S1 => s1(conv, f),
        RoleKind::C1 => c1(conv, f, &mut cur),
        RoleKind::S2 => s2(conv, f),
        RoleKind::C2 => c2(conv, f, &mut cur),
        RoleKind::C3 => c3(conv, f, &mut cur),
        RoleKind::S3 => s3(conv, f, &mut cur),
        RoleKind::S4 => s4(conv, f, &mut cur),
        RoleKind::User => Ok(json!({})),
    };
    match out {
        Ok(v) => Action::Final(v),
        Err(a) => a,
    }
}

fn reply(action: &Action) -> CoreReply {
    CoreReply {
        text: action.render(),
        usage: Usage::default(),
    }
}

/// Plays each role from the task, briefing and detector outputs alone.
#[derive(Debug, Clone, Default)]
pub struct OracleCore;

impl OracleCore {
    pub fn new() -> Self {
        Self
    }
}

impl AgentCore for OracleCore {
    fn name(&self) -> &str {
        "oracle"
    }

    fn kind(&self) -> CoreKind {
        CoreKind::ScriptedOracle
    }

    fn respond(&self, conv: &Conversation) -> Result<CoreReply, CoreError> {
        Ok(reply(&script(conv, &Never)))
    }
}

/// The oracle with each atomic decision flipped with probability `p`.
/// Flips are keyed by (seed, role, decision), so the flip set at a lower
/// `p` is contained in the flip set at a higher one.
#[derive(Debug, Clone)]
pub struct NoisyCore {
    pub p: f64,
    pub seed: u64,
    name: String,
}

impl NoisyCore {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p: p.clamp(0.0, 1.0),
            seed,
            name: format!("noisy(p={p})"),
        }
    }
}

impl AgentCore for NoisyCore {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> CoreKind {
        CoreKind::ScriptedNoisy
    }

    fn respond(&self, conv: &Conversation) -> Result<CoreReply, CoreError> {
        let noise = Noise {
            p: self.p,
            seed: self.seed,
        };
        if conv.turns.is_empty() && noise.flip(&conv.role, "ponder") {
            return Ok(CoreReply {
                text: "Let me first think through what this step requires before acting.".into(),
                usage: Usage::default(),
            });
        }
        Ok(reply(&script(conv, &noise)))
    }
}
