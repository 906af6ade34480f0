//! Federated workspace model, server/client message bus and privacy guard.
//!
//! Agents only ever exchange [`AgentMessage`]s. Every payload is scanned by
//! [`scan_payload`] before delivery and every route is checked against the
//! phase topology; violations are logged and returned as errors.

use crate::image::{CanonicalProfile, IMAGE_MAGICS};
use crate::trace::{TraceEvent, TraceSink};
use crate::vocab::{Modality, TaskKind};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    FineGrained,
    GoalOriented,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FineGrained => "fine_grained",
            Self::GoalOriented => "goal_oriented",
        }
    }
}

impl FromStr for GuidanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fine_grained" | "fine" => Ok(Self::FineGrained),
            "goal_oriented" | "goal" => Ok(Self::GoalOriented),
            other => Err(format!("unknown guidance mode `{other}`")),
        }
    }
}

/// The user-defined task an episode must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub modality: Modality,
    pub task_kind: TaskKind,
    pub objective: String,
    /// Ordered coarse class names the harmonized data must use.
    pub target_schema: Vec<String>,
    pub guidance_mode: GuidanceMode,
    #[serde(default)]
    pub fl_preferences: String,
    #[serde(default)]
    pub canonical_profile: CanonicalProfile,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.task_kind == TaskKind::Classification && self.target_schema.len() < 2 {
            return Err("classification tasks need at least two target classes".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.target_schema.iter().all(|c| seen.insert(c)) {
            return Err("target schema repeats a class".into());
        }
        Ok(())
    }
}

/// Phases of an episode in their fixed execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ClientSelection,
    DataPreprocessing,
    LabelHarmonization,
    FederatedTraining,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Self::ClientSelection,
        Self::DataPreprocessing,
        Self::LabelHarmonization,
        Self::FederatedTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClientSelection => "client_selection",
            Self::DataPreprocessing => "data_preprocessing",
            Self::LabelHarmonization => "label_harmonization",
            Self::FederatedTraining => "federated_training",
        }
    }

    /// Documented (sender, recipient) pairs for this phase.
    pub fn topology(self) -> &'static [(RoleKind, RoleKind)] {
        use RoleKind::*;
        match self {
            Self::ClientSelection => &[(User, S1), (S1, C1), (C1, S2), (S2, C1), (S1, S2)],
            Self::DataPreprocessing => &[(S2, C2), (C2, S2)],
            Self::LabelHarmonization => &[(S2, C3), (C3, S2), (C2, C3)],
            Self::FederatedTraining => &[(S2, S3), (S3, S4), (S4, C1), (C1, S4)],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoleKind {
    S1,
    S2,
    S3,
    S4,
    C1,
    C2,
    C3,
    #[serde(rename = "user")]
    User,
}

impl RoleKind {
    pub const AGENTS: [RoleKind; 7] = [
        Self::S1,
        Self::S2,
        Self::S3,
        Self::S4,
        Self::C1,
        Self::C2,
        Self::C3,
    ];

    pub fn is_client(self) -> bool {
        matches!(self, Self::C1 | Self::C2 | Self::C3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::C3 => "C3",
            Self::User => "user",
        }
    }
}

impl FromStr for RoleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "S1" | "s1" => Self::S1,
            "S2" | "s2" => Self::S2,
            "S3" | "s3" => Self::S3,
            "S4" | "s4" => Self::S4,
            "C1" | "c1" => Self::C1,
            "C2" | "c2" => Self::C2,
            "C3" | "c3" => Self::C3,
            "user" | "USER" => Self::User,
            _ => return Err(format!("unknown role `{s}`")),
        })
    }
}

/// A concrete agent: server roles are unique, client roles are bound to a client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Role {
    pub kind: RoleKind,
    pub client: Option<String>,
}

impl Role {
    pub fn server(kind: RoleKind) -> Self {
        debug_assert!(!kind.is_client());
        Self { kind, client: None }
    }

    pub fn client(kind: RoleKind, client: impl Into<String>) -> Self {
        debug_assert!(kind.is_client());
        Self {
            kind,
            client: Some(client.into()),
        }
    }

    pub fn user() -> Self {
        Self {
            kind: RoleKind::User,
            client: None,
        }
    }

    pub fn is_client(&self) -> bool {
        self.kind.is_client()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.client {
            Some(c) => write!(f, "{}@{}", self.kind.as_str(), c),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('@') {
            Some((k, c)) => {
                let kind: RoleKind = k.parse()?;
                if !kind.is_client() || c.is_empty() {
                    return Err(format!("invalid client role `{s}`"));
                }
                Ok(Self::client(kind, c))
            }
            None => {
                let kind: RoleKind = s.parse()?;
                if kind.is_client() {
                    return Err(format!("client role `{s}` needs a client id"));
                }
                Ok(Self { kind, client: None })
            }
        }
    }
}

impl Serialize for Role {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Query,
    DatasetOffer,
    Approval,
    Config,
    Status,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub seq: u64,
    pub sender: Role,
    pub recipient: Role,
    pub kind: MessageKind,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("forbidden payload: {0}")]
    ForbiddenPayload(String),
    #[error("forbidden route {sender} -> {recipient} during {phase}")]
    ForbiddenRoute {
        sender: String,
        recipient: String,
        phase: String,
    },
}

/// Longest string a payload may carry.
pub const MAX_PAYLOAD_STRING: usize = 2048;
/// Longest array of numbers before it is treated as a parameter vector.
pub const MAX_NUMERIC_ARRAY: usize = 64;
/// Longest unbroken run of base64/hex alphabet characters allowed in a string.
pub const MAX_ENCODED_RUN: usize = 96;
/// Budget of binary-looking token characters summed over every string.
pub const MAX_ENCODED_TOTAL: usize = 64;
const MAX_DEPTH: usize = 16;
const MAX_ARRAY: usize = 512;
const MAX_KEYS: usize = 256;

/// Rejects payloads carrying raw bytes, image data or parameter vectors.
pub fn scan_payload(payload: &Value) -> Result<(), ProtocolError> {
    scan(payload, 0)?;
    let mut totals = Totals::default();
    totals.visit(payload);
    if totals.numbers > MAX_NUMERIC_ARRAY {
        return Err(ProtocolError::ForbiddenPayload(format!(
            "{} numbers in one payload (parameter vector or byte blob)",
            totals.numbers
        )));
    }
    if totals.encoded > MAX_ENCODED_TOTAL {
        return Err(ProtocolError::ForbiddenPayload(format!(
            "{} characters of encoded binary across strings",
            totals.encoded
        )));
    }
    Ok(())
}

/// Payload-wide counters that catch blobs split into many small pieces.
#[derive(Default)]
struct Totals {
    numbers: usize,
    encoded: usize,
}

impl Totals {
    fn visit(&mut self, v: &Value) {
        match v {
            Value::Number(_) => self.numbers += 1,
            Value::String(s) => self.encoded += encoded_chars(s),
            Value::Array(items) => items.iter().for_each(|x| self.visit(x)),
            Value::Object(map) => {
                for (k, x) in map {
                    self.encoded += encoded_chars(k);
                    self.visit(x);
                }
            }
            _ => {}
        }
    }
}

/// Characters of `s` in binary-looking tokens: hex byte pairs, longer hex or
/// decimal tokens that are not identifiers like `c01`, and long mixed-case
/// base64 runs.
fn encoded_chars(s: &str) -> usize {
    let hexish: usize = s
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| {
            let stem = t.trim_end_matches(|c: char| c.is_ascii_digit());
            let identifier = !stem.is_empty() && stem.len() < t.len() && stem.bytes().all(|b| b.is_ascii_alphabetic());
            let byte_pair = t.len() == 2;
            t.len() >= 2
                && t.bytes().all(|b| b.is_ascii_hexdigit())
                && (byte_pair || (!identifier && t.bytes().any(|b| b.is_ascii_digit())))
        })
        .map(str::len)
        .sum();
    let base64ish: usize = s
        .split(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '+' | '/' | '=')))
        .filter(|t| {
            t.len() >= 16
                && t.bytes().any(|b| b.is_ascii_uppercase())
                && t.bytes().any(|b| b.is_ascii_lowercase())
                && t.bytes().any(|b| b.is_ascii_digit() || b == b'+' || b == b'/')
        })
        .map(str::len)
        .sum();
    hexish + base64ish
}

fn scan(v: &Value, depth: usize) -> Result<(), ProtocolError> {
    let deny = |why: String| Err(ProtocolError::ForbiddenPayload(why));
    if depth > MAX_DEPTH {
        return deny("payload nested too deeply".into());
    }
    match v {
        Value::Null | Value::Bool(_) => Ok(()),
        Value::Number(n) => {
            if n.as_f64().is_some_and(f64::is_finite) {
                Ok(())
            } else {
                deny("non-finite number".into())
            }
        }
        Value::String(s) => scan_string(s),
        Value::Array(items) => {
            if items.len() > MAX_ARRAY {
                return deny(format!("array of {} items", items.len()));
            }
            let numeric = items.iter().filter(|x| x.is_number()).count();
            if numeric > MAX_NUMERIC_ARRAY {
                return deny(format!("numeric array of {numeric} items (parameter vector or byte blob)"));
            }
            items.iter().try_for_each(|x| scan(x, depth + 1))
        }
        Value::Object(map) => {
            if map.len() > MAX_KEYS {
                return deny(format!("object with {} keys", map.len()));
            }
            for (k, x) in map {
                scan_string(k)?;
                scan(x, depth + 1)?;
            }
            Ok(())
        }
    }
}

fn scan_string(s: &str) -> Result<(), ProtocolError> {
    let deny = |why: String| Err(ProtocolError::ForbiddenPayload(why));
    if s.len() > MAX_PAYLOAD_STRING {
        return deny(format!("string of {} bytes", s.len()));
    }
    if s.chars().any(|c| c.is_control() && !matches!(c, '\n' | '\t' | '\r')) {
        return deny("control characters in string".into());
    }
    if s.contains('\u{FFFD}') {
        return deny("undecodable bytes in string".into());
    }
    let bytes = s.as_bytes();
    if IMAGE_MAGICS
        .iter()
        .any(|m| bytes.windows(m.len()).any(|w| w == *m))
    {
        return deny("image container magic in string".into());
    }
    let mut run = 0usize;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || matches!(c, '+' | '/' | '=') {
            run += 1;
            if run > MAX_ENCODED_RUN {
                return deny("encoded binary run in string".into());
            }
        } else {
            run = 0;
        }
    }
    Ok(())
}

/// Whether `sender` may address `recipient` at all (independent of phase).
pub fn route_allowed(sender: &Role, recipient: &Role) -> bool {
    match (sender.kind, recipient.kind) {
        (RoleKind::User, r) => r == RoleKind::S1,
        (_, RoleKind::User) => false,
        _ if sender.is_client() && recipient.is_client() => {
            sender.client == recipient.client && sender.kind != recipient.kind
        }
        _ => sender != recipient,
    }
}

/// In-process ordered message bus with one FIFO inbox per recipient.
pub struct MessageBus {
    inner: Mutex<BusState>,
    trace: TraceSink,
}

struct BusState {
    phase: Phase,
    next_seq: u64,
    inboxes: BTreeMap<Role, VecDeque<AgentMessage>>,
    log: Vec<AgentMessage>,
}

impl MessageBus {
    pub fn new(trace: TraceSink) -> Self {
        Self {
            inner: Mutex::new(BusState {
                phase: Phase::ClientSelection,
                next_seq: 1,
                inboxes: BTreeMap::new(),
                log: Vec::new(),
            }),
            trace,
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        self.inner.lock().unwrap().phase = phase;
    }

    pub fn send(
        &self,
        sender: &Role,
        recipient: &Role,
        kind: MessageKind,
        payload: Value,
    ) -> Result<Receipt, ProtocolError> {
        let mut st = self.inner.lock().unwrap();
        let phase = st.phase;
        let topology_ok = phase.topology().contains(&(sender.kind, recipient.kind));
        let verdict = if !route_allowed(sender, recipient) || !topology_ok {
            Err(ProtocolError::ForbiddenRoute {
                sender: sender.to_string(),
                recipient: recipient.to_string(),
                phase: phase.to_string(),
            })
        } else {
            scan_payload(&payload)
        };
        if let Err(e) = verdict {
            self.trace.record(TraceEvent::GuardRejection {
                sender: sender.clone(),
                recipient: recipient.clone(),
                reason: e.to_string(),
            });
            return Err(e);
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let msg = AgentMessage {
            seq,
            sender: sender.clone(),
            recipient: recipient.clone(),
            kind,
            payload,
        };
        self.trace.record(TraceEvent::Message(msg.clone()));
        st.log.push(msg.clone());
        st.inboxes.entry(recipient.clone()).or_default().push_back(msg);
        Ok(Receipt { seq })
    }

    pub fn receive(&self, role: &Role) -> Option<AgentMessage> {
        self.inner
            .lock()
            .unwrap()
            .inboxes
            .get_mut(role)
            .and_then(VecDeque::pop_front)
    }

    pub fn drain(&self, role: &Role) -> Vec<AgentMessage> {
        self.inner
            .lock()
            .unwrap()
            .inboxes
            .get_mut(role)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn log(&self) -> Vec<AgentMessage> {
        self.inner.lock().unwrap().log.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Access {
    /// Normalized workspace-relative path.
    Allow(PathBuf),
    Deny(String),
}

impl Access {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Access::Allow(_))
    }
}

/// The slice of the workspace a role may touch, as workspace-relative roots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceView {
    pub role: Role,
    pub readable_roots: Vec<PathBuf>,
    pub writable_roots: Vec<PathBuf>,
}

impl WorkspaceView {
    pub fn for_role(role: &Role) -> Self {
        let (readable, writable) = match (role.kind, &role.client) {
            (RoleKind::C1, Some(c)) => (vec![client_root(c)], vec![]),
            (RoleKind::C2 | RoleKind::C3, Some(c)) => (vec![client_root(c)], vec![client_root(c)]),
            (RoleKind::S1 | RoleKind::S2 | RoleKind::S3 | RoleKind::S4, None) => {
                (vec![PathBuf::from("server")], vec![PathBuf::from("server")])
            }
            _ => (vec![], vec![]),
        };
        Self {
            role: role.clone(),
            readable_roots: readable,
            writable_roots: writable,
        }
    }

    /// Checks `path` (workspace-relative, or absolute under `root`).
    /// Escapes and out-of-view paths are denied and audited.
    pub fn check_access(&self, root: &Path, path: &str, mode: AccessMode, trace: &TraceSink) -> Access {
        let decision = match normalize_path(root, path) {
            Err(why) => Access::Deny(why),
            Ok(rel) => {
                let roots = match mode {
                    AccessMode::Read => &self.readable_roots,
                    AccessMode::Write => &self.writable_roots,
                };
                if roots.iter().any(|r| rel.starts_with(r)) {
                    Access::Allow(rel)
                } else {
                    Access::Deny(format!("{} is outside the {mode:?} roots of {}", rel.display(), self.role))
                }
            }
        };
        if let Access::Deny(reason) = &decision {
            trace.record(TraceEvent::Audit {
                role: self.role.clone(),
                path: path.chars().take(256).collect(),
                mode,
                reason: reason.clone(),
            });
        }
        decision
    }
}

pub fn client_root(client: &str) -> PathBuf {
    Path::new("clients").join(client)
}

/// Lexically normalizes `path` to a workspace-relative path, refusing any
/// form that escapes the workspace.
pub fn normalize_path(root: &Path, path: &str) -> Result<PathBuf, String> {
    if path.is_empty() || path.contains('\0') {
        return Err("empty or NUL-containing path".into());
    }
    let p = Path::new(path);
    let rel: &Path = if p.is_absolute() {
        p.strip_prefix(root)
            .map_err(|_| format!("absolute path {path} is outside the workspace"))?
    } else {
        p
    };
    let mut out = PathBuf::new();
    for comp in rel.components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return Err(format!("path escape attempt: {path}"));
                }
            }
            Component::RootDir | Component::Prefix(_) => {
                return Err(format!("path escape attempt: {path}"));
            }
        }
    }
    if out.as_os_str().is_empty() {
        return Err("path resolves to the workspace root".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sink() -> TraceSink {
        TraceSink::memory()
    }

    #[test]
    fn query_from_s1_to_client_is_delivered_and_logged() {
        let trace = sink();
        let bus = MessageBus::new(trace.clone());
        let c1 = Role::client(RoleKind::C1, "c01");
        let r = bus
            .send(&Role::server(RoleKind::S1), &c1, MessageKind::Query, json!({"modality": "dermatoscopy"}))
            .unwrap();
        assert_eq!(r.seq, 1);
        let msg = bus.receive(&c1).unwrap();
        assert_eq!(msg.payload["modality"], "dermatoscopy");
        assert_eq!(bus.log().len(), 1);
        assert!(trace.events().iter().any(|e| matches!(e, TraceEvent::Message(_))));
    }

    #[test]
    fn cross_client_route_is_forbidden() {
        let bus = MessageBus::new(sink());
        let err = bus
            .send(
                &Role::client(RoleKind::C1, "c01"),
                &Role::client(RoleKind::C2, "c02"),
                MessageKind::Status,
                json!({}),
            )
            .unwrap_err();
        assert!(matches!(err, ProtocolError::ForbiddenRoute { .. }));
    }

    #[test]
    fn binary_field_is_forbidden() {
        let bus = MessageBus::new(sink());
        let blob: Vec<u8> = (0..4096).map(|i| (i * 31 % 256) as u8).collect();
        let c1 = Role::client(RoleKind::C1, "c01");
        let s1 = Role::server(RoleKind::S1);
        let as_array = json!({"data": blob});
        assert!(matches!(
            bus.send(&s1, &c1, MessageKind::Query, as_array),
            Err(ProtocolError::ForbiddenPayload(_))
        ));
        let as_hex = json!({"data": hex::encode(&blob)});
        assert!(matches!(
            bus.send(&s1, &c1, MessageKind::Query, as_hex),
            Err(ProtocolError::ForbiddenPayload(_))
        ));
        let as_text = json!({"data": String::from_utf8_lossy(&blob).to_string()});
        assert!(bus.send(&s1, &c1, MessageKind::Query, as_text).is_err());
        assert!(bus.log().is_empty());
    }

    #[test]
    fn sequence_numbers_increase() {
        let bus = MessageBus::new(sink());
        let s1 = Role::server(RoleKind::S1);
        let seqs: Vec<u64> = (0..5)
            .map(|i| {
                bus.send(&s1, &Role::client(RoleKind::C1, format!("c{i:02}")), MessageKind::Query, json!({}))
                    .unwrap()
                    .seq
            })
            .collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn phase_topology_restricts_pairs() {
        let bus = MessageBus::new(sink());
        bus.set_phase(Phase::DataPreprocessing);
        let err = bus.send(
            &Role::server(RoleKind::S1),
            &Role::client(RoleKind::C1, "c01"),
            MessageKind::Query,
            json!({}),
        );
        assert!(err.is_err());
        assert!(bus
            .send(&Role::server(RoleKind::S2), &Role::client(RoleKind::C2, "c01"), MessageKind::Approval, json!({}))
            .is_ok());
    }

    #[test]
    fn server_cannot_read_client_images() {
        let trace = sink();
        let root = Path::new("/ws");
        let view = WorkspaceView::for_role(&Role::server(RoleKind::S2));
        let d = view.check_access(root, "clients/c3/derm01/melanoma/img_004", AccessMode::Read, &trace);
        assert!(!d.is_allowed());
    }

    #[test]
    fn client_roles_confined_to_own_client() {
        let trace = sink();
        let root = Path::new("/ws");
        let view = WorkspaceView::for_role(&Role::client(RoleKind::C2, "c3"));
        assert!(view
            .check_access(root, "clients/c3/derm01/nevus/img_0001.pgm", AccessMode::Write, &trace)
            .is_allowed());
        assert!(!view.check_access(root, "clients/c5/derm02", AccessMode::Read, &trace).is_allowed());
        assert!(!view
            .check_access(root, "clients/c3/../c5/derm02", AccessMode::Read, &trace)
            .is_allowed());
        assert!(view.check_access(root, "/ws/clients/c3/x", AccessMode::Read, &trace).is_allowed());
        let c1 = WorkspaceView::for_role(&Role::client(RoleKind::C1, "c3"));
        assert!(!c1.check_access(root, "clients/c3/x", AccessMode::Write, &trace).is_allowed());
    }

    #[test]
    fn escape_attempt_is_denied_and_audited() {
        let trace = sink();
        let view = WorkspaceView::for_role(&Role::client(RoleKind::C2, "c1"));
        let d = view.check_access(Path::new("/ws"), "../../etc/passwd", AccessMode::Read, &trace);
        assert!(!d.is_allowed());
        assert!(trace
            .events()
            .iter()
            .any(|e| matches!(e, TraceEvent::Audit { reason, .. } if reason.contains("escape"))));
    }

    #[test]
    fn split_blobs_are_rejected() {
        let hex: String = (0..600u32).map(|i| format!("{:02x} ", (i * 37 % 256) as u8)).collect();
        assert!(scan_payload(&json!({"note": hex})).is_err());
        let chunks: Vec<Value> = (0..40).map(|_| json!((0..40).collect::<Vec<u32>>())).collect();
        assert!(scan_payload(&json!({"rows": chunks})).is_err());
        assert!(scan_payload(&json!({"raw": String::from_utf8_lossy(&[0xff, 0xfe, b'a'])})).is_err());
        let ok = json!({
            "datasets": ["clients/c01/derm01", "clients/c02/derm02"],
            "justification": "Client c01 offers derm01 with 4 classes and 52 images matching the query.",
            "rounds": 20,
        });
        assert!(scan_payload(&ok).is_ok());
    }

    #[test]
    fn role_string_round_trip() {
        for s in ["S1", "S4", "C2@c07", "user"] {
            assert_eq!(s.parse::<Role>().unwrap().to_string(), s);
        }
        assert!("C2".parse::<Role>().is_err());
        assert!("S1@c01".parse::<Role>().is_err());
    }
}
