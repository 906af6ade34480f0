//! Episode trace: an append-only sequence of events, persisted as
//! newline-delimited JSON with one record per line.

use crate::fedcore::RoundLog;
use crate::protocol::{AccessMode, AgentMessage, Phase, Role};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    EpisodeStart {
        schema_version: u32,
        run_index: usize,
        seed: u64,
        guidance: String,
        /// role kind -> "name (kind)"
        cores: Value,
    },
    PhaseStart {
        phase: Phase,
    },
    CoreTurn {
        role: Role,
        phase: Phase,
        turn: usize,
        text: String,
        prompt_tokens: u64,
        completion_tokens: u64,
    },
    ToolCall {
        role: Role,
        tool: String,
        args: Value,
    },
    ToolResult {
        role: Role,
        tool: String,
        ok: bool,
        summary: String,
        data: Value,
        error_kind: Option<String>,
    },
    /// A reply that did not yield a usable action.
    ParseFailure {
        role: Role,
        kind: ParseFailureKind,
        detail: String,
    },
    Message(AgentMessage),
    GuardRejection {
        sender: Role,
        recipient: Role,
        reason: String,
    },
    Audit {
        role: Role,
        path: String,
        mode: AccessMode,
        reason: String,
    },
    AgentEnd {
        role: Role,
        phase: Phase,
        #[serde(rename = "final")]
        final_answer: Option<Value>,
        failure: Option<String>,
        turns: usize,
        tool_calls: usize,
        tokens: u64,
    },
    TrainingStart {
        run_id: String,
        algorithm: String,
        clients: Vec<String>,
    },
    Round(RoundLog),
    PhaseEnd {
        phase: Phase,
        failure: Option<String>,
        elapsed_seconds: f64,
        tokens: u64,
    },
    EpisodeEnd {
        tokens: u64,
        elapsed_seconds: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureKind {
    /// Free-form reasoning without any action block.
    NoAction,
    /// An action block that does not parse.
    Malformed,
    UnknownTool,
    ToolNotAssigned,
    InvalidFinal,
}

/// Cheaply clonable handle to an in-memory event list.
#[derive(Debug, Clone, Default)]
pub struct TraceSink {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceSink {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn record(&self, event: TraceEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_ndjson(&self, path: &Path) -> std::io::Result<()> {
        write_ndjson(path, &self.events())
    }
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
