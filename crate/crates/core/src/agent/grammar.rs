//! Action grammar: one fenced ```action block holding either a tool call
//! `{"tool": ..., "args": {...}}` or a final result `{"final": ...}`.

use crate::trace::ParseFailureKind;
use serde_json::{Map, Value};

pub const FENCE: &str = "```action";

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Tool { tool: String, args: Value },
    Final(Value),
}

impl Action {
    pub fn render(&self) -> String {
        let body = match self {
            Action::Tool { tool, args } => serde_json::json!({"tool": tool, "args": args}),
            Action::Final(v) => serde_json::json!({"final": v}),
        };
        format!("{FENCE}\n{body}\n```")
    }
}

/// Extracts the single action of a reply.
pub fn parse_action(text: &str) -> Result<Action, (ParseFailureKind, String)> {
    let blocks: Vec<&str> = text.match_indices(FENCE).map(|(i, _)| &text[i + FENCE.len()..]).collect();
    match blocks.len() {
        0 => return Err((ParseFailureKind::NoAction, "no ```action block found".into())),
        1 => {}
        n => return Err((ParseFailureKind::Malformed, format!("{n} action blocks; send exactly one"))),
    }
    let body = blocks[0];
    let end = body
        .find("```")
        .ok_or((ParseFailureKind::Malformed, "action block is not closed".to_string()))?;
    let value: Value = serde_json::from_str(body[..end].trim())
        .map_err(|e| (ParseFailureKind::Malformed, format!("action is not valid JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err((ParseFailureKind::Malformed, "action must be a JSON object".into()));
    };
    if let Some(f) = obj.remove("final") {
        if !obj.is_empty() {
            return Err((ParseFailureKind::Malformed, "final action carries extra keys".into()));
        }
        return Ok(Action::Final(f));
    }
    let tool = match obj.remove("tool") {
        Some(Value::String(s)) => s,
        _ => return Err((ParseFailureKind::Malformed, "action needs a string `tool` or a `final`".into())),
    };
    let args = obj.remove("args").unwrap_or(Value::Object(Map::new()));
    if !obj.is_empty() {
        return Err((ParseFailureKind::Malformed, "tool action carries extra keys".into()));
    }
    Ok(Action::Tool { tool, args })
}
