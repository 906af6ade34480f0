use crate::protocol::{Phase, Role};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    ScriptedOracle,
    ScriptedNoisy,
    RemoteLlm,
}

impl CoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ScriptedOracle => "scripted_oracle",
            Self::ScriptedNoisy => "scripted_noisy",
            Self::RemoteLlm => "remote_llm",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

/// One core output and what the runtime fed back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub output: String,
    /// Tool name when the output was a valid tool call.
    pub tool: Option<String>,
    /// Tool result, or the parse error record.
    pub result: Value,
    pub ok: bool,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub role: Role,
    pub phase: Phase,
    pub system: String,
    pub opening: String,
    /// Structured form of the incoming messages shown in `opening`.
    pub briefing: Value,
    pub turns: Vec<Turn>,
    pub usage: Usage,
}

impl Conversation {
    /// Role-tagged chat history for text cores.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = vec![
            ChatMessage::new("system", self.system.clone()),
            ChatMessage::new("user", self.opening.clone()),
        ];
        for t in &self.turns {
            out.push(ChatMessage::new("assistant", t.output.clone()));
            out.push(ChatMessage::new("user", t.feedback.clone()));
        }
        out
    }

    /// Results of successful parses that reached a tool, in order.
    pub fn tool_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.tool.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("core misconfigured: {0}")]
    Config(String),
}

/// Decision engine behind a role agent.
pub trait AgentCore: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> CoreKind;
    fn respond(&self, conversation: &Conversation) -> Result<CoreReply, CoreError>;
}
