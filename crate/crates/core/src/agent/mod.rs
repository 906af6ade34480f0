//! Role agents: cores, the action grammar, prompt templates and the
//! four-phase episode loop.

pub mod core;
pub mod grammar;
pub mod prompts;
pub mod remote;
pub mod runtime;
pub mod scripted;

pub use self::core::{AgentCore, ChatMessage, CoreError, CoreKind, CoreReply, Conversation, Turn, Usage};
pub use grammar::{parse_action, Action};
pub use runtime::{run_episode, CoreSet, EpisodeResult, EpisodeSettings, PhaseOutcome};
pub use scripted::{NoisyCore, OracleCore};
