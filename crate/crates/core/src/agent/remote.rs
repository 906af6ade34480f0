//! Chat-endpoint core speaking the common `chat/completions` JSON shape.

use super::core::{AgentCore, ChatMessage, CoreError, CoreKind, CoreReply, Conversation, Usage};
use serde_json::{json, Value};
use std::time::Duration;

pub const ENV_URL: &str = "ENDPOINT_URL";
pub const ENV_KEY: &str = "ENDPOINT_KEY";
pub const ENV_MODEL: &str = "MODEL_NAME";
pub const ENV_TIMEOUT: &str = "REQUEST_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

/// Sends a role-tagged message list, returns text and token counts.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<CoreReply, CoreError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointSettings {
    pub url: String,
    pub key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
}

impl EndpointSettings {
    /// Reads the endpoint variables, with `overrides` taking precedence.
    pub fn from_env(overrides: &EndpointSettingsOverride) -> Result<Self, CoreError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let url = overrides
            .url
            .clone()
            .or_else(|| var(ENV_URL))
            .ok_or_else(|| CoreError::Config(format!("{ENV_URL} is not set")))?;
        let model = overrides
            .model
            .clone()
            .or_else(|| var(ENV_MODEL))
            .ok_or_else(|| CoreError::Config(format!("{ENV_MODEL} is not set")))?;
        let timeout_secs = match overrides.timeout_secs {
            Some(t) => t,
            None => match var(ENV_TIMEOUT) {
                Some(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CoreError::Config(format!("{ENV_TIMEOUT} must be an integer")))?,
                None => DEFAULT_TIMEOUT_SECS,
            },
        };
        Ok(Self {
            url,
            key: var(ENV_KEY),
            model,
            timeout_secs,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSettingsOverride {
    pub url: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
}

pub struct HttpTransport {
    settings: EndpointSettings,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(settings: EndpointSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs.max(1))))
            .build()
            .into();
        Self { settings, agent }
    }
}

/// Extracts the reply text and usage from a completion response.
pub fn parse_completion(body: &Value) -> Result<CoreReply, CoreError> {
    let text = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| CoreError::Transport("response has no choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(CoreReply {
        text: text.to_string(),
        usage,
    })
}

impl ChatTransport for HttpTransport {
    fn complete(&self, messages: &[ChatMessage]) -> Result<CoreReply, CoreError> {
        let body = json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.settings.url).header("Content-Type", "application/json");
        if let Some(k) = &self.settings.key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| CoreError::Transport(e.to_string()))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| CoreError::Transport(format!("invalid response body: {e}")))?;
        parse_completion(&value)
    }
}

pub struct RemoteCore {
    name: String,
    transport: Box<dyn ChatTransport>,
}

impl RemoteCore {
    pub fn new(name: impl Into<String>, transport: Box<dyn ChatTransport>) -> Self {
        Self {
            name: name.into(),
            transport,
        }
    }

    pub fn http(settings: EndpointSettings) -> Self {
        Self::new(settings.model.clone(), Box::new(HttpTransport::new(settings)))
    }
}

impl AgentCore for RemoteCore {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> CoreKind {
        CoreKind::RemoteLlm
    }

    fn respond(&self, conv: &Conversation) -> Result<CoreReply, CoreError> {
        self.transport.complete(&conv.messages())
    }
}
