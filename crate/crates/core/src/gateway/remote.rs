//! Chat-style HTTP backend.
//!
//! Request body:
//! ```json
//! {"model": "...", "messages": [
//!   {"role": "system", "content": [{"type": "text", "text": "..."}]},
//!   {"role": "user", "content": [
//!     {"type": "text", "text": "..."},
//!     {"type": "image", "media_type": "image/png", "data": "<base64>"}
//!   ]}
//! ]}
//! ```
//! The reply text is read from `response_pointer` when configured, otherwise
//! from the first of a few common locations.

use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ModelBackend, ModelRequest, ModelRole, Prompt, PromptPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub critic_model: String,
    pub synthesizer_model: String,
    pub judge_model: String,
    /// Header carrying the credential.
    pub auth_header: String,
    /// `{credential}` is replaced by the credential value.
    pub auth_template: String,
    /// Environment variable holding the credential.
    pub credential_env: Option<String>,
    pub timeout_secs: u64,
    /// JSON pointer to the reply text in the response body.
    pub response_pointer: Option<String>,
    pub max_tokens: Option<u32>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat".into(),
            critic_model: "vision-large".into(),
            synthesizer_model: "text-fast".into(),
            judge_model: "vision-large".into(),
            auth_header: "Authorization".into(),
            auth_template: "Bearer {credential}".into(),
            credential_env: None,
            timeout_secs: 120,
            response_pointer: None,
            max_tokens: None,
        }
    }
}

impl RemoteConfig {
    pub fn model_for(&self, role: ModelRole) -> &str {
        match role {
            ModelRole::Critic => &self.critic_model,
            ModelRole::Synthesizer => &self.synthesizer_model,
            ModelRole::Judge => &self.judge_model,
        }
    }
}

const FALLBACK_POINTERS: [&str; 6] = [
    "/choices/0/message/content",
    "/content",
    "/candidates/0/content/parts/0/text",
    "/message/content",
    "/output_text",
    "/text",
];

/// Reply text from a response body.
pub fn extract_reply(body: &Value, pointer: Option<&str>) -> Option<String> {
    let as_text = |v: &Value| match v {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let joined: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            (!joined.is_empty()).then(|| joined.join(""))
        }
        _ => None,
    };
    match pointer {
        Some(p) => body.pointer(p).and_then(as_text),
        None => FALLBACK_POINTERS.iter().find_map(|p| body.pointer(p).and_then(as_text)),
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            config,
            client: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Wire body for `prompt`; renders any images that are still pending.
    pub fn request_body(&self, role: ModelRole, prompt: &Prompt) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        for part in &prompt.parts {
            match part {
                PromptPart::Text(t) => content.push(json!({"type": "text", "text": t})),
                PromptPart::Image(img) => {
                    let png = img.png().map_err(|e| BackendError::Fatal(e.to_string()))?;
                    content.push(json!({
                        "type": "image",
                        "media_type": "image/png",
                        "data": base64::engine::general_purpose::STANDARD.encode(png.as_slice()),
                    }));
                }
            }
        }
        let mut body = json!({
            "model": self.config.model_for(role),
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": prompt.system}]},
                {"role": "user", "content": content},
            ],
        });
        if let Some(m) = self.config.max_tokens {
            body["max_tokens"] = json!(m);
        }
        Ok(body)
    }

    /// `(header, value)` if a credential is configured.
    pub fn auth_header(&self) -> Result<Option<(String, String)>, BackendError> {
        let Some(var) = &self.config.credential_env else {
            return Ok(None);
        };
        let credential =
            std::env::var(var).map_err(|_| BackendError::Fatal(format!("credential variable {var} is not set")))?;
        Ok(Some((
            self.config.auth_header.clone(),
            self.config.auth_template.replace("{credential}", &credential),
        )))
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, BackendError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(self.config.timeout_secs))
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| BackendError::Fatal(e.clone()))
    }
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        let body = self.request_body(request.role, request.prompt)?;
        let mut builder = self.client()?.post(&self.config.endpoint).json(&body);
        if let Some((name, value)) = self.auth_header()? {
            builder = builder.header(name, value);
        }
        let response = builder.send().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Unavailable(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("endpoint returned {status}: {text}")));
        }
        let value: Value = response
            .json()
            .map_err(|e| BackendError::Unavailable(format!("unreadable response body: {e}")))?;
        extract_reply(&value, self.config.response_pointer.as_deref())
            .ok_or_else(|| BackendError::Fatal("response body has no reply text".into()))
    }
}
