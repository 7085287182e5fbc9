//! Replays canned responses and records every prompt it is shown.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{BackendError, ModelBackend, ModelRequest, ModelRole, RequestKind, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScriptKey {
    pub role: ModelRole,
    pub step: u32,
    pub strategy: Option<Strategy>,
}

/// A request as the scripted backend saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub role: ModelRole,
    pub kind: RequestKind,
    pub step: u32,
    pub strategy: Option<Strategy>,
    pub attempt: u32,
    pub prompt: String,
}

/// Responses keyed by `(role, step, strategy)`; the n-th entry answers
/// attempt n. Unkeyed requests fall back to a per-role response.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    responses: HashMap<ScriptKey, Vec<String>>,
    fallback: HashMap<ModelRole, String>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues the response for the next attempt of this key.
    pub fn push(&mut self, role: ModelRole, step: u32, strategy: Option<Strategy>, text: impl Into<String>) {
        self.responses
            .entry(ScriptKey { role, step, strategy })
            .or_default()
            .push(text.into());
    }

    pub fn with_response(
        mut self,
        role: ModelRole,
        step: u32,
        strategy: Option<Strategy>,
        text: impl Into<String>,
    ) -> Self {
        self.push(role, step, strategy, text);
        self
    }

    /// Answer for any request of `role` without a keyed response.
    pub fn with_fallback(mut self, role: ModelRole, text: impl Into<String>) -> Self {
        self.fallback.insert(role, text.into());
        self
    }

    pub fn set_fallback(&mut self, role: ModelRole, text: impl Into<String>) {
        self.fallback.insert(role, text.into());
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().map(|c| c.clone()).unwrap_or_default()
    }

    /// Prompts of one role, in call order.
    pub fn prompts(&self, role: ModelRole) -> Vec<String> {
        self.calls()
            .into_iter()
            .filter(|c| c.role == role)
            .map(|c| c.prompt)
            .collect()
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        if let Ok(mut calls) = self.calls.lock() {
            calls.push(RecordedCall {
                role: request.role,
                kind: request.context.kind,
                step: request.step,
                strategy: request.strategy,
                attempt: request.attempt,
                prompt: request.prompt.text(),
            });
        }
        let key = ScriptKey {
            role: request.role,
            step: request.step,
            strategy: request.strategy,
        };
        if let Some(list) = self.responses.get(&key) {
            if let Some(text) = list.get(request.attempt as usize) {
                return Ok(text.clone());
            }
        }
        self.fallback.get(&request.role).cloned().ok_or_else(|| {
            BackendError::Fatal(format!(
                "script has no {} response for step {} strategy {:?} attempt {}",
                request.role, request.step, request.strategy, request.attempt
            ))
        })
    }
}
