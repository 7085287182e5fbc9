//! The three model roles behind one facade.
//!
//! [`ModelGateway`] owns the role-specific contracts: it builds prompts,
//! calls a [`ModelBackend`] per role, extracts JSON from free text, re-asks
//! on unusable output (bounded by `max_repairs`), retries transient backend
//! failures with exponential backoff, and enforces post-conditions such as
//! the three-discrepancy cap. Backends only turn a request into text.
//!
//! Three backends ship with the crate:
//! * [`remote::RemoteBackend`] talks to a chat-style HTTP endpoint,
//! * [`scripted::ScriptedBackend`] replays recorded responses,
//! * [`oracle::OracleBackend`] knows the target diagram and answers like an
//!   ideal model would, which makes the whole loop testable offline.

pub mod oracle;
pub mod prompts;
pub mod remote;
pub mod scripted;

use std::fmt;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grammar::{parse_diagram, Canvas, Diagram};
use crate::render::{encode_png, render_diagram, RasterImage};

/// Critiques carry at most this many discrepancies.
pub const MAX_DISCREPANCIES: usize = 3;
pub const DEFAULT_MAX_REPAIRS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Critic,
    Synthesizer,
    Judge,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Critic => "critic",
            ModelRole::Synthesizer => "synthesizer",
            ModelRole::Judge => "judge",
        })
    }
}

/// How boldly a candidate acts on the critique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Conservative,
    Moderate,
    Aggressive,
    Alternative,
    Focused,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Conservative,
        Strategy::Moderate,
        Strategy::Aggressive,
        Strategy::Alternative,
        Strategy::Focused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Conservative => "conservative",
            Strategy::Moderate => "moderate",
            Strategy::Aggressive => "aggressive",
            Strategy::Alternative => "alternative",
            Strategy::Focused => "focused",
        }
    }

    /// How many of `n` suggestions this strategy acts on.
    pub fn suggestion_budget(self, n: usize) -> usize {
        match self {
            Strategy::Conservative => n.min(1),
            Strategy::Moderate => n.div_ceil(2),
            Strategy::Aggressive | Strategy::Alternative | Strategy::Focused => n,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueReport {
    pub scene_description: String,
    pub discrepancies: Vec<String>,
    pub suggestions: Vec<String>,
    pub raw_response: String,
    /// Unusable responses that preceded `raw_response`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_responses: Vec<String>,
}

impl CritiqueReport {
    /// The critic sees nothing left to fix.
    pub fn is_converged(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateProgram {
    pub strategy: Strategy,
    pub diagram: Diagram,
    pub raw_response: String,
    pub repair_count: u32,
    pub rejected_responses: Vec<String>,
}

/// A synthesised program before it is attached to a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramResponse {
    pub diagram: Diagram,
    pub raw_response: String,
    pub rejected_responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// 0 is the current image, `k >= 1` is candidate `k`.
    pub selected: usize,
    pub rationale: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_responses: Vec<String>,
}

impl JudgeVerdict {
    pub fn is_revert(&self) -> bool {
        self.selected == 0
    }
}

/// What the critic is told after a reverted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureFeedback {
    pub step: u32,
    pub rejected_suggestions: Vec<String>,
    pub rejected_deltas: Vec<String>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient: connection refused, timeout, 5xx, rate limiting.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// Permanent: bad request, exhausted script, misconfiguration.
    #[error("backend error: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{role} backend unavailable: {message}")]
    BackendUnavailable { role: ModelRole, message: String },
    #[error("{role} output unusable after {} attempts: {message}", responses.len())]
    MalformedModelOutput {
        role: ModelRole,
        message: String,
        responses: Vec<String>,
    },
    #[error("image unavailable: {0}")]
    Image(String),
}

/// An image handed to a model. Diagram renders are produced on first use,
/// so backends that never look at pixels never pay for them.
pub struct ImageInput {
    pub label: String,
    source: ImageSource,
    raster: OnceLock<Result<Arc<RasterImage>, String>>,
    png: OnceLock<Result<Arc<Vec<u8>>, String>>,
}

enum ImageSource {
    Raster(Arc<RasterImage>),
    Diagram { diagram: Diagram, supersample: u32 },
}

impl fmt::Debug for ImageInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageInput")
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl ImageInput {
    pub fn raster(label: impl Into<String>, image: Arc<RasterImage>) -> Arc<Self> {
        Arc::new(Self {
            label: label.into(),
            source: ImageSource::Raster(image),
            raster: OnceLock::new(),
            png: OnceLock::new(),
        })
    }

    pub fn diagram(label: impl Into<String>, diagram: Diagram, supersample: u32) -> Arc<Self> {
        Arc::new(Self {
            label: label.into(),
            source: ImageSource::Diagram { diagram, supersample },
            raster: OnceLock::new(),
            png: OnceLock::new(),
        })
    }

    pub fn image(&self) -> Result<Arc<RasterImage>, GatewayError> {
        self.raster
            .get_or_init(|| match &self.source {
                ImageSource::Raster(img) => Ok(img.clone()),
                ImageSource::Diagram { diagram, supersample } => render_diagram(diagram, *supersample)
                    .map(Arc::new)
                    .map_err(|e| e.to_string()),
            })
            .clone()
            .map_err(GatewayError::Image)
    }

    pub fn png(&self) -> Result<Arc<Vec<u8>>, GatewayError> {
        self.png
            .get_or_init(|| {
                let img = self.image().map_err(|e| e.to_string())?;
                encode_png(&img).map(Arc::new).map_err(|e| e.to_string())
            })
            .clone()
            .map_err(GatewayError::Image)
    }
}

#[derive(Debug, Clone)]
pub enum PromptPart {
    Text(String),
    Image(Arc<ImageInput>),
}

#[derive(Debug, Clone, Default)]
pub struct Prompt {
    pub system: String,
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    pub fn push_text(&mut self, text: impl Into<String>) {
        self.parts.push(PromptPart::Text(text.into()));
    }

    pub fn push_image(&mut self, image: Arc<ImageInput>) {
        self.parts.push(PromptPart::Image(image));
    }

    /// System text plus every text part; images appear as `[image: label]`.
    pub fn text(&self) -> String {
        let mut out = self.system.clone();
        for p in &self.parts {
            out.push_str("\n\n");
            match p {
                PromptPart::Text(t) => out.push_str(t),
                PromptPart::Image(i) => {
                    out.push_str("[image: ");
                    out.push_str(&i.label);
                    out.push(']');
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    DescribeInitial,
    InitialProgram,
    Critique,
    Synthesize,
    Judge,
}

/// Structured side-channel for backends that do not read prompts (the
/// oracle), and keys for the ones that replay (scripted).
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub kind: RequestKind,
    pub canvas: Canvas,
    pub current: Option<&'a Diagram>,
    pub candidates: &'a [Diagram],
    pub critique: Option<&'a CritiqueReport>,
    pub failures: &'a [FailureFeedback],
}

#[derive(Debug, Clone, Copy)]
pub struct ModelRequest<'a> {
    pub role: ModelRole,
    pub step: u32,
    pub strategy: Option<Strategy>,
    /// 0 for the first ask, then 1..=max_repairs.
    pub attempt: u32,
    pub prompt: &'a Prompt,
    pub context: &'a RequestContext<'a>,
}

/// Turns a request into response text.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "duration_ms")]
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewayPolicy {
    pub max_repairs: u32,
    pub retry: RetryPolicy,
    /// Rasterization scale for images sent to models.
    pub supersample: u32,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        Self {
            max_repairs: DEFAULT_MAX_REPAIRS,
            retry: RetryPolicy::default(),
            supersample: crate::render::DEFAULT_SUPERSAMPLE,
        }
    }
}

/// One backend per role plus the shared policy.
#[derive(Clone)]
pub struct ModelGateway {
    pub critic: Arc<dyn ModelBackend>,
    pub synthesizer: Arc<dyn ModelBackend>,
    pub judge: Arc<dyn ModelBackend>,
    pub policy: GatewayPolicy,
}

impl fmt::Debug for ModelGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGateway")
            .field("critic", &self.critic.name())
            .field("synthesizer", &self.synthesizer.name())
            .field("judge", &self.judge.name())
            .field("policy", &self.policy)
            .finish()
    }
}

/// Inputs of one critique call.
pub struct CritiqueInput<'a> {
    pub step: u32,
    pub sketch: &'a Arc<ImageInput>,
    pub current: &'a Arc<ImageInput>,
    pub current_program: &'a Diagram,
    pub instruction: &'a str,
    pub failures: &'a [FailureFeedback],
}

/// Inputs of one judge call: option 0 is the current program.
pub struct JudgeInput<'a> {
    pub step: u32,
    pub sketch: &'a Arc<ImageInput>,
    pub current: &'a Arc<ImageInput>,
    pub current_program: &'a Diagram,
    pub candidates: &'a [(Strategy, Arc<ImageInput>)],
    pub candidate_programs: &'a [Diagram],
}

impl ModelGateway {
    /// The same backend for all three roles.
    pub fn uniform(backend: Arc<dyn ModelBackend>, policy: GatewayPolicy) -> Self {
        Self {
            critic: backend.clone(),
            synthesizer: backend.clone(),
            judge: backend,
            policy,
        }
    }

    fn backend(&self, role: ModelRole) -> &Arc<dyn ModelBackend> {
        match role {
            ModelRole::Critic => &self.critic,
            ModelRole::Synthesizer => &self.synthesizer,
            ModelRole::Judge => &self.judge,
        }
    }

    fn call_with_retry(&self, request: &ModelRequest<'_>) -> Result<String, GatewayError> {
        let backend = self.backend(request.role);
        let attempts = self.policy.retry.attempts.max(1);
        let mut last = String::new();
        for k in 0..attempts {
            match backend.complete(request) {
                Ok(text) => return Ok(text),
                Err(BackendError::Fatal(m)) => {
                    return Err(GatewayError::BackendUnavailable {
                        role: request.role,
                        message: m,
                    })
                }
                Err(BackendError::Unavailable(m)) => {
                    tracing::warn!(role = %request.role, attempt = k + 1, "backend unavailable: {m}");
                    last = m;
                    if k + 1 < attempts {
                        std::thread::sleep(self.policy.retry.initial_backoff * 2u32.pow(k));
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable {
            role: request.role,
            message: format!("{last} (after {attempts} attempts)"),
        })
    }

    /// Ask, parse, and re-ask with the parser's complaint until the answer
    /// is usable or the repair budget is spent.
    fn ask<T>(
        &self,
        role: ModelRole,
        step: u32,
        strategy: Option<Strategy>,
        prompt: &Prompt,
        context: &RequestContext<'_>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(T, String, Vec<String>), GatewayError> {
        let mut prompt = prompt.clone();
        let mut rejected = Vec::new();
        for attempt in 0..=self.policy.max_repairs {
            let request = ModelRequest {
                role,
                step,
                strategy,
                attempt,
                prompt: &prompt,
                context,
            };
            let text = self.call_with_retry(&request)?;
            match parse(&text) {
                Ok(v) => return Ok((v, text, rejected)),
                Err(msg) => {
                    tracing::debug!(%role, step, attempt, "unusable model output: {msg}");
                    prompt.push_text(prompts::repair_message(&text, &msg));
                    rejected.push(text);
                }
            }
        }
        let message = format!("no usable response after {} repairs", self.policy.max_repairs);
        Err(GatewayError::MalformedModelOutput {
            role,
            message,
            responses: rejected,
        })
    }

    /// Step-0 scene description of the sketch.
    pub fn describe_initial(
        &self,
        sketch: &Arc<ImageInput>,
        instruction: &str,
        canvas: Canvas,
    ) -> Result<CritiqueReport, GatewayError> {
        let prompt = prompts::describe_initial_prompt(sketch, instruction, canvas);
        let ctx = RequestContext {
            kind: RequestKind::DescribeInitial,
            canvas,
            current: None,
            candidates: &[],
            critique: None,
            failures: &[],
        };
        let (mut report, raw, rejected) = self.ask(ModelRole::Critic, 0, None, &prompt, &ctx, parse_critique)?;
        report.discrepancies.clear();
        report.suggestions.clear();
        report.raw_response = raw;
        report.rejected_responses = rejected;
        Ok(report)
    }

    /// The starting program, written from the initial description.
    pub fn synthesize_initial(
        &self,
        description: &CritiqueReport,
        instruction: &str,
        canvas: Canvas,
    ) -> Result<ProgramResponse, GatewayError> {
        let prompt = prompts::initial_program_prompt(description, instruction, canvas);
        let ctx = RequestContext {
            kind: RequestKind::InitialProgram,
            canvas,
            current: None,
            candidates: &[],
            critique: Some(description),
            failures: &[],
        };
        let (diagram, raw, rejected) = self.ask(ModelRole::Synthesizer, 0, None, &prompt, &ctx, |t| {
            parse_program(t, canvas)
        })?;
        Ok(ProgramResponse {
            diagram,
            raw_response: raw,
            rejected_responses: rejected,
        })
    }

    /// Compare sketch and current render; at most three discrepancies.
    pub fn critique(&self, input: &CritiqueInput<'_>) -> Result<CritiqueReport, GatewayError> {
        let prompt = prompts::critique_prompt(input);
        let ctx = RequestContext {
            kind: RequestKind::Critique,
            canvas: input.current_program.canvas,
            current: Some(input.current_program),
            candidates: &[],
            critique: None,
            failures: input.failures,
        };
        let (mut report, raw, rejected) =
            self.ask(ModelRole::Critic, input.step, None, &prompt, &ctx, parse_critique)?;
        report.raw_response = raw;
        report.rejected_responses = rejected;
        Ok(report)
    }

    /// One candidate edit of `current` under `strategy`.
    pub fn synthesize(
        &self,
        step: u32,
        current: &Diagram,
        critique: &CritiqueReport,
        strategy: Strategy,
        instruction: &str,
    ) -> Result<CandidateProgram, GatewayError> {
        let prompt = prompts::synthesize_prompt(current, critique, strategy, instruction);
        let ctx = RequestContext {
            kind: RequestKind::Synthesize,
            canvas: current.canvas,
            current: Some(current),
            candidates: &[],
            critique: Some(critique),
            failures: &[],
        };
        let canvas = current.canvas;
        let (diagram, raw, rejected) = self.ask(ModelRole::Synthesizer, step, Some(strategy), &prompt, &ctx, |t| {
            parse_program(t, canvas)
        })?;
        Ok(CandidateProgram {
            strategy,
            diagram,
            raw_response: raw,
            repair_count: rejected.len() as u32,
            rejected_responses: rejected,
        })
    }

    /// Pick the best of {current} ∪ candidates; 0 means keep current.
    pub fn judge(&self, input: &JudgeInput<'_>) -> Result<JudgeVerdict, GatewayError> {
        let n = input.candidates.len();
        if n == 0 {
            return Err(GatewayError::MalformedModelOutput {
                role: ModelRole::Judge,
                message: "judge needs at least one candidate".into(),
                responses: vec![],
            });
        }
        let prompt = prompts::judge_prompt(input);
        let ctx = RequestContext {
            kind: RequestKind::Judge,
            canvas: input.current_program.canvas,
            current: Some(input.current_program),
            candidates: input.candidate_programs,
            critique: None,
            failures: &[],
        };
        let (mut verdict, raw, rejected) = self.ask(ModelRole::Judge, input.step, None, &prompt, &ctx, |t| {
            parse_verdict(t, n)
        })?;
        verdict.raw_response = raw;
        verdict.rejected_responses = rejected;
        Ok(verdict)
    }
}

/// First balanced top-level `{...}` in `text`, honouring JSON strings.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if let Some(s) = start {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[s..=i]);
                    }
                }
                _ => {}
            }
        } else if b == b'{' {
            start = Some(i);
            depth = 1;
        }
    }
    None
}

fn extract_value(text: &str) -> Result<Value, String> {
    let body = extract_json_object(text).ok_or("response contains no JSON object")?;
    serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))
}

/// Program text → diagram, strictly through the grammar parser.
pub fn parse_program(text: &str, canvas: Canvas) -> Result<Diagram, String> {
    let body = extract_json_object(text).ok_or("response contains no JSON object")?;
    parse_diagram(body, canvas).map_err(|e| e.to_string())
}

fn string_list(v: &Value, key: &str) -> Result<Vec<String>, String> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| format!("\"{key}\" must be a list of strings"))
            })
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect(),
        Some(_) => Err(format!("\"{key}\" must be a list of strings")),
    }
}

/// Parses critic output. `"status": "no_differences"` (or an empty
/// discrepancy list) means converged. Extra discrepancies are dropped, and
/// suggestions are aligned one-to-one with the kept discrepancies.
pub fn parse_critique(text: &str) -> Result<CritiqueReport, String> {
    let v = extract_value(text)?;
    let scene_description = v
        .get("scene_description")
        .and_then(Value::as_str)
        .ok_or("missing \"scene_description\" string")?
        .trim()
        .to_string();
    let converged = match v.get("status").and_then(Value::as_str) {
        Some("no_differences") => true,
        Some("needs_changes") | None => false,
        Some(other) => return Err(format!("unknown status {other:?}")),
    };
    let mut discrepancies = string_list(&v, "discrepancies")?;
    let mut suggestions = string_list(&v, "suggestions")?;
    if converged {
        discrepancies.clear();
        suggestions.clear();
    }
    discrepancies.truncate(MAX_DISCREPANCIES);
    suggestions.truncate(discrepancies.len());
    while suggestions.len() < discrepancies.len() {
        suggestions.push(discrepancies[suggestions.len()].clone());
    }
    Ok(CritiqueReport {
        scene_description,
        discrepancies,
        suggestions,
        raw_response: text.to_string(),
        rejected_responses: Vec::new(),
    })
}

pub fn parse_verdict(text: &str, candidates: usize) -> Result<JudgeVerdict, String> {
    let v = extract_value(text)?;
    let selected = v
        .get("selected")
        .and_then(Value::as_u64)
        .ok_or("missing non-negative integer \"selected\"")? as usize;
    if selected > candidates {
        return Err(format!("selected {selected} is outside 0..={candidates}"));
    }
    let rationale = v
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(JudgeVerdict {
        selected,
        rationale,
        raw_response: text.to_string(),
        rejected_responses: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    #[test]
    fn extracts_first_object_from_prose() {
        let t = "Sure! Here it is:\n```json\n{\"a\": \"}{\", \"b\": {\"c\": 1}}\n```\nand {\"x\":2}";
        assert_eq!(extract_json_object(t), Some("{\"a\": \"}{\", \"b\": {\"c\": 1}}"));
        assert_eq!(extract_json_object("no json"), None);
        assert_eq!(extract_json_object("{\"open\": 1"), None);
        assert_eq!(
            extract_json_object(r#"{"s": "quote \" and brace }"}"#),
            Some(r#"{"s": "quote \" and brace }"}"#)
        );
    }

    #[test]
    fn critique_is_capped_at_three() {
        let r = parse_critique(
            r#"{"scene_description": "s", "discrepancies": ["a","b","c","d","e"], "suggestions": ["1","2","3","4","5"]}"#,
        )
        .unwrap();
        assert_eq!(r.discrepancies.len(), 3);
        assert_eq!(r.suggestions, vec!["1", "2", "3"]);
    }

    #[test]
    fn critique_no_differences_marker() {
        let r =
            parse_critique(r#"{"scene_description": "s", "status": "no_differences", "discrepancies": ["left over"]}"#)
                .unwrap();
        assert!(r.is_converged());
        assert!(parse_critique(r#"{"status": "no_differences"}"#).is_err());
    }

    #[test]
    fn missing_suggestions_fall_back_to_discrepancies() {
        let r =
            parse_critique(r#"{"scene_description": "s", "discrepancies": ["a","b"], "suggestions": ["x"]}"#).unwrap();
        assert_eq!(r.suggestions, vec!["x", "b"]);
    }

    #[test]
    fn verdict_range_is_checked() {
        assert_eq!(
            parse_verdict(r#"{"selected": 2, "rationale": "r"}"#, 5)
                .unwrap()
                .selected,
            2
        );
        assert!(parse_verdict(r#"{"selected": 6}"#, 5).is_err());
        assert!(parse_verdict(r#"{"selected": -1}"#, 5).is_err());
    }

    #[test]
    fn strategy_budgets() {
        let b: Vec<usize> = Strategy::ALL.iter().map(|s| s.suggestion_budget(3)).collect();
        assert_eq!(b, vec![1, 2, 3, 3, 3]);
        assert_eq!(Strategy::Moderate.suggestion_budget(1), 1);
        assert_eq!(Strategy::Conservative.suggestion_budget(0), 0);
    }

    struct Flaky {
        failures: AtomicU32,
        reply: String,
        seen: Mutex<Vec<String>>,
    }

    impl ModelBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn complete(&self, r: &ModelRequest<'_>) -> Result<String, BackendError> {
            self.seen.lock().unwrap().push(r.prompt.text());
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Unavailable("down".into()));
            }
            Ok(self.reply.clone())
        }
    }

    fn fast_policy() -> GatewayPolicy {
        GatewayPolicy {
            retry: RetryPolicy {
                attempts: 3,
                initial_backoff: Duration::from_millis(1),
            },
            ..GatewayPolicy::default()
        }
    }

    fn describe(backend: Arc<Flaky>) -> Result<CritiqueReport, GatewayError> {
        let gw = ModelGateway::uniform(backend, fast_policy());
        let canvas = Canvas::new(10, 10).unwrap();
        let sketch = ImageInput::raster("sketch", Arc::new(RasterImage::filled(10, 10, [255; 4])));
        gw.describe_initial(&sketch, "draw", canvas)
    }

    #[test]
    fn transient_failures_are_retried() {
        let b = Arc::new(Flaky {
            failures: AtomicU32::new(2),
            reply: r#"{"scene_description": "a box"}"#.into(),
            seen: Mutex::new(vec![]),
        });
        let r = describe(b.clone()).unwrap();
        assert_eq!(r.scene_description, "a box");
        assert_eq!(b.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn persistent_outage_is_backend_unavailable() {
        let b = Arc::new(Flaky {
            failures: AtomicU32::new(100),
            reply: String::new(),
            seen: Mutex::new(vec![]),
        });
        assert!(matches!(
            describe(b.clone()),
            Err(GatewayError::BackendUnavailable { .. })
        ));
        assert_eq!(b.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn garbage_is_repaired_then_rejected() {
        let b = Arc::new(Flaky {
            failures: AtomicU32::new(0),
            reply: "I cannot comply".into(),
            seen: Mutex::new(vec![]),
        });
        match describe(b.clone()) {
            Err(GatewayError::MalformedModelOutput { responses, .. }) => assert_eq!(responses.len(), 3),
            other => panic!("{other:?}"),
        }
        let seen = b.seen.lock().unwrap();
        assert!(seen[2].contains("could not be used"));
    }
}
