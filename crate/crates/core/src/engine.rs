//! The critic → candidates → judge loop.
//!
//! A [`Session`] owns the loop state of one sketch. Each step asks the
//! critic for at most three discrepancies, asks the synthesizer for one
//! candidate per enabled strategy (in parallel), and lets the judge pick
//! among the current program (option 0) and the candidates. Picking 0
//! reverts the step and feeds its suggestions back to the critic.
//!
//! Steps are atomic: all records of a step are written to the trace sink
//! first, and only then is in-memory state replaced. A gateway error leaves
//! the state untouched.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{
    CandidateProgram, CritiqueInput, CritiqueReport, FailureFeedback, GatewayError, ImageInput, JudgeInput,
    JudgeVerdict, ModelGateway, ModelRole, Strategy,
};
use crate::geometry::EQUIVALENCE_THRESHOLD;
use crate::grammar::{diagram_from_value, diagram_to_value, diff_diagrams, Canvas, Diagram};
use crate::render::RasterImage;
use crate::trace::{
    CandidatePayload, CritiquePayload, FinalPayload, InitProgramPayload, OverridePayload, RecordType, RevertPayload,
    StateSummary, TraceError, TraceRecord, TraceSink, VerdictPayload,
};

/// Instruction used when the caller supplies none.
pub const DEFAULT_INSTRUCTION: &str = "Stick to the text instruction shown on the image. The color text refers to the fill color. Do not include any text in the final diagram.";

fn default_instruction() -> String {
    DEFAULT_INSTRUCTION.to_string()
}
fn default_max_steps() -> u32 {
    10
}
fn default_candidate_count() -> usize {
    Strategy::ALL.len()
}
fn default_threshold() -> f64 {
    EQUIVALENCE_THRESHOLD
}
fn default_max_reverts() -> u32 {
    3
}
fn default_in_flight() -> usize {
    Strategy::ALL.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub canvas: Canvas,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Strategies used per step, taken in their canonical order.
    #[serde(default = "default_candidate_count")]
    pub candidate_count: usize,
    #[serde(default = "default_threshold")]
    pub equivalence_threshold: f64,
    #[serde(default = "default_max_reverts")]
    pub max_consecutive_reverts: u32,
    /// Concurrent synthesize calls within a step.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Stop in `awaiting_human` after every step.
    #[serde(default)]
    pub review: bool,
}

impl SessionConfig {
    pub fn new(canvas: Canvas) -> Self {
        Self {
            canvas,
            instruction: default_instruction(),
            max_steps: default_max_steps(),
            candidate_count: default_candidate_count(),
            equivalence_threshold: default_threshold(),
            max_consecutive_reverts: default_max_reverts(),
            max_in_flight: default_in_flight(),
            review: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.candidate_count == 0 || self.candidate_count > Strategy::ALL.len() {
            return bad("candidate_count must be between 1 and 5");
        }
        if self.max_consecutive_reverts == 0 {
            return bad("max_consecutive_reverts must be at least 1");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !(self.equivalence_threshold.is_finite() && self.equivalence_threshold >= 0.0) {
            return bad("equivalence_threshold must be a non-negative number");
        }
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return bad("canvas must be non-empty");
        }
        Ok(())
    }

    pub fn strategies(&self) -> &'static [Strategy] {
        &Strategy::ALL[..self.candidate_count.min(Strategy::ALL.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initializing,
    AwaitingStep,
    RunningStep,
    AwaitingHuman,
    Converged,
    Exhausted,
    Failed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Initializing => "initializing",
            Phase::AwaitingStep => "awaiting_step",
            Phase::RunningStep => "running_step",
            Phase::AwaitingHuman => "awaiting_human",
            Phase::Converged => "converged",
            Phase::Exhausted => "exhausted",
            Phase::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Converged | Phase::Exhausted | Phase::Failed)
    }

    fn accepts_step(self) -> bool {
        matches!(self, Phase::AwaitingStep | Phase::AwaitingHuman)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown phase {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Accepted,
    Reverted,
    Overridden,
    /// The critic found nothing to change; no candidates were requested.
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: u32,
    pub critique: CritiqueReport,
    pub candidates: Vec<CandidateProgram>,
    pub verdict: Option<JudgeVerdict>,
    pub outcome: StepOutcome,
    pub diagram_before: Diagram,
    pub diagram_after: Diagram,
}

/// A human action on a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Override {
    /// Make candidate `index` of `step` current; index 0 is the program the
    /// step started from.
    SelectCandidate {
        step: u32,
        index: usize,
    },
    /// Replace the current program with a full diagram document.
    EditProgram {
        diagram: Value,
    },
    /// Append text to the instruction used by later critiques.
    InjectInstruction {
        text: String,
    },
    AcceptAsFinal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub phase: Phase,
    pub current: Diagram,
    /// Steps that ran candidates and a judge (reverts included).
    pub step_count: u32,
    pub consecutive_reverts: u32,
    pub failures: Vec<FailureFeedback>,
    /// Effective instruction, including injected text.
    pub instruction: String,
    pub initial: Diagram,
    pub history: Vec<StepRecord>,
}

impl LoopState {
    pub fn summary(&self) -> StateSummary {
        StateSummary {
            phase: self.phase,
            step_count: self.step_count,
        }
    }

    pub fn step(&self, index: u32) -> Option<&StepRecord> {
        self.history.iter().find(|s| s.index == index)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid sketch: {0}")]
    InvalidSketch(String),
    #[error("cannot {op} while {phase}")]
    InvalidPhase { op: &'static str, phase: Phase },
    #[error("initial program invalid: {0}")]
    InitialProgramInvalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// One sketch, its loop state and the handles it runs with.
pub struct Session {
    config: SessionConfig,
    gateway: ModelGateway,
    sketch: Arc<ImageInput>,
    sink: Arc<dyn TraceSink>,
    state: LoopState,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("config", &self.config)
            .field("gateway", &self.gateway)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

fn check_sketch(sketch: &RasterImage, canvas: Canvas) -> Result<(), EngineError> {
    if sketch.is_empty() {
        return Err(EngineError::InvalidSketch("sketch has no pixels".into()));
    }
    let lhs = u64::from(sketch.width) * u64::from(canvas.height);
    let rhs = u64::from(sketch.height) * u64::from(canvas.width);
    if lhs.abs_diff(rhs) as f64 > 0.02 * rhs as f64 {
        return Err(EngineError::InvalidSketch(format!(
            "sketch is {}x{} but the canvas is {canvas}; aspect ratios differ",
            sketch.width, sketch.height
        )));
    }
    Ok(())
}

fn candidate_payload(c: &CandidateProgram) -> CandidatePayload {
    CandidatePayload {
        strategy: c.strategy,
        diagram: diagram_to_value(&c.diagram),
        repair_count: c.repair_count,
        raw_response: c.raw_response.clone(),
        rejected_responses: c.rejected_responses.clone(),
    }
}

fn delta_summary(before: &Diagram, after: &Diagram) -> String {
    match diff_diagrams(before, after) {
        Ok(d) if d.is_empty() => "no change".into(),
        Ok(d) => d.summary_lines(before).join("; "),
        Err(e) => e.to_string(),
    }
}

impl Session {
    /// Describes the sketch, synthesises the initial program and records it.
    pub fn initialize(
        sketch: RasterImage,
        config: SessionConfig,
        gateway: ModelGateway,
        sink: Arc<dyn TraceSink>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        check_sketch(&sketch, config.canvas)?;
        let sketch = ImageInput::raster("target sketch", Arc::new(sketch));
        let description = gateway.describe_initial(&sketch, &config.instruction, config.canvas)?;
        let program = gateway
            .synthesize_initial(&description, &config.instruction, config.canvas)
            .map_err(|e| match e {
                GatewayError::MalformedModelOutput { message, .. } => EngineError::InitialProgramInvalid(message),
                other => EngineError::Gateway(other),
            })?;
        let state = LoopState {
            phase: Phase::AwaitingStep,
            current: program.diagram.clone(),
            step_count: 0,
            consecutive_reverts: 0,
            failures: Vec::new(),
            instruction: config.instruction.clone(),
            initial: program.diagram.clone(),
            history: Vec::new(),
        };
        sink.append(&[TraceRecord::new(
            RecordType::InitProgram,
            0,
            &InitProgramPayload {
                description,
                diagram: diagram_to_value(&program.diagram),
                raw_response: program.raw_response,
                rejected_responses: program.rejected_responses,
            },
        )])?;
        sink.committed(&state.summary())?;
        Ok(Self {
            config,
            gateway,
            sketch,
            sink,
            state,
        })
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn gateway(&self) -> &ModelGateway {
        &self.gateway
    }

    pub fn sketch(&self) -> &Arc<ImageInput> {
        &self.sketch
    }

    /// Swaps the handles a session runs with, e.g. after restoring it from
    /// a trace.
    pub fn rebind(&mut self, gateway: ModelGateway, sink: Arc<dyn TraceSink>, sketch: Option<RasterImage>) {
        self.gateway = gateway;
        self.sink = sink;
        if let Some(img) = sketch {
            self.sketch = ImageInput::raster("target sketch", Arc::new(img));
        }
    }

    fn image_of(&self, label: String, d: &Diagram) -> Arc<ImageInput> {
        ImageInput::diagram(label, d.clone(), self.gateway.policy.supersample)
    }

    fn synthesize_all(&self, step: u32, critique: &CritiqueReport) -> Result<Vec<CandidateProgram>, GatewayError> {
        let strategies = self.config.strategies();
        let current = &self.state.current;
        let instruction = &self.state.instruction;
        let mut out = Vec::with_capacity(strategies.len());
        for chunk in strategies.chunks(self.config.max_in_flight.max(1)) {
            let results: Vec<Result<CandidateProgram, GatewayError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&s| scope.spawn(move || self.gateway.synthesize(step, current, critique, s, instruction)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(GatewayError::BackendUnavailable {
                                role: ModelRole::Synthesizer,
                                message: "synthesis worker panicked".into(),
                            })
                        })
                    })
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }

    fn commit(&mut self, records: Vec<TraceRecord>, next: LoopState) -> Result<(), EngineError> {
        self.sink.append(&records)?;
        self.state = next;
        self.sink.committed(&self.state.summary())?;
        Ok(())
    }

    fn final_record(state: &LoopState, step: u32) -> TraceRecord {
        TraceRecord::new(
            RecordType::Final,
            step,
            &FinalPayload {
                phase: state.phase,
                diagram: diagram_to_value(&state.current),
                step_count: state.step_count,
            },
        )
    }

    /// One critique → candidates → judge iteration.
    pub fn run_step(&mut self) -> Result<&StepRecord, EngineError> {
        if !self.state.phase.accepts_step() {
            return Err(EngineError::InvalidPhase {
                op: "run a step",
                phase: self.state.phase,
            });
        }
        let step = self.state.step_count + 1;
        let before = self.state.current.clone();
        let current_img = self.image_of("current rendering".into(), &before);
        let critique = self.gateway.critique(&CritiqueInput {
            step,
            sketch: &self.sketch,
            current: &current_img,
            current_program: &before,
            instruction: &self.state.instruction,
            failures: &self.state.failures,
        })?;
        let mut records = vec![TraceRecord::new(
            RecordType::Critique,
            step,
            &CritiquePayload {
                report: critique.clone(),
            },
        )];
        let mut next = self.state.clone();

        if critique.is_converged() {
            next.phase = Phase::Converged;
            next.history.push(StepRecord {
                index: step,
                critique,
                candidates: Vec::new(),
                verdict: None,
                outcome: StepOutcome::Converged,
                diagram_before: before.clone(),
                diagram_after: before,
            });
            records.push(Self::final_record(&next, step));
            self.commit(records, next)?;
            return Ok(self.state.history.last().expect("just pushed"));
        }

        let candidates = self.synthesize_all(step, &critique)?;
        let images: Vec<(Strategy, Arc<ImageInput>)> = candidates
            .iter()
            .enumerate()
            .map(|(k, c)| (c.strategy, self.image_of(format!("option {}", k + 1), &c.diagram)))
            .collect();
        let programs: Vec<Diagram> = candidates.iter().map(|c| c.diagram.clone()).collect();
        let verdict = self.gateway.judge(&JudgeInput {
            step,
            sketch: &self.sketch,
            current: &current_img,
            current_program: &before,
            candidates: &images,
            candidate_programs: &programs,
        })?;

        records.extend(
            candidates
                .iter()
                .map(|c| TraceRecord::new(RecordType::Candidate, step, &candidate_payload(c))),
        );
        next.step_count = step;
        let outcome = if verdict.selected >= 1 {
            next.current = candidates[verdict.selected - 1].diagram.clone();
            next.consecutive_reverts = 0;
            next.failures.clear();
            StepOutcome::Accepted
        } else {
            StepOutcome::Reverted
        };
        records.push(TraceRecord::new(
            RecordType::Verdict,
            step,
            &VerdictPayload {
                selected: verdict.selected,
                rationale: verdict.rationale.clone(),
                outcome,
                raw_response: verdict.raw_response.clone(),
                rejected_responses: verdict.rejected_responses.clone(),
            },
        ));
        if outcome == StepOutcome::Reverted {
            let failure = FailureFeedback {
                step,
                rejected_suggestions: critique.suggestions.clone(),
                rejected_deltas: candidates
                    .iter()
                    .map(|c| format!("{}: {}", c.strategy, delta_summary(&before, &c.diagram)))
                    .collect(),
            };
            next.failures.push(failure.clone());
            next.consecutive_reverts += 1;
            records.push(TraceRecord::new(
                RecordType::Revert,
                step,
                &RevertPayload {
                    failure,
                    consecutive_reverts: next.consecutive_reverts,
                },
            ));
        }
        next.phase = if next.step_count >= self.config.max_steps
            || next.consecutive_reverts >= self.config.max_consecutive_reverts
        {
            Phase::Exhausted
        } else if self.config.review {
            Phase::AwaitingHuman
        } else {
            Phase::AwaitingStep
        };
        next.history.push(StepRecord {
            index: step,
            critique,
            candidates,
            verdict: Some(verdict),
            outcome,
            diagram_before: before,
            diagram_after: next.current.clone(),
        });
        if next.phase.is_terminal() {
            records.push(Self::final_record(&next, step));
        }
        self.commit(records, next)?;
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Runs up to `k` steps, stopping early in a terminal phase.
    pub fn run_steps(&mut self, k: u32) -> Result<u32, EngineError> {
        let mut ran = 0;
        while ran < k && self.state.phase.accepts_step() {
            self.run_step()?;
            ran += 1;
        }
        Ok(ran)
    }

    /// Steps until converged or exhausted (or a review pause).
    pub fn run_to_completion(&mut self) -> Result<&LoopState, EngineError> {
        if !self.state.phase.accepts_step() {
            return Err(EngineError::InvalidPhase {
                op: "run",
                phase: self.state.phase,
            });
        }
        loop {
            self.run_step()?;
            if self.state.phase != Phase::AwaitingStep {
                break;
            }
        }
        Ok(&self.state)
    }

    /// Applies a human action. Invalid actions leave state unchanged.
    pub fn apply_override(&mut self, action: Override) -> Result<&LoopState, EngineError> {
        if !self.state.phase.accepts_step() {
            return Err(EngineError::InvalidPhase {
                op: "override",
                phase: self.state.phase,
            });
        }
        let mut next = self.state.clone();
        match &action {
            Override::SelectCandidate { step, index } => {
                let record = next
                    .history
                    .iter_mut()
                    .find(|s| s.index == *step && s.outcome != StepOutcome::Converged)
                    .ok_or_else(|| EngineError::InvalidOverride(format!("no step {step}")))?;
                let chosen = if *index == 0 {
                    record.diagram_before.clone()
                } else {
                    record
                        .candidates
                        .get(index - 1)
                        .ok_or_else(|| {
                            EngineError::InvalidOverride(format!(
                                "step {step} has {} candidates, index {index} is out of range",
                                record.candidates.len()
                            ))
                        })?
                        .diagram
                        .clone()
                };
                record.outcome = StepOutcome::Overridden;
                record.diagram_after = chosen.clone();
                next.current = chosen;
                next.consecutive_reverts = 0;
                next.failures.clear();
            }
            Override::EditProgram { diagram } => {
                next.current = diagram_from_value(diagram, self.config.canvas)
                    .map_err(|e| EngineError::InvalidOverride(e.to_string()))?;
            }
            Override::InjectInstruction { text } => {
                if text.trim().is_empty() {
                    return Err(EngineError::InvalidOverride("instruction text is empty".into()));
                }
                next.instruction = format!("{}\n{}", next.instruction, text.trim());
            }
            Override::AcceptAsFinal => next.phase = Phase::Converged,
        }
        let step = next.step_count;
        let mut records = vec![TraceRecord::new(
            RecordType::Override,
            step,
            &OverridePayload {
                action,
                diagram: diagram_to_value(&next.current),
                phase: next.phase,
            },
        )];
        if next.phase.is_terminal() {
            records.push(Self::final_record(&next, step));
        }
        self.commit(records, next)?;
        Ok(&self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::oracle::OracleBackend;
    use crate::gateway::prompts::FAILURE_HEADING;
    use crate::gateway::scripted::ScriptedBackend;
    use crate::gateway::{GatewayPolicy, RetryPolicy};
    use crate::geometry::structural_distance;
    use crate::grammar::{serialize_diagram, NamedColor, Shape, ShapeType};
    use crate::trace::MemorySink;
    use std::time::Duration;

    fn canvas() -> Canvas {
        Canvas::new(120, 80).unwrap()
    }

    fn target() -> Diagram {
        Diagram::from_shapes(
            canvas(),
            vec![
                Shape::new(ShapeType::Rectangle)
                    .at(33.0, 41.0)
                    .sized(27.0, 19.0)
                    .filled(NamedColor::Blue),
                Shape::new(ShapeType::Circle)
                    .at(87.0, 38.0)
                    .sized(23.0, 23.0)
                    .filled(NamedColor::Red),
                Shape::new(ShapeType::Triangle)
                    .at(61.0, 66.0)
                    .sized(17.0, 11.0)
                    .filled(NamedColor::Green)
                    .rotated(20.0),
            ],
        )
        .unwrap()
    }

    fn policy() -> GatewayPolicy {
        GatewayPolicy {
            retry: RetryPolicy {
                attempts: 1,
                initial_backoff: Duration::from_millis(1),
            },
            ..GatewayPolicy::default()
        }
    }

    fn sketch() -> RasterImage {
        RasterImage::filled(120, 80, [255; 4])
    }

    fn oracle_session(config: SessionConfig) -> (Session, Arc<MemorySink>) {
        let gw = ModelGateway::uniform(Arc::new(OracleBackend::new(target())), policy());
        let sink = Arc::new(MemorySink::new());
        (Session::initialize(sketch(), config, gw, sink.clone()).unwrap(), sink)
    }

    #[test]
    fn oracle_loop_converges_monotonically() {
        let (mut s, sink) = oracle_session(SessionConfig::new(canvas()));
        assert!(!s.state().current.shapes.is_empty());
        let mut last = structural_distance(&s.state().current, &target()).unwrap().value;
        while s.state().phase == Phase::AwaitingStep {
            let rec = s.run_step().unwrap().clone();
            if rec.outcome != StepOutcome::Converged {
                assert_eq!(rec.candidates.len(), 5);
            }
            let d = structural_distance(&s.state().current, &target()).unwrap().value;
            assert!(d <= last + 1e-12);
            last = d;
        }
        assert_eq!(s.state().phase, Phase::Converged);
        assert!(last < EQUIVALENCE_THRESHOLD);
        let trace = sink.trace();
        assert_eq!(trace.records.last().unwrap().kind, RecordType::Final);
    }

    fn always_revert() -> ScriptedBackend {
        let program = serialize_diagram(&target());
        ScriptedBackend::new()
            .with_fallback(
                ModelRole::Critic,
                r#"{"scene_description": "three shapes", "discrepancies": ["the circle is too small"], "suggestions": ["make the circle larger"]}"#,
            )
            .with_fallback(ModelRole::Synthesizer, program)
            .with_fallback(ModelRole::Judge, r#"{"selected": 0, "rationale": "no improvement"}"#)
    }

    #[test]
    fn reverts_keep_program_and_accumulate_feedback() {
        let backend = Arc::new(always_revert());
        let gw = ModelGateway::uniform(backend.clone(), policy());
        let mut config = SessionConfig::new(canvas());
        config.max_consecutive_reverts = 10;
        let mut s = Session::initialize(sketch(), config, gw, Arc::new(MemorySink::new())).unwrap();
        let initial = serialize_diagram(&s.state().current);
        for _ in 0..5 {
            let r = s.run_step().unwrap();
            assert_eq!(r.outcome, StepOutcome::Reverted);
            assert_eq!(r.diagram_after, r.diagram_before);
        }
        assert_eq!(serialize_diagram(&s.state().current), initial);
        let critic_prompts: Vec<String> = backend
            .calls()
            .into_iter()
            .filter(|c| c.role == ModelRole::Critic && c.step == 5)
            .map(|c| c.prompt)
            .collect();
        assert_eq!(critic_prompts[0].matches(FAILURE_HEADING).count(), 4);
    }

    #[test]
    fn reverts_exhaust_session() {
        let gw = ModelGateway::uniform(Arc::new(always_revert()), policy());
        let mut s =
            Session::initialize(sketch(), SessionConfig::new(canvas()), gw, Arc::new(MemorySink::new())).unwrap();
        s.run_to_completion().unwrap();
        assert_eq!(s.state().phase, Phase::Exhausted);
        assert_eq!(s.state().step_count, 3);
        assert!(s.run_step().is_err());
    }

    #[test]
    fn failed_step_leaves_state_untouched() {
        let backend = ScriptedBackend::new()
            .with_fallback(
                ModelRole::Critic,
                r#"{"scene_description": "x", "discrepancies": ["a"]}"#,
            )
            .with_fallback(ModelRole::Synthesizer, serialize_diagram(&target()));
        let gw = ModelGateway::uniform(Arc::new(backend), policy());
        let sink = Arc::new(MemorySink::new());
        let mut s = Session::initialize(sketch(), SessionConfig::new(canvas()), gw, sink.clone()).unwrap();
        let before = s.state().clone();
        let n = sink.trace().records.len();
        assert!(matches!(s.run_step(), Err(EngineError::Gateway(_))));
        assert_eq!(s.state(), &before);
        assert_eq!(sink.trace().records.len(), n);
    }

    #[test]
    fn bad_initial_program_is_reported() {
        let backend = ScriptedBackend::new()
            .with_fallback(ModelRole::Critic, r#"{"scene_description": "x"}"#)
            .with_fallback(ModelRole::Synthesizer, r#"{"shapes": [{"shape_type": "hexagon"}]}"#);
        let gw = ModelGateway::uniform(Arc::new(backend), policy());
        let r = Session::initialize(sketch(), SessionConfig::new(canvas()), gw, Arc::new(MemorySink::new()));
        assert!(matches!(r, Err(EngineError::InitialProgramInvalid(_))));
    }

    #[test]
    fn overrides() {
        let (mut s, sink) = oracle_session(SessionConfig::new(canvas()));
        s.run_step().unwrap();
        let worst = s.state().history[0].candidates[0].diagram.clone();
        s.apply_override(Override::SelectCandidate { step: 1, index: 1 })
            .unwrap();
        assert_eq!(s.state().current, worst);
        assert_eq!(s.state().history[0].outcome, StepOutcome::Overridden);
        assert!(matches!(
            s.apply_override(Override::SelectCandidate { step: 1, index: 9 }),
            Err(EngineError::InvalidOverride(_))
        ));

        let before = s.state().clone();
        let bad = serde_json::json!({"shapes": [{"shape_type": "circle", "fill_color": "teal"}]});
        assert!(matches!(
            s.apply_override(Override::EditProgram { diagram: bad }),
            Err(EngineError::InvalidOverride(_))
        ));
        assert_eq!(s.state(), &before);

        s.apply_override(Override::InjectInstruction {
            text: "make it symmetric".into(),
        })
        .unwrap();
        assert!(s.state().instruction.ends_with("make it symmetric"));

        s.apply_override(Override::AcceptAsFinal).unwrap();
        assert_eq!(s.state().phase, Phase::Converged);
        let kinds: Vec<RecordType> = sink.trace().records.iter().map(|r| r.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == RecordType::Override).count(), 3);
        assert_eq!(*kinds.last().unwrap(), RecordType::Final);
    }

    #[test]
    fn injected_instruction_reaches_critic() {
        let backend = Arc::new(always_revert());
        let gw = ModelGateway::uniform(backend.clone(), policy());
        let mut s =
            Session::initialize(sketch(), SessionConfig::new(canvas()), gw, Arc::new(MemorySink::new())).unwrap();
        s.apply_override(Override::InjectInstruction {
            text: "keep the circle on the right".into(),
        })
        .unwrap();
        s.run_step().unwrap();
        let prompts = backend.prompts(ModelRole::Critic);
        assert!(prompts.last().unwrap().contains("keep the circle on the right"));
        assert!(prompts.last().unwrap().contains(DEFAULT_INSTRUCTION));
    }

    #[test]
    fn config_validation() {
        let mut c = SessionConfig::new(canvas());
        c.max_steps = 0;
        assert!(matches!(c.validate(), Err(EngineError::InvalidConfig(_))));
        let mut c = SessionConfig::new(canvas());
        c.candidate_count = 6;
        assert!(c.validate().is_err());
        let c: SessionConfig = serde_json::from_str(r#"{"canvas": {"width": 10, "height": 10}}"#).unwrap();
        assert_eq!(c.instruction, DEFAULT_INSTRUCTION);
        assert_eq!((c.max_steps, c.candidate_count, c.max_consecutive_reverts), (10, 5, 3));
    }

    #[test]
    fn review_mode_pauses() {
        let mut config = SessionConfig::new(canvas());
        config.review = true;
        let (mut s, _) = oracle_session(config);
        s.run_to_completion().unwrap();
        assert_eq!(s.state().phase, Phase::AwaitingHuman);
        assert_eq!(s.state().step_count, 1);
        s.run_step().unwrap();
        assert_eq!(s.state().step_count, 2);
    }

    #[test]
    fn sketch_aspect_is_checked() {
        let gw = ModelGateway::uniform(Arc::new(OracleBackend::new(target())), policy());
        let r = Session::initialize(
            RasterImage::filled(50, 50, [255; 4]),
            SessionConfig::new(canvas()),
            gw,
            Arc::new(MemorySink::new()),
        );
        assert!(matches!(r, Err(EngineError::InvalidSketch(_))));
    }
}
