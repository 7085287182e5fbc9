//! Deterministic re-execution of a recorded session.
//!
//! Every model response in a trace (including the ones rejected by the
//! repair loop) is loaded into a [`ScriptedBackend`], the session is run
//! again with the recorded config and human overrides, and the new trace is
//! compared with the old one record by record.

use std::sync::Arc;

use thiserror::Error;

use crate::engine::{EngineError, Session};
use crate::gateway::scripted::ScriptedBackend;
use crate::gateway::{GatewayPolicy, ModelGateway, ModelRole, RetryPolicy};
use crate::render::RasterImage;
use crate::trace::{
    CandidatePayload, CritiquePayload, InitProgramPayload, MemorySink, OverridePayload, RecordType, SessionTrace,
    TraceError, TraceRecord, VerdictPayload,
};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("replay diverged from the trace: {}", .0.join("; "))]
    Diverged(Vec<String>),
    #[error("replay stopped at step {step}: {source}")]
    Engine {
        step: u32,
        #[source]
        source: EngineError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    /// Records carrying a diagram that were compared byte for byte.
    pub diagrams_compared: usize,
    pub mismatches: Vec<String>,
    pub replayed: SessionTrace,
}

impl ReplayReport {
    pub fn is_faithful(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn push_all(
    b: &mut ScriptedBackend,
    role: ModelRole,
    step: u32,
    strategy: Option<crate::gateway::Strategy>,
    rejected: &[String],
    raw: &str,
) {
    for r in rejected {
        b.push(role, step, strategy, r.clone());
    }
    b.push(role, step, strategy, raw);
}

/// A scripted backend that answers exactly as the recorded models did.
pub fn scripted_from_trace(trace: &SessionTrace) -> Result<ScriptedBackend, TraceError> {
    let mut b = ScriptedBackend::new();
    for r in &trace.records {
        match r.kind {
            RecordType::InitProgram => {
                let p: InitProgramPayload = r.payload_as()?;
                let d = &p.description;
                push_all(
                    &mut b,
                    ModelRole::Critic,
                    0,
                    None,
                    &d.rejected_responses,
                    &d.raw_response,
                );
                push_all(
                    &mut b,
                    ModelRole::Synthesizer,
                    0,
                    None,
                    &p.rejected_responses,
                    &p.raw_response,
                );
            }
            RecordType::Critique => {
                let p: CritiquePayload = r.payload_as()?;
                let c = &p.report;
                push_all(
                    &mut b,
                    ModelRole::Critic,
                    r.step,
                    None,
                    &c.rejected_responses,
                    &c.raw_response,
                );
            }
            RecordType::Candidate => {
                let p: CandidatePayload = r.payload_as()?;
                push_all(
                    &mut b,
                    ModelRole::Synthesizer,
                    r.step,
                    Some(p.strategy),
                    &p.rejected_responses,
                    &p.raw_response,
                );
            }
            RecordType::Verdict => {
                let p: VerdictPayload = r.payload_as()?;
                push_all(
                    &mut b,
                    ModelRole::Judge,
                    r.step,
                    None,
                    &p.rejected_responses,
                    &p.raw_response,
                );
            }
            _ => {}
        }
    }
    Ok(b)
}

fn compare(original: &[TraceRecord], replayed: &[TraceRecord], canvas: crate::grammar::Canvas) -> (usize, Vec<String>) {
    let mut compared = 0;
    let mut out = Vec::new();
    if original.len() != replayed.len() {
        out.push(format!(
            "trace has {} records, replay produced {}",
            original.len(),
            replayed.len()
        ));
    }
    for (i, (a, b)) in original.iter().zip(replayed).enumerate() {
        if (a.kind, a.step) != (b.kind, b.step) {
            out.push(format!(
                "record {i}: expected {} at step {}, got {} at step {}",
                a.kind.as_str(),
                a.step,
                b.kind.as_str(),
                b.step
            ));
            continue;
        }
        match (a.diagram_text(canvas), b.diagram_text(canvas)) {
            (Some(x), Some(y)) => {
                compared += 1;
                match (x, y) {
                    (Ok(x), Ok(y)) if x == y => {}
                    (Ok(x), Ok(y)) => out.push(format!(
                        "record {i} ({} step {}): diagram differs\n  trace:  {x}\n  replay: {y}",
                        a.kind.as_str(),
                        a.step
                    )),
                    (Err(e), _) | (_, Err(e)) => out.push(format!("record {i}: unreadable diagram: {e}")),
                }
            }
            (None, None) => {}
            _ => out.push(format!("record {i}: diagram present in only one trace")),
        }
        if a.kind == RecordType::Verdict && a.payload.get("selected") != b.payload.get("selected") {
            out.push(format!("record {i}: verdict at step {} selects differently", a.step));
        }
    }
    (compared, out)
}

fn rerun(trace: &SessionTrace) -> Result<(Session, Arc<MemorySink>), ReplayError> {
    let meta_record = trace
        .records
        .iter()
        .find(|r| r.kind == RecordType::SessionMeta)
        .ok_or(TraceError::MissingMeta)?
        .clone();
    let config = trace.meta()?.config;
    let backend = Arc::new(scripted_from_trace(trace)?);
    let gateway = ModelGateway::uniform(
        backend,
        GatewayPolicy {
            retry: RetryPolicy {
                attempts: 1,
                initial_backoff: std::time::Duration::ZERO,
            },
            ..GatewayPolicy::default()
        },
    );
    let sink = Arc::new(MemorySink::with_records(vec![meta_record]));
    let sketch = RasterImage::filled(config.canvas.width, config.canvas.height, [255, 255, 255, 255]);
    let engine_err = |step| move |source| ReplayError::Engine { step, source };
    let mut session = Session::initialize(sketch, config, gateway, sink.clone()).map_err(engine_err(0))?;
    for r in &trace.records {
        match r.kind {
            RecordType::Critique => {
                session.run_step().map_err(engine_err(r.step))?;
            }
            RecordType::Override => {
                let p: OverridePayload = r.payload_as()?;
                session.apply_override(p.action).map_err(engine_err(r.step))?;
            }
            _ => {}
        }
    }
    Ok((session, sink))
}

/// Re-runs `trace` and reports every divergence.
pub fn replay_trace(trace: &SessionTrace) -> Result<ReplayReport, ReplayError> {
    let canvas = trace.meta()?.config.canvas;
    let (_, sink) = rerun(trace)?;
    let replayed = sink.trace();
    let (diagrams_compared, mismatches) = compare(&trace.records, &replayed.records, canvas);
    Ok(ReplayReport {
        diagrams_compared,
        mismatches,
        replayed,
    })
}

/// Rebuilds the in-memory session a trace describes. The result still
/// holds the scripted gateway and a memory sink; see [`Session::rebind`].
pub fn restore_session(trace: &SessionTrace) -> Result<Session, ReplayError> {
    let canvas = trace.meta()?.config.canvas;
    let (session, sink) = rerun(trace)?;
    let (_, mismatches) = compare(&trace.records, &sink.trace().records, canvas);
    if !mismatches.is_empty() {
        return Err(ReplayError::Diverged(mismatches));
    }
    Ok(session)
}
