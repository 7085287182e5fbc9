//! A target-aware stand-in for all three model roles.
//!
//! The oracle knows the diagram the sketch was drawn from. It speaks the
//! same text protocol as a real model, so the gateway's parsing and repair
//! paths are exercised unchanged.
//!
//! Behaviour per role:
//! * critic: builds an edit script from the optimal structural matching
//!   between current and target, ranks edits by how much they lower the
//!   matched cost, skips suggestions that were already rejected and reports
//!   the top three. It reports `no_differences` once the structural distance
//!   is below the threshold.
//! * synthesizer: reads the `[edit: ...]` tags in the critique suggestions
//!   and applies them according to the strategy table:
//!
//!   | strategy     | edits applied                                        |
//!   |--------------|------------------------------------------------------|
//!   | conservative | the first suggestion                                 |
//!   | moderate     | the first `ceil(n / 2)`                              |
//!   | aggressive   | all                                                  |
//!   | alternative  | all, with added shapes placed beneath the rest       |
//!   | focused      | all suggestions that touch the first one's shape     |
//!
//!   The initial program is the target snapped to a coarse grid: positions
//!   and sizes to 5% of the canvas, rotations to 15 degrees.
//! * judge: the structural argmin over `{current} ∪ candidates`. Current
//!   wins unless a candidate is strictly closer; ties go to the lowest index.

use std::fmt::Write as _;

use serde_json::json;

use super::{BackendError, ModelBackend, ModelRequest, RequestKind, Strategy};
use crate::geometry::{
    angular_difference, extract_relations, shape_cost, structural_distance_with, CostWeights, RelationKind,
    EQUIVALENCE_THRESHOLD,
};
use crate::grammar::{
    format_number, quantize, serialize_diagram, Canvas, Diagram, FieldValue, Shape, ShapeField, ShapeType,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub weights: CostWeights,
    pub threshold: f64,
    /// Grid used for the initial program, as a fraction of the canvas.
    pub grid_fraction: f64,
    pub rotation_step: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            threshold: EQUIVALENCE_THRESHOLD,
            grid_fraction: 0.05,
            rotation_step: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Edit {
    Modify {
        index: usize,
        field: ShapeField,
        value: FieldValue,
    },
    Add {
        target_index: usize,
        shape: Shape,
    },
    Remove {
        index: usize,
    },
}

/// The shape an edit is about: an existing one or one still to be added.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditSubject {
    Current(usize),
    Target(usize),
}

impl Edit {
    /// Machine-readable tag embedded in suggestion text.
    pub fn tag(&self) -> String {
        match self {
            Edit::Modify { index, field, .. } => format!("[edit: modify {index} {field}]"),
            Edit::Add { target_index, .. } => format!("[edit: add {target_index}]"),
            Edit::Remove { index } => format!("[edit: remove {index}]"),
        }
    }

    pub fn subject(&self) -> EditSubject {
        match self {
            Edit::Modify { index, .. } | Edit::Remove { index } => EditSubject::Current(*index),
            Edit::Add { target_index, .. } => EditSubject::Target(*target_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEdit {
    pub edit: Edit,
    /// Drop in matched cost if this edit alone were applied.
    pub impact: f64,
}

/// Every edit that turns `current` into `target` under the optimal
/// structural matching, highest impact first.
pub fn edit_script(current: &Diagram, target: &Diagram, weights: &CostWeights) -> Vec<RankedEdit> {
    let Ok(sd) = structural_distance_with(current, target, weights) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut matched_current = vec![false; current.shapes.len()];
    let mut matched_target = vec![false; target.shapes.len()];
    for &(i, j) in &sd.matching {
        matched_current[i] = true;
        matched_target[j] = true;
        let (a, b) = (&current.shapes[i], &target.shapes[j]);
        let base = shape_cost(current.canvas, a, b, weights);
        for field in ShapeField::ALL {
            let value = b.get(field);
            // A circle's diameter is scale_x; its scale_y is never drawn.
            if a.get(field) == value || (a.shape_type == ShapeType::Circle && field == ShapeField::ScaleY) {
                continue;
            }
            let mut fixed = *a;
            fixed.set(field, value);
            let impact = base - shape_cost(current.canvas, &fixed, b, weights);
            out.push(RankedEdit {
                edit: Edit::Modify { index: i, field, value },
                impact,
            });
        }
    }
    for (i, m) in matched_current.iter().enumerate() {
        if !m {
            out.push(RankedEdit {
                edit: Edit::Remove { index: i },
                impact: weights.unmatched_penalty,
            });
        }
    }
    for (j, m) in matched_target.iter().enumerate() {
        if !m {
            out.push(RankedEdit {
                edit: Edit::Add {
                    target_index: j,
                    shape: target.shapes[j],
                },
                impact: weights.unmatched_penalty,
            });
        }
    }
    // Stable sort keeps the construction order (matched shapes by index,
    // fields in canonical order, removals, additions) among equal impacts.
    out.sort_by(|a, b| b.impact.total_cmp(&a.impact));
    out
}

/// Where added shapes go in the drawing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    OnTop,
    Beneath,
}

/// Applies edits: field changes in place, then removals, then additions in
/// target order, on top of or beneath the existing shapes.
pub fn apply_edits(current: &Diagram, edits: &[Edit], placement: Placement) -> Diagram {
    let mut shapes: Vec<Option<Shape>> = current.shapes.iter().copied().map(Some).collect();
    let mut added: Vec<(usize, Shape)> = Vec::new();
    for e in edits {
        match e {
            Edit::Modify { index, field, value } => {
                if let Some(Some(s)) = shapes.get_mut(*index) {
                    s.set(*field, *value);
                    if s.shape_type == ShapeType::Circle && *field == ShapeField::ScaleX {
                        s.set(ShapeField::ScaleY, *value);
                    }
                }
            }
            Edit::Remove { index } => {
                if let Some(slot) = shapes.get_mut(*index) {
                    *slot = None;
                }
            }
            Edit::Add { target_index, shape } => {
                if !added.iter().any(|(j, _)| j == target_index) {
                    added.push((*target_index, *shape));
                }
            }
        }
    }
    added.sort_by_key(|(j, _)| *j);
    let kept = shapes.into_iter().flatten();
    let added = added.into_iter().map(|(_, s)| s);
    let all: Vec<Shape> = match placement {
        Placement::OnTop => kept.chain(added).collect(),
        Placement::Beneath => added.chain(kept).collect(),
    };
    Diagram::from_shapes(current.canvas, all.clone()).unwrap_or(Diagram {
        canvas: current.canvas,
        shapes: all,
    })
}

fn snap(v: f64, step: f64) -> f64 {
    quantize((v / step).round() * step)
}

/// The target snapped to a coarse grid.
pub fn initial_approximation(target: &Diagram, options: &OracleOptions) -> Diagram {
    let gx = (f64::from(target.canvas.width) * options.grid_fraction).max(1.0);
    let gy = (f64::from(target.canvas.height) * options.grid_fraction).max(1.0);
    let shapes = target
        .shapes
        .iter()
        .map(|s| {
            let mut a = *s;
            a.x = snap(s.x, gx);
            a.y = snap(s.y, gy);
            a.scale_x = snap(s.scale_x, gx).max(quantize(gx));
            a.scale_y = if s.shape_type == ShapeType::Circle {
                a.scale_x
            } else {
                snap(s.scale_y, gy).max(quantize(gy))
            };
            a.rotation = snap(s.rotation, options.rotation_step).rem_euclid(360.0);
            a
        })
        .collect();
    Diagram::from_shapes(target.canvas, shapes).unwrap_or_else(|_| target.clone())
}

fn region(canvas: Canvas, x: f64, y: f64) -> &'static str {
    let col = ((x / f64::from(canvas.width)) * 3.0).floor().clamp(0.0, 2.0) as usize;
    let row = ((y / f64::from(canvas.height)) * 3.0).floor().clamp(0.0, 2.0) as usize;
    [
        ["top-left", "top", "top-right"],
        ["left", "center", "right"],
        ["bottom-left", "bottom", "bottom-right"],
    ][row][col]
}

fn noun(s: &Shape) -> String {
    if s.fill_color.is_none() {
        format!("outlined {}", s.shape_type)
    } else {
        format!("{} {}", s.fill_color, s.shape_type)
    }
}

fn label(d: &Diagram, i: usize) -> String {
    format!("the {} #{i}", noun(&d.shapes[i]))
}

fn percent(v: f64, extent: u32) -> String {
    format!("{:.0}%", 100.0 * v / f64::from(extent))
}

/// Scene description of a diagram in terms of primitives, regions and
/// relations.
pub fn describe_scene(d: &Diagram) -> String {
    let mut t = format!("A {} canvas with {} primitive(s).", d.canvas, d.shapes.len());
    for (i, s) in d.shapes.iter().enumerate() {
        let _ = write!(
            t,
            " #{i}: a {} in the {} area, about {} of the width by {} of the height",
            noun(s),
            region(d.canvas, s.x, s.y),
            percent(s.scale_x, d.canvas.width),
            percent(s.scale_y, d.canvas.height),
        );
        if s.rotation != 0.0 {
            let _ = write!(t, ", turned {} degrees clockwise", format_number(s.rotation));
        }
        t.push('.');
    }
    let notable: Vec<String> = extract_relations(d)
        .into_iter()
        .filter(|r| {
            matches!(r.kind, RelationKind::Touching | RelationKind::Contains)
                && !(r.kind == RelationKind::Touching && r.subject > r.object)
        })
        .take(12)
        .map(|r| format!("#{} {} #{}", r.subject, r.kind, r.object))
        .collect();
    if !notable.is_empty() {
        let _ = write!(t, " Relations: {}.", notable.join("; "));
    }
    t
}

fn relation_phrase(kind: RelationKind) -> &'static str {
    match kind {
        RelationKind::Touching => "just touching",
        RelationKind::Contains => "around",
        RelationKind::LeftOf => "left of",
        RelationKind::RightOf => "right of",
        RelationKind::Above => "above",
        RelationKind::Below => "below",
        RelationKind::HorizontallyAligned => "level with",
        RelationKind::VerticallyAligned => "in line with",
        RelationKind::LargerThan => "larger than",
        RelationKind::SameColor => "in the same color as",
    }
}

/// Anchor for a shape that is about to be added: a relation to a shape that
/// already exists, or else a canvas region.
fn add_anchor(current: &Diagram, target: &Diagram, j: usize, matching: &[(usize, usize)]) -> String {
    const PREFERRED: [RelationKind; 6] = [
        RelationKind::Touching,
        RelationKind::Contains,
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::Above,
        RelationKind::Below,
    ];
    let relations = extract_relations(target);
    for kind in PREFERRED {
        for r in relations.iter().filter(|r| r.kind == kind && r.subject == j) {
            if let Some(&(i, _)) = matching.iter().find(|(_, t)| *t == r.object) {
                return format!("{} {}", relation_phrase(kind), label(current, i));
            }
        }
    }
    let s = &target.shapes[j];
    format!("in the {} area of the canvas", region(target.canvas, s.x, s.y))
}

/// Discrepancy and suggestion text for one edit.
fn edit_text(edit: &Edit, current: &Diagram, target: &Diagram, matching: &[(usize, usize)]) -> (String, String) {
    let canvas = current.canvas;
    let (discrepancy, suggestion) = match edit {
        Edit::Add { target_index, shape } => {
            let anchor = add_anchor(current, target, *target_index, matching);
            (
                format!("a {} {anchor} is missing", noun(shape)),
                format!("add a {} {anchor}", noun(shape)),
            )
        }
        Edit::Remove { index } => {
            let l = label(current, *index);
            (format!("{l} does not appear in the sketch"), format!("remove {l}"))
        }
        Edit::Modify { index, field, value } => {
            let s = &current.shapes[*index];
            let l = label(current, *index);
            let old = s.get(*field);
            let delta = match (old, value) {
                (FieldValue::Number(o), FieldValue::Number(n)) => n - o,
                _ => 0.0,
            };
            match field {
                ShapeField::X => {
                    let (dir, away) = if delta > 0.0 {
                        ("right", "left")
                    } else {
                        ("left", "right")
                    };
                    (
                        format!("{l} sits too far {away}"),
                        format!(
                            "move {l} {dir} by about {} of the canvas width",
                            percent(delta.abs(), canvas.width)
                        ),
                    )
                }
                ShapeField::Y => {
                    let (dir, away) = if delta > 0.0 { ("down", "high") } else { ("up", "low") };
                    (
                        format!("{l} sits too {away}"),
                        format!(
                            "move {l} {dir} by about {} of the canvas height",
                            percent(delta.abs(), canvas.height)
                        ),
                    )
                }
                ShapeField::ScaleX => {
                    let (w, c) = if delta > 0.0 {
                        ("narrow", "wider")
                    } else {
                        ("wide", "narrower")
                    };
                    (format!("{l} is too {w}"), format!("make {l} {c}"))
                }
                ShapeField::ScaleY => {
                    let (w, c) = if delta > 0.0 {
                        ("short", "taller")
                    } else {
                        ("tall", "shorter")
                    };
                    (format!("{l} is too {w}"), format!("make {l} {c}"))
                }
                ShapeField::FillColor => (
                    format!("{l} should be filled {value}"),
                    format!("fill {l} with {value}"),
                ),
                ShapeField::StrokeColor => (
                    format!("the outline of {l} should be {value}"),
                    format!("outline {l} in {value}"),
                ),
                ShapeField::StrokeWidth => {
                    let w = if delta > 0.0 { "thicker" } else { "thinner" };
                    (
                        format!("the outline of {l} should be {w}"),
                        format!("make the outline of {l} {w}"),
                    )
                }
                ShapeField::Rotation => {
                    let (o, n) = match (old, value) {
                        (FieldValue::Number(o), FieldValue::Number(n)) => (o, *n),
                        _ => (0.0, 0.0),
                    };
                    let cw = (n - o).rem_euclid(360.0) <= 180.0;
                    let dir = if cw { "clockwise" } else { "counter-clockwise" };
                    (
                        format!("{l} is turned the wrong way"),
                        format!("rotate {l} {dir} by about {:.0} degrees", angular_difference(o, n)),
                    )
                }
            }
        }
    };
    (discrepancy, format!("{suggestion} {}", edit.tag()))
}

/// Pulls `[edit: ...]` tags out of suggestion text, in order.
pub fn parse_tags(suggestions: &[String]) -> Vec<String> {
    suggestions
        .iter()
        .filter_map(|s| {
            let start = s.find("[edit: ")?;
            let end = s[start..].find(']')? + start;
            Some(s[start..=end].to_string())
        })
        .collect()
}

/// Edits a strategy applies, given tagged edits in suggestion order.
pub fn select_edits(strategy: Strategy, suggested: &[Edit]) -> (Vec<Edit>, Placement) {
    let budget = strategy.suggestion_budget(suggested.len());
    match strategy {
        Strategy::Focused => {
            let Some(subject) = suggested.first().map(Edit::subject) else {
                return (Vec::new(), Placement::OnTop);
            };
            (
                suggested.iter().filter(|e| e.subject() == subject).cloned().collect(),
                Placement::OnTop,
            )
        }
        Strategy::Alternative => (suggested.to_vec(), Placement::Beneath),
        _ => (suggested[..budget].to_vec(), Placement::OnTop),
    }
}

pub struct OracleBackend {
    target: Diagram,
    options: OracleOptions,
}

impl OracleBackend {
    pub fn new(target: Diagram) -> Self {
        Self::with_options(target, OracleOptions::default())
    }

    pub fn with_options(target: Diagram, options: OracleOptions) -> Self {
        Self { target, options }
    }

    pub fn target(&self) -> &Diagram {
        &self.target
    }

    fn check_canvas(&self, canvas: Canvas) -> Result<(), BackendError> {
        if canvas != self.target.canvas {
            return Err(BackendError::Fatal(format!(
                "oracle target canvas {} differs from session canvas {canvas}",
                self.target.canvas
            )));
        }
        Ok(())
    }

    fn critique(&self, current: &Diagram, rejected: &[&str]) -> String {
        let description = describe_scene(&self.target);
        let w = &self.options.weights;
        let sd = structural_distance_with(current, &self.target, w).ok();
        let distance = sd.as_ref().map_or(f64::INFINITY, |d| d.value);
        if distance < self.options.threshold {
            return json!({
                "scene_description": description,
                "status": super::prompts::NO_DIFFERENCES,
                "discrepancies": [],
                "suggestions": [],
            })
            .to_string();
        }
        let matching = sd.map(|d| d.matching).unwrap_or_default();
        let texts: Vec<(String, String)> = edit_script(current, &self.target, w)
            .iter()
            .map(|r| edit_text(&r.edit, current, &self.target, &matching))
            .collect();
        let mut fresh: Vec<&(String, String)> = texts.iter().filter(|(_, s)| !rejected.contains(&s.as_str())).collect();
        if fresh.is_empty() {
            fresh = texts.iter().collect();
        }
        fresh.truncate(super::MAX_DISCREPANCIES);
        json!({
            "scene_description": description,
            "status": "needs_changes",
            "discrepancies": fresh.iter().map(|(d, _)| d).collect::<Vec<_>>(),
            "suggestions": fresh.iter().map(|(_, s)| s).collect::<Vec<_>>(),
        })
        .to_string()
    }

    fn synthesize(&self, current: &Diagram, suggestions: &[String], strategy: Strategy) -> String {
        let script = edit_script(current, &self.target, &self.options.weights);
        let tags = parse_tags(suggestions);
        let suggested: Vec<Edit> = if tags.is_empty() {
            script
                .iter()
                .take(super::MAX_DISCREPANCIES)
                .map(|r| r.edit.clone())
                .collect()
        } else {
            tags.iter()
                .filter_map(|t| script.iter().find(|r| &r.edit.tag() == t).map(|r| r.edit.clone()))
                .collect()
        };
        let (edits, placement) = select_edits(strategy, &suggested);
        let d = apply_edits(current, &edits, placement);
        format!("Updated program ({strategy}):\n```json\n{}\n```", serialize_diagram(&d))
    }

    fn judge(&self, current: &Diagram, candidates: &[Diagram]) -> String {
        let w = &self.options.weights;
        let dist = |d: &Diagram| structural_distance_with(d, &self.target, w).map_or(f64::INFINITY, |s| s.value);
        let mut best = (0usize, dist(current));
        let mut scores = vec![format!("0: {:.4}", best.1)];
        for (k, c) in candidates.iter().enumerate() {
            let d = dist(c);
            scores.push(format!("{}: {d:.4}", k + 1));
            if d < best.1 {
                best = (k + 1, d);
            }
        }
        json!({
            "selected": best.0,
            "rationale": format!("structural distance to target ({})", scores.join(", ")),
        })
        .to_string()
    }
}

impl ModelBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        let ctx = request.context;
        self.check_canvas(ctx.canvas)?;
        let need_current = || {
            ctx.current
                .ok_or_else(|| BackendError::Fatal("request carries no current program".into()))
        };
        Ok(match ctx.kind {
            RequestKind::DescribeInitial => json!({
                "scene_description": describe_scene(&self.target),
                "discrepancies": [],
            })
            .to_string(),
            RequestKind::InitialProgram => format!(
                "```json\n{}\n```",
                serialize_diagram(&initial_approximation(&self.target, &self.options))
            ),
            RequestKind::Critique => {
                let rejected: Vec<&str> = ctx
                    .failures
                    .iter()
                    .flat_map(|f| f.rejected_suggestions.iter().map(String::as_str))
                    .collect();
                self.critique(need_current()?, &rejected)
            }
            RequestKind::Synthesize => {
                let suggestions = ctx.critique.map(|c| c.suggestions.as_slice()).unwrap_or(&[]);
                let strategy = request.strategy.unwrap_or(Strategy::Aggressive);
                self.synthesize(need_current()?, suggestions, strategy)
            }
            RequestKind::Judge => self.judge(need_current()?, ctx.candidates),
        })
    }
}
