//! Prompt templates for the three roles.

use std::fmt::Write as _;
use std::sync::Arc;

use super::{CritiqueInput, CritiqueReport, FailureFeedback, ImageInput, JudgeInput, Prompt, Strategy};
use crate::grammar::{serialize_diagram, Canvas, Diagram, NamedColor, ShapeType};

/// Heading that opens every failure-feedback block in a critic prompt.
pub const FAILURE_HEADING: &str = "### Rejected modification";

/// Marker the critic must emit when nothing is left to fix.
pub const NO_DIFFERENCES: &str = "no_differences";

/// Reference text for the shape language, shown to the synthesizer.
pub fn grammar_text(canvas: Canvas) -> String {
    let types: Vec<&str> = ShapeType::ALL.iter().map(|t| t.as_str()).collect();
    let colors: Vec<&str> = NamedColor::ALL.iter().map(|c| c.as_str()).collect();
    format!(
        "A diagram is a JSON object {{\"shapes\": [...]}} drawn on a {w}x{h} canvas. \
Origin is the top-left corner, x grows right, y grows down, units are pixels. \
Shapes are painted in list order, later shapes on top.\n\
Each shape has these fields:\n\
- shape_type (required): one of {types}\n\
- x, y: center position (default 0)\n\
- scale_x, scale_y: width and height, must be positive (default 1); a circle uses scale_x as its diameter\n\
- fill_color: one of {colors} (default none)\n\
- stroke_color: one of {colors} (default black)\n\
- stroke_width: non-negative (default 1)\n\
- rotation: degrees clockwise about the center (default 0); an unrotated triangle points up\n\
No other fields or colors are allowed.",
        w = canvas.width,
        h = canvas.height,
        types = types.join(", "),
        colors = colors.join(", "),
    )
}

const CRITIC_SYSTEM: &str = "You are a careful visual critic for a diagram drawing program. \
You compare a target sketch with the current rendering and report what to change.";

const SYNTH_SYSTEM: &str = "You edit diagram programs written in a small JSON shape language. \
Reply with the complete updated program as a single JSON object and nothing else.";

const JUDGE_SYSTEM: &str = "You judge diagram renderings. \
Pick the option that best reconstructs the target sketch.";

fn critique_format() -> String {
    format!(
        "Reply with one JSON object:\n\
{{\"scene_description\": \"...\", \"status\": \"needs_changes\" or \"{NO_DIFFERENCES}\", \
\"discrepancies\": [\"...\"], \"suggestions\": [\"...\"]}}\n\
Give one suggestion per discrepancy, in the same order."
    )
}

pub fn describe_initial_prompt(sketch: &Arc<ImageInput>, instruction: &str, canvas: Canvas) -> Prompt {
    let mut p = Prompt {
        system: CRITIC_SYSTEM.into(),
        parts: Vec::new(),
    };
    p.push_text(format!("Instruction: {instruction}"));
    p.push_text("Target sketch:");
    p.push_image(sketch.clone());
    p.push_text(format!(
        "Describe the sketch using only these primitives: circle, rectangle, ellipse, triangle. \
For every primitive give its approximate position on the {canvas} canvas, its approximate size, \
its fill color and its relations to neighbouring primitives. \
Leave discrepancies and suggestions empty.\n{}",
        critique_format()
    ));
    p
}

pub fn initial_program_prompt(description: &CritiqueReport, instruction: &str, canvas: Canvas) -> Prompt {
    let mut p = Prompt {
        system: SYNTH_SYSTEM.into(),
        parts: Vec::new(),
    };
    p.push_text(grammar_text(canvas));
    p.push_text(format!("Instruction: {instruction}"));
    p.push_text(format!(
        "Scene description:\n{}\n\nWrite a program that draws this scene.",
        description.scene_description
    ));
    p
}

fn push_failures(p: &mut Prompt, failures: &[FailureFeedback]) {
    if failures.is_empty() {
        return;
    }
    let mut t = String::from(
        "The following modifications were tried and rejected because they did not improve the \
diagram. Revise your suggestions and do not repeat them.",
    );
    for f in failures {
        let _ = write!(t, "\n\n{FAILURE_HEADING} (step {})", f.step);
        t.push_str("\nSuggestions:");
        for s in &f.rejected_suggestions {
            let _ = write!(t, "\n- {s}");
        }
        t.push_str("\nResulting changes:");
        for d in &f.rejected_deltas {
            let _ = write!(t, "\n- {d}");
        }
    }
    p.push_text(t);
}

pub fn critique_prompt(input: &CritiqueInput<'_>) -> Prompt {
    let mut p = Prompt {
        system: CRITIC_SYSTEM.into(),
        parts: Vec::new(),
    };
    p.push_text(format!("Instruction: {}", input.instruction));
    p.push_text("Target sketch:");
    p.push_image(input.sketch.clone());
    p.push_text("Current rendering:");
    p.push_image(input.current.clone());
    p.push_text(format!(
        "Current program:\n{}",
        serialize_diagram(input.current_program)
    ));
    p.push_text(format!(
        "Answer in three parts.\n\
1. scene_description: a high-level description of the target scene.\n\
2. discrepancies: the one to three most important differences between the current rendering and \
the target. Limit yourself to at most three so each step stays small.\n\
3. suggestions: one targeted modification per discrepancy.\n\
Prefer qualitative statements about relative position, size and contact, anchored on other \
primitives or on the canvas, for example \"the blue rectangle should just touch the red circle\". \
If the rendering already matches the target, set status to \"{NO_DIFFERENCES}\" and leave the lists empty.\n{}",
        critique_format()
    ));
    push_failures(&mut p, input.failures);
    p
}

fn strategy_directive(strategy: Strategy) -> &'static str {
    match strategy {
        Strategy::Conservative => {
            "Strategy: conservative. Apply only the single most confident suggestion and leave \
everything else unchanged."
        }
        Strategy::Moderate => "Strategy: moderate. Apply about half of the suggestions, the most confident first.",
        Strategy::Aggressive => "Strategy: aggressive. Apply every suggestion.",
        Strategy::Alternative => {
            "Strategy: alternative. Apply every suggestion, but choose a structurally different \
layout from the obvious one."
        }
        Strategy::Focused => {
            "Strategy: focused. Apply every suggestion that touches the single most discrepant \
region and leave the rest of the diagram unchanged."
        }
    }
}

pub fn synthesize_prompt(
    current: &Diagram,
    critique: &CritiqueReport,
    strategy: Strategy,
    instruction: &str,
) -> Prompt {
    let mut p = Prompt {
        system: SYNTH_SYSTEM.into(),
        parts: Vec::new(),
    };
    p.push_text(grammar_text(current.canvas));
    p.push_text(format!("Instruction: {instruction}"));
    p.push_text(format!("Current program:\n{}", serialize_diagram(current)));
    let mut t = format!(
        "Scene description:\n{}\n\nRespect the description to keep global constraints such as \
alignment and connectivity.\n\nSuggestions:",
        critique.scene_description
    );
    for (i, s) in critique.suggestions.iter().enumerate() {
        let _ = write!(t, "\n{}. {s}", i + 1);
    }
    p.push_text(t);
    p.push_text(strategy_directive(strategy));
    p
}

pub fn judge_prompt(input: &JudgeInput<'_>) -> Prompt {
    let mut p = Prompt {
        system: JUDGE_SYSTEM.into(),
        parts: Vec::new(),
    };
    p.push_text("Target sketch:");
    p.push_image(input.sketch.clone());
    p.push_text("Option 0 (current):");
    p.push_image(input.current.clone());
    for (i, (strategy, img)) in input.candidates.iter().enumerate() {
        p.push_text(format!("Option {} ({strategy}):", i + 1));
        p.push_image(img.clone());
    }
    p.push_text(format!(
        "Which option best reconstructs the sketch? Choose 0 if no candidate improves on the \
current rendering. Reply with one JSON object: {{\"selected\": <0..{}>, \"rationale\": \"...\"}}",
        input.candidates.len()
    ));
    p
}

pub fn repair_message(previous: &str, error: &str) -> String {
    format!(
        "Your previous response could not be used: {error}\nPrevious response:\n{previous}\n\
Respond again with only the corrected JSON object."
    )
}
