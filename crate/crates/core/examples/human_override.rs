//! Review mode: the loop pauses after every step so a person can step in.
//!
//! ```text
//! cargo run --example human_override
//! ```

use std::sync::Arc;

use serde_json::json;
use sketch2svg::engine::{Override, Phase, Session, SessionConfig};
use sketch2svg::gateway::oracle::OracleBackend;
use sketch2svg::gateway::{GatewayPolicy, ModelGateway};
use sketch2svg::grammar::{serialize_diagram, Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::render_diagram;
use sketch2svg::trace::MemorySink;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let canvas = Canvas::new(120, 120)?;
    let target = Diagram::from_shapes(
        canvas,
        vec![
            Shape::new(ShapeType::Circle)
                .at(41.7, 43.2)
                .sized(33.0, 33.0)
                .filled(NamedColor::Purple),
            Shape::new(ShapeType::Rectangle)
                .at(83.1, 79.4)
                .sized(27.0, 41.0)
                .filled(NamedColor::Green)
                .rotated(12.0),
        ],
    )?;
    let gateway = ModelGateway::uniform(Arc::new(OracleBackend::new(target.clone())), GatewayPolicy::default());
    let config = SessionConfig {
        review: true,
        ..SessionConfig::new(canvas)
    };
    let sink = Arc::new(MemorySink::new());
    let mut session = Session::initialize(render_diagram(&target, 1)?, config, gateway, sink.clone())?;

    session.run_step()?;
    assert_eq!(session.state().phase, Phase::AwaitingHuman);
    let step = session.state().step(1).expect("step 1");
    for (i, c) in step.candidates.iter().enumerate() {
        println!(
            "candidate {} ({}): {} shapes",
            i + 1,
            c.strategy,
            c.diagram.shapes.len()
        );
    }

    // Prefer the conservative candidate over the judge's pick.
    session.apply_override(Override::SelectCandidate { step: 1, index: 1 })?;
    println!("selected candidate 1, phase {}", session.state().phase);

    // Steer later critiques.
    session.apply_override(Override::InjectInstruction {
        text: "The green rectangle leans slightly to the right.".into(),
    })?;

    // Hand-edit the program: drop the rectangle entirely.
    let mut doc: serde_json::Value = serde_json::from_str(&serialize_diagram(&session.state().current))?;
    doc["shapes"].as_array_mut().unwrap().truncate(1);
    session.apply_override(Override::EditProgram { diagram: json!(doc) })?;
    println!("after edit: {} shape(s)", session.state().current.shapes.len());

    session.run_step()?;
    println!("step 2 restored {} shape(s)", session.state().current.shapes.len());

    session.apply_override(Override::AcceptAsFinal)?;
    println!("{} after {} step(s)", session.state().phase, session.state().step_count);
    for r in sink.trace().records {
        println!("  {:>3} {}", r.step, r.kind.as_str());
    }
    Ok(())
}
