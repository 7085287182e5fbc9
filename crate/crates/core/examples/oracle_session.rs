//! Run the refinement loop end to end with the target-aware oracle.
//!
//! The oracle plays critic, synthesizer and judge, so the loop runs
//! offline and deterministically.
//!
//! ```text
//! cargo run --example oracle_session
//! ```

use std::sync::Arc;

use sketch2svg::engine::{Session, SessionConfig};
use sketch2svg::gateway::oracle::OracleBackend;
use sketch2svg::gateway::{GatewayPolicy, ModelGateway};
use sketch2svg::geometry::structural_distance;
use sketch2svg::grammar::{Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::render_diagram;
use sketch2svg::trace::MemorySink;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let canvas = Canvas::new(160, 120)?;
    let target = Diagram::from_shapes(
        canvas,
        vec![
            Shape::new(ShapeType::Ellipse)
                .at(47.3, 61.8)
                .sized(52.0, 31.0)
                .filled(NamedColor::Green)
                .rotated(23.0),
            Shape::new(ShapeType::Rectangle)
                .at(112.6, 40.2)
                .sized(37.0, 22.5)
                .filled(NamedColor::Red)
                .rotated(-8.0),
            Shape::new(ShapeType::Triangle)
                .at(109.4, 88.0)
                .sized(28.0, 33.0)
                .filled(NamedColor::Blue)
                .stroked(NamedColor::Black, 1.5),
        ],
    )?;
    // Stand-in for the hand-drawn sketch: the target's own render.
    let sketch = render_diagram(&target, 1)?;

    let gateway = ModelGateway::uniform(Arc::new(OracleBackend::new(target.clone())), GatewayPolicy::default());
    let sink = Arc::new(MemorySink::new());
    let mut session = Session::initialize(sketch, SessionConfig::new(canvas), gateway, sink.clone())?;
    println!(
        "initial distance {:.4}",
        structural_distance(&session.state().current, &target)?.value
    );

    while !session.state().phase.is_terminal() {
        let step = session.run_step()?;
        let Some(verdict) = &step.verdict else {
            println!("step {}: critic reports no differences", step.index);
            continue;
        };
        println!(
            "step {}: {:?}, judge picked {} ({} discrepancies), distance {:.4}",
            step.index,
            step.outcome,
            verdict.selected,
            step.critique.discrepancies.len(),
            structural_distance(&step.diagram_after, &target)?.value,
        );
        for d in &step.critique.discrepancies {
            println!("    - {d}");
        }
    }
    let state = session.state();
    println!(
        "{} after {} step(s), {} trace records",
        state.phase,
        state.step_count,
        sink.trace().records.len()
    );
    Ok(())
}
