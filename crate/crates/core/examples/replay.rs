//! Persist a session in the store, then replay and restore it from its trace.
//!
//! ```text
//! cargo run --example replay
//! ```

use std::sync::Arc;

use sketch2svg::engine::{Session, SessionConfig};
use sketch2svg::gateway::oracle::OracleBackend;
use sketch2svg::gateway::{GatewayPolicy, ModelGateway};
use sketch2svg::grammar::{Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::{encode_png, render_diagram};
use sketch2svg::replay::{replay_trace, restore_session};
use sketch2svg::store::SessionStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join(format!("sketch2svg-replay-{}", std::process::id()));
    let store = Arc::new(SessionStore::open(&root)?);

    let canvas = Canvas::new(100, 80)?;
    let target = Diagram::from_shapes(
        canvas,
        vec![
            Shape::new(ShapeType::Triangle)
                .at(31.4, 37.7)
                .sized(23.0, 29.0)
                .filled(NamedColor::Orange)
                .rotated(40.0),
            Shape::new(ShapeType::Ellipse)
                .at(70.2, 52.9)
                .sized(34.0, 19.0)
                .filled(NamedColor::Blue),
        ],
    )?;
    let sketch = render_diagram(&target, 1)?;
    let config = SessionConfig::new(canvas);
    let meta = store.create_session(&config, "oracle", &encode_png(&sketch)?)?;

    let gateway = ModelGateway::uniform(Arc::new(OracleBackend::new(target)), GatewayPolicy::default());
    let mut session = Session::initialize(sketch, config, gateway, Arc::new(store.sink(&meta.id)))?;
    session.run_to_completion()?;
    println!(
        "session {} {} after {} step(s)",
        meta.id,
        session.state().phase,
        session.state().step_count
    );

    // Every model reply is in the trace, so a scripted backend can stand in
    // for the oracle and must produce the same diagrams byte for byte.
    let trace = store.load_trace(&meta.id)?;
    println!("{}", store.trace_path(&meta.id).display());
    let report = replay_trace(&trace)?;
    println!(
        "replayed {} records, compared {} diagrams, faithful: {}",
        trace.records.len(),
        report.diagrams_compared,
        report.is_faithful()
    );

    let restored = restore_session(&trace)?;
    assert_eq!(restored.state(), session.state());
    println!("restored state matches the live session");

    std::fs::remove_dir_all(&root)?;
    Ok(())
}
