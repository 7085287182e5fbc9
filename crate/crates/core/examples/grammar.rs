//! Parse, validate and diff shape-grammar documents.
//!
//! ```text
//! cargo run --example grammar
//! ```

use sketch2svg::grammar::{apply_delta, diff_diagrams, parse_diagram, serialize_diagram, validate_document, Canvas};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let canvas = Canvas::new(200, 120)?;

    // Omitted fields take their defaults; numbers are snapped to 4 decimals.
    let scene = parse_diagram(
        r#"{"shapes": [
            {"shape_type": "rectangle", "x": 60, "y": 60, "scale_x": 80, "scale_y": 40, "fill_color": "blue"},
            {"shape_type": "circle", "x": 140.123456, "y": 60, "scale_x": 30, "scale_y": 30, "fill_color": "red"}
        ]}"#,
        canvas,
    )?;
    println!("canonical form:\n{}\n", serialize_diagram(&scene));

    // Validation collects every problem with a JSON pointer to it.
    let report = validate_document(
        r#"{"shapes": [{"shape_type": "hexagon"}, {"shape_type": "circle", "fill_color": "Red", "scale_x": -1}]}"#,
        canvas,
    );
    for e in &report.errors {
        println!("error [{}] {}", e.code(), e);
    }
    println!();

    let mut edited = scene.clone();
    edited.shapes[1].x = 170.0;
    edited.shapes.remove(0);
    let delta = diff_diagrams(&scene, &edited)?;
    println!("delta: {}", serde_json::to_string(&delta)?);
    assert_eq!(apply_delta(&scene, &delta)?, edited);
    println!("apply_delta(scene, delta) == edited");
    Ok(())
}
