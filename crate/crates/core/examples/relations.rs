//! Qualitative relations and the structural distance between diagrams.
//!
//! ```text
//! cargo run --example relations
//! ```

use sketch2svg::geometry::{describe_relation, extract_relations, relation_diff, structural_distance};
use sketch2svg::grammar::{Canvas, Diagram, NamedColor, Shape, ShapeType};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let canvas = Canvas::new(200, 200)?;
    let table = Shape::new(ShapeType::Rectangle)
        .at(100.0, 150.0)
        .sized(120.0, 20.0)
        .filled(NamedColor::Orange);
    // Resting on the table: the gap between the two is under a pixel.
    let ball = Shape::new(ShapeType::Circle)
        .at(100.0, 120.0)
        .sized(40.0, 40.0)
        .filled(NamedColor::Blue);
    let lamp = Shape::new(ShapeType::Triangle)
        .at(40.0, 40.0)
        .sized(30.0, 30.0)
        .filled(NamedColor::Yellow);
    let target = Diagram::from_shapes(canvas, vec![table, ball, lamp])?;

    println!("relations in the target:");
    for r in extract_relations(&target) {
        println!("  {}", describe_relation(&target, &r));
    }

    // The ball floats a little and the lamp drifted right.
    let mut current = target.clone();
    current.shapes[1].y = 100.0;
    current.shapes[2].x = 100.0;
    let d = structural_distance(&current, &target)?;
    println!("\ndistance {:.4}, matching {:?}", d.value, d.matching);

    let diff = relation_diff(&current, &target)?;
    for line in &diff.missing {
        println!("  missing: {line}");
    }
    for line in &diff.extra {
        println!("  extra:   {line}");
    }
    Ok(())
}
