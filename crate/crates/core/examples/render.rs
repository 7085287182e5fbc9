//! Compile a diagram to SVG and rasterize it to PNG.
//!
//! ```text
//! cargo run --example render -- out-dir
//! ```

use std::path::PathBuf;

use sketch2svg::grammar::{Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::{compile_svg, decode_png, encode_png, render_diagram};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;

    let canvas = Canvas::new(240, 160)?;
    let house = Diagram::from_shapes(
        canvas,
        vec![
            Shape::new(ShapeType::Rectangle)
                .at(120.0, 105.0)
                .sized(100.0, 70.0)
                .filled(NamedColor::Yellow)
                .stroked(NamedColor::Black, 2.0),
            Shape::new(ShapeType::Triangle)
                .at(120.0, 45.0)
                .sized(120.0, 50.0)
                .filled(NamedColor::Red)
                .stroked(NamedColor::Black, 2.0),
            Shape::new(ShapeType::Rectangle)
                .at(120.0, 120.0)
                .sized(20.0, 40.0)
                .filled(NamedColor::Purple),
            Shape::new(ShapeType::Circle)
                .at(210.0, 30.0)
                .sized(30.0, 30.0)
                .filled(NamedColor::Orange),
        ],
    )?;

    let svg = compile_svg(&house);
    std::fs::write(out.join("house.svg"), &svg.text)?;

    // Draw at 4x, then box-filter back down to canvas size.
    let img = render_diagram(&house, 4)?.downsample(4);
    let png = encode_png(&img)?;
    std::fs::write(out.join("house.png"), &png)?;

    let back = decode_png(&png)?.image;
    assert_eq!(back, img);
    println!(
        "wrote {} ({} bytes of SVG)",
        out.join("house.svg").display(),
        svg.text.len()
    );
    println!(
        "wrote {} ({}x{})",
        out.join("house.png").display(),
        img.width,
        img.height
    );
    println!("pixel under the sun: {:?}", img.rgb(210, 30));
    Ok(())
}
