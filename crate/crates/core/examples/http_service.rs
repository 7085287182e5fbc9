//! Start the HTTP service in-process and drive a session over HTTP.
//!
//! ```text
//! cargo run --example http_service
//! ```
//!
//! The sketch PNG carries its source diagram in a `diagram` text chunk,
//! which the default oracle backend uses as its target.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use reqwest::blocking::{multipart, Client};
use serde_json::{json, Value};
use sketch2svg::config::{AppConfig, CANVAS_CHUNK, DIAGRAM_CHUNK};
use sketch2svg::grammar::{serialize_diagram, Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::{encode_png_with_text, render_diagram};
use sketch2svg::service::{router, AppState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join(format!("sketch2svg-http-{}", std::process::id()));
    let state = AppState::new(AppConfig {
        store_root: root.clone(),
        ..AppConfig::default()
    })?;
    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    runtime.spawn(async move { axum::serve(listener, router(state)).await });
    println!("listening on {base}");

    let canvas = Canvas::new(160, 120)?;
    let target = Diagram::from_shapes(
        canvas,
        vec![
            Shape::new(ShapeType::Rectangle)
                .at(57.3, 66.1)
                .sized(61.0, 35.0)
                .filled(NamedColor::Green)
                .rotated(7.0),
            Shape::new(ShapeType::Circle)
                .at(118.8, 38.4)
                .sized(29.0, 29.0)
                .filled(NamedColor::Yellow)
                .stroked(NamedColor::Black, 2.0),
        ],
    )?;
    let png = encode_png_with_text(
        &render_diagram(&target, 1)?,
        &[
            (DIAGRAM_CHUNK, &serialize_diagram(&target)),
            (CANVAS_CHUNK, &canvas.to_string()),
        ],
    )?;

    let http = Client::builder().timeout(Duration::from_secs(30)).build()?;
    let form = multipart::Form::new()
        .part("sketch", multipart::Part::bytes(png).file_name("sketch.png"))
        .text("config", json!({"max_steps": 10}).to_string());
    let created: Value = http.post(format!("{base}/sessions")).multipart(form).send()?.json()?;
    let id = created["id"].as_str().unwrap_or_default().to_string();
    println!("created {id}: {}", created["phase"]);

    // Follow the event stream on another thread until the final record.
    let events = http.get(format!("{base}/sessions/{id}/events")).send()?;
    let follower = std::thread::spawn(move || {
        for line in BufReader::new(events).lines().map_while(Result::ok) {
            if let Some(kind) = line.strip_prefix("event:") {
                println!("  event {}", kind.trim());
                if kind.trim() == "final" {
                    break;
                }
            }
        }
    });

    let one: Value = http.post(format!("{base}/sessions/{id}/run?steps=1")).send()?.json()?;
    println!("ran one step: {}", one["phase"]);
    let step: Value = http.get(format!("{base}/sessions/{id}/steps/1")).send()?.json()?;
    println!("step 1 critique: {}", step["critique"]["discrepancies"]);

    let accepted = http.post(format!("{base}/sessions/{id}/run?steps=10")).send()?;
    println!("async run: {} {}", accepted.status(), accepted.text()?);
    follower.join().ok();

    let summary: Value = http.get(format!("{base}/sessions/{id}")).send()?.json()?;
    println!("{} after {} step(s)", summary["phase"], summary["step_count"]);
    let svg = http.get(format!("{base}/sessions/{id}/export.svg")).send()?.text()?;
    println!("export.svg: {} bytes", svg.len());

    drop(runtime);
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
