//! What the remote backend would send, without sending it.
//!
//! Builds the first critic prompt for a sketch and prints the JSON body
//! (images elided), the auth header, and how replies are pulled out of a
//! few common response shapes.
//!
//! ```text
//! cargo run --example remote_request
//! ```

use std::sync::Arc;

use serde_json::{json, Value};
use sketch2svg::engine::DEFAULT_INSTRUCTION;
use sketch2svg::gateway::prompts::describe_initial_prompt;
use sketch2svg::gateway::remote::{extract_reply, RemoteBackend, RemoteConfig};
use sketch2svg::gateway::{ImageInput, ModelRole};
use sketch2svg::grammar::Canvas;
use sketch2svg::render::RasterImage;

fn elide_images(v: &mut Value) {
    match v {
        Value::String(s) if s.len() > 120 => *s = format!("{}... ({} bytes)", &s[..40], s.len()),
        Value::Array(items) => items.iter_mut().for_each(elide_images),
        Value::Object(map) => map.values_mut().for_each(elide_images),
        _ => {}
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let canvas = Canvas::new(64, 64)?;
    let sketch = ImageInput::raster("target sketch", Arc::new(RasterImage::filled(64, 64, [255; 4])));
    let prompt = describe_initial_prompt(&sketch, DEFAULT_INSTRUCTION, canvas);

    std::env::set_var("SKETCH2SVG_EXAMPLE_KEY", "not-a-real-key");
    let backend = RemoteBackend::new(RemoteConfig {
        endpoint: "https://models.example.com/v1/chat".into(),
        credential_env: Some("SKETCH2SVG_EXAMPLE_KEY".into()),
        max_tokens: Some(2048),
        ..RemoteConfig::default()
    });
    let mut body = backend.request_body(ModelRole::Critic, &prompt)?;
    elide_images(&mut body);
    println!("POST {}", backend.config().endpoint);
    if let Some((name, value)) = backend.auth_header()? {
        println!("{name}: {}...", &value[..10]);
    }
    println!("{}\n", serde_json::to_string_pretty(&body)?);

    for reply in [
        json!({"choices": [{"message": {"content": "from an OpenAI-style body"}}]}),
        json!({"candidates": [{"content": {"parts": [{"text": "from a Gemini-style body"}]}}]}),
        json!({"output_text": "from a flat body"}),
    ] {
        println!("{:?}", extract_reply(&reply, None));
    }
    Ok(())
}
