#![allow(dead_code)]

pub mod shapes;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketch2svg::config::{AppConfig, CANVAS_CHUNK, DIAGRAM_CHUNK};
use sketch2svg::engine::{Session, SessionConfig};
use sketch2svg::gateway::oracle::OracleBackend;
use sketch2svg::gateway::{BackendError, GatewayPolicy, ModelBackend, ModelGateway, ModelRequest};
use sketch2svg::grammar::{quantize, serialize_diagram, Canvas, Diagram, NamedColor, Shape, ShapeType};
use sketch2svg::render::{encode_png_with_text, render_diagram, RasterImage};
use sketch2svg::service::{router, AppState, GatewayFactory};
use sketch2svg::trace::{MemorySink, RecordType, SessionMeta, TraceRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn canvas(w: u32, h: u32) -> Canvas {
    Canvas::new(w, h).unwrap()
}

fn q(v: f64) -> f64 {
    quantize(v)
}

pub fn random_color(rng: &mut impl Rng) -> NamedColor {
    NamedColor::ALL[rng.gen_range(0..NamedColor::ALL.len())]
}

/// A shape fully inside the canvas, with values on the 4-decimal grid.
pub fn random_shape(rng: &mut impl Rng, canvas: Canvas) -> Shape {
    let (w, h) = (f64::from(canvas.width), f64::from(canvas.height));
    let t = ShapeType::ALL[rng.gen_range(0..4)];
    let sx = q(rng.gen_range(0.05..0.35) * w);
    let sy = if t == ShapeType::Circle {
        sx
    } else {
        q(rng.gen_range(0.05..0.35) * h)
    };
    let mut fill = random_color(rng);
    if fill == NamedColor::None && rng.gen_bool(0.5) {
        fill = NamedColor::Blue;
    }
    Shape::new(t)
        .at(q(rng.gen_range(0.1..0.9) * w), q(rng.gen_range(0.1..0.9) * h))
        .sized(sx, sy)
        .filled(fill)
        .stroked(random_color(rng), q(rng.gen_range(0.0..4.0)))
        .rotated(if t == ShapeType::Circle {
            0.0
        } else {
            q(rng.gen_range(0.0..360.0))
        })
}

pub fn random_diagram(rng: &mut impl Rng, canvas: Canvas, n: usize) -> Diagram {
    let shapes = (0..n).map(|_| random_shape(rng, canvas)).collect();
    Diagram::from_shapes(canvas, shapes).unwrap()
}

/// A sketch stand-in: the target's render with the target embedded.
pub fn sketch_png(target: &Diagram) -> Vec<u8> {
    let img = render_diagram(target, 1).unwrap();
    let canvas = target.canvas.to_string();
    encode_png_with_text(
        &img,
        &[
            (DIAGRAM_CHUNK, serialize_diagram(target).as_str()),
            (CANVAS_CHUNK, &canvas),
        ],
    )
    .unwrap()
}

pub fn oracle_gateway(target: &Diagram) -> ModelGateway {
    ModelGateway::uniform(Arc::new(OracleBackend::new(target.clone())), GatewayPolicy::default())
}

pub fn meta_record(config: &SessionConfig, backend: &str) -> TraceRecord {
    let meta = SessionMeta {
        id: uuid::Uuid::new_v4().to_string(),
        created_at: chrono::Utc::now(),
        config: config.clone(),
        sketch_digest: String::new(),
        backend: backend.into(),
    };
    TraceRecord::new(RecordType::SessionMeta, 0, &meta)
}

/// A fresh in-memory session driven by `gateway`.
pub fn session_with(config: SessionConfig, gateway: ModelGateway) -> (Session, Arc<MemorySink>) {
    let sink = Arc::new(MemorySink::with_records(vec![meta_record(&config, "oracle")]));
    let sketch = RasterImage::filled(config.canvas.width, config.canvas.height, [255; 4]);
    let s = Session::initialize(sketch, config, gateway, sink.clone()).unwrap();
    (s, sink)
}

pub fn oracle_session(target: &Diagram, config: SessionConfig) -> (Session, Arc<MemorySink>) {
    session_with(config, oracle_gateway(target))
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    pub dir: tempfile::TempDir,
    pub runtime: tokio::runtime::Runtime,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

pub fn spawn_service(factory: Option<GatewayFactory>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    spawn_service_at(dir, factory)
}

pub fn spawn_service_at(dir: tempfile::TempDir, factory: Option<GatewayFactory>) -> Server {
    let config = AppConfig {
        store_root: dir.path().to_path_buf(),
        ..AppConfig::default()
    };
    let state = match factory {
        Some(f) => AppState::with_gateway_factory(config, f).unwrap(),
        None => AppState::new(config).unwrap(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    runtime.spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Server {
        base: format!("http://{addr}"),
        state,
        dir,
        runtime,
    }
}

/// Keeps every prompt it forwards, tagged with the step.
pub struct Recorder {
    pub inner: Arc<dyn ModelBackend>,
    pub prompts: std::sync::Mutex<Vec<(u32, String)>>,
}

impl Recorder {
    pub fn wrap(inner: Arc<dyn ModelBackend>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            prompts: Default::default(),
        })
    }
}

impl ModelBackend for Recorder {
    fn name(&self) -> &str {
        "recorder"
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push((request.step, request.prompt.text()));
        self.inner.complete(request)
    }
}
