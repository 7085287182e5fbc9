//! Command-line front end. Every subcommand is a short composition of
//! library calls; `main.rs` only parses arguments and exits with the code
//! returned by [`execute`].
//!
//! Exit codes: 0 success / converged, 2 exhausted (or awaiting review),
//! 1 bad input or I/O, 3 model backend failure, 4 replay divergence,
//! 5 invalid diagram document.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{
    build_gateway, embedded_target, AppConfig, BackendInputs, BackendKind, CANVAS_CHUNK, DIAGRAM_CHUNK,
};
use crate::engine::{EngineError, Phase, Session, SessionConfig};
use crate::geometry::{relation_diff, structural_distance};
use crate::grammar::{diff_diagrams, parse_diagram, serialize_diagram, validate_document, Canvas, Diagram};
use crate::render::{compile_svg, decode_png, encode_png_with_text, render_diagram, DEFAULT_SUPERSAMPLE};
use crate::replay::{replay_trace, ReplayError};
use crate::store::digest;
use crate::trace::{FileSink, RecordType, SessionMeta, SessionTrace, TraceRecord, TraceSink};

/// Canvas assumed by file-level commands when `--canvas` is not given.
pub const DEFAULT_FILE_CANVAS: &str = "512x512";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const EXHAUSTED: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const INVALID: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "sketch2svg", version, about = "Sketch to vector diagram refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session to completion and write final.svg, final.json, trace.jsonl.
    Run(RunArgs),
    /// Check a diagram document against the grammar.
    Validate {
        path: PathBuf,
        #[arg(long, default_value = DEFAULT_FILE_CANVAS)]
        canvas: Canvas,
    },
    /// Compile a diagram document to SVG (or PNG with --raster).
    Render {
        path: PathBuf,
        #[arg(long, default_value = DEFAULT_FILE_CANVAS)]
        canvas: Canvas,
        /// Write a PNG instead of SVG.
        #[arg(long)]
        raster: bool,
        /// Drawn at this multiple, then box-filtered to canvas size.
        #[arg(long, default_value_t = DEFAULT_SUPERSAMPLE)]
        supersample: u32,
        /// Output file; stdout when omitted (SVG only).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Compare two diagrams: distance, field changes, relations.
    Diff {
        current: PathBuf,
        target: PathBuf,
        #[arg(long, default_value = DEFAULT_FILE_CANVAS)]
        canvas: Canvas,
    },
    /// Re-run a trace through the scripted backend and check fidelity.
    Replay { trace: PathBuf },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub canvas: Option<Canvas>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// TOML config (remote endpoint, gateway policy).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target diagram for the oracle; defaults to the one embedded in the sketch.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Trace whose responses the scripted backend plays back.
    #[arg(long)]
    pub script: Option<PathBuf>,
}

/// Outcome of a command: exit code plus what to print.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            code: exit::OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            stdout: String::new(),
            stderr: message.into(),
        }
    }

    /// Prints and returns the exit code.
    pub fn emit(&self) -> i32 {
        if !self.stdout.is_empty() {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(self.stdout.as_bytes());
            if !self.stdout.ends_with('\n') {
                let _ = out.write_all(b"\n");
            }
        }
        if !self.stderr.is_empty() {
            eprintln!("error: {}", self.stderr.trim_end());
        }
        self.code
    }
}

fn io(p: &Path) -> impl Fn(std::io::Error) -> Outcome + '_ {
    move |e| Outcome::fail(exit::FAILURE, format!("{}: {e}", p.display()))
}

fn read_text(path: &Path) -> Result<String, Outcome> {
    std::fs::read_to_string(path).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", path.display())))
}

fn read_diagram(path: &Path, canvas: Canvas) -> Result<Diagram, Outcome> {
    let text = read_text(path)?;
    parse_diagram(&text, canvas).map_err(|e| Outcome::fail(exit::INVALID, format!("{}: {e}", path.display())))
}

/// Runs a parsed command. `serve` blocks until the server stops.
pub fn execute(cli: Cli) -> Outcome {
    let r = match cli.command {
        Command::Run(args) => run(&args),
        Command::Validate { path, canvas } => validate(&path, canvas),
        Command::Render {
            path,
            canvas,
            raster,
            supersample,
            out,
        } => render(&path, canvas, raster, supersample, out.as_deref()),
        Command::Diff {
            current,
            target,
            canvas,
        } => diff(&current, &target, canvas),
        Command::Replay { trace } => replay(&trace),
        Command::Serve { config, listen } => serve(config.as_deref(), listen),
    };
    r.unwrap_or_else(|o| o)
}

pub fn validate(path: &Path, canvas: Canvas) -> Result<Outcome, Outcome> {
    let text = read_text(path)?;
    let report = validate_document(&text, canvas);
    let mut out = String::new();
    for e in &report.errors {
        let pointer = e.pointer().unwrap_or("");
        let _ = writeln!(out, "error [{}] {pointer}: {e}", e.code());
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning {w}");
    }
    let _ = writeln!(
        out,
        "{} error{}, {} warning{}",
        report.errors.len(),
        if report.errors.len() == 1 { "" } else { "s" },
        report.warnings.len(),
        if report.warnings.len() == 1 { "" } else { "s" },
    );
    let code = if report.is_valid() { exit::OK } else { exit::INVALID };
    Ok(Outcome {
        code,
        stdout: out,
        stderr: String::new(),
    })
}

pub fn render(
    path: &Path,
    canvas: Canvas,
    raster: bool,
    supersample: u32,
    out: Option<&Path>,
) -> Result<Outcome, Outcome> {
    let d = read_diagram(path, canvas)?;
    if raster {
        let out = out.ok_or_else(|| Outcome::fail(exit::FAILURE, "--raster needs --out"))?;
        let ss = supersample.max(1);
        let img = render_diagram(&d, ss)
            .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?
            .downsample(ss);
        let canvas_text = canvas.to_string();
        let png = encode_png_with_text(
            &img,
            &[
                (DIAGRAM_CHUNK, serialize_diagram(&d).as_str()),
                (CANVAS_CHUNK, canvas_text.as_str()),
            ],
        )
        .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;
        std::fs::write(out, png).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", out.display())))?;
        return Ok(Outcome::ok(format!(
            "wrote {} ({}x{})",
            out.display(),
            img.width,
            img.height
        )));
    }
    let svg = compile_svg(&d).text;
    match out {
        Some(p) => {
            std::fs::write(p, &svg).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", p.display())))?;
            Ok(Outcome::ok(format!("wrote {}", p.display())))
        }
        None => Ok(Outcome::ok(svg)),
    }
}

pub fn diff(current: &Path, target: &Path, canvas: Canvas) -> Result<Outcome, Outcome> {
    let a = read_diagram(current, canvas)?;
    let b = read_diagram(target, canvas)?;
    let fail = |e: crate::grammar::GrammarError| Outcome::fail(exit::FAILURE, e.to_string());
    let dist = structural_distance(&a, &b).map_err(fail)?;
    let delta = diff_diagrams(&a, &b).map_err(fail)?;
    let rel = relation_diff(&a, &b).map_err(fail)?;
    let mut out = format!(
        "distance {:.4}{}\n",
        dist.value,
        if dist.is_equivalent() { " (equivalent)" } else { "" }
    );
    for line in delta.summary_lines(&a) {
        let _ = writeln!(out, "  {line}");
    }
    for r in &rel.missing {
        let _ = writeln!(out, "missing relation: {r}");
    }
    for r in &rel.extra {
        let _ = writeln!(out, "extra relation: {r}");
    }
    Ok(Outcome::ok(out))
}

pub fn replay(path: &Path) -> Result<Outcome, Outcome> {
    let trace =
        SessionTrace::read(path).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", path.display())))?;
    match replay_trace(&trace) {
        Ok(report) if report.is_faithful() => Ok(Outcome::ok(format!(
            "trace reproduced ({} records, {} diagrams compared)",
            trace.records.len(),
            report.diagrams_compared
        ))),
        Ok(report) => Err(Outcome::fail(
            exit::DIVERGED,
            format!("trace diverged:\n{}", report.mismatches.join("\n")),
        )),
        Err(e @ ReplayError::Engine { .. }) => Err(Outcome::fail(exit::DIVERGED, e.to_string())),
        Err(e) => Err(Outcome::fail(exit::FAILURE, e.to_string())),
    }
}

fn engine_failure(e: EngineError) -> Outcome {
    let code = match e {
        EngineError::Gateway(_) | EngineError::InitialProgramInvalid(_) => exit::BACKEND,
        _ => exit::FAILURE,
    };
    Outcome::fail(code, e.to_string())
}

pub fn run(args: &RunArgs) -> Result<Outcome, Outcome> {
    let png = std::fs::read(&args.sketch).map_err(io(&args.sketch))?;
    let sketch =
        decode_png(&png).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", args.sketch.display())))?;
    let app = AppConfig::load(args.config.as_deref()).map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;
    let embedded = embedded_target(&sketch)
        .transpose()
        .map_err(|e| Outcome::fail(exit::FAILURE, format!("embedded diagram: {e}")))?;

    let canvas = match (args.canvas, app.default_canvas(), &embedded) {
        (Some(c), _, _) | (None, Some(c), _) => c,
        (None, None, Some(d)) => d.canvas,
        (None, None, None) => Canvas::new(sketch.image.width, sketch.image.height)
            .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?,
    };
    let mut config = SessionConfig::new(canvas);
    if let Some(i) = &args.instruction {
        config.instruction = i.clone();
    }
    if let Some(n) = args.max_steps {
        config.max_steps = n;
    }
    config.validate().map_err(engine_failure)?;

    let backend = args.backend.unwrap_or(app.backend);
    let target = match &args.target {
        Some(p) => Some(read_diagram(p, canvas)?),
        None => embedded,
    };
    let script = match &args.script {
        Some(p) => {
            Some(SessionTrace::read(p).map_err(|e| Outcome::fail(exit::FAILURE, format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let gateway = build_gateway(
        backend,
        &app,
        BackendInputs {
            target: target.clone(),
            script,
        },
    )
    .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;

    std::fs::create_dir_all(&args.out).map_err(io(&args.out))?;
    let trace_path = args.out.join("trace.jsonl");
    let sink = Arc::new(FileSink::create(&trace_path).map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?);
    let meta = SessionMeta {
        id: uuid::Uuid::new_v4().to_string(),
        created_at: chrono::Utc::now(),
        config: config.clone(),
        sketch_digest: digest(&png),
        backend: backend.to_string(),
    };
    sink.append(&[TraceRecord::new(RecordType::SessionMeta, 0, &meta)])
        .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;

    let mut session = Session::initialize(sketch.image, config, gateway, sink).map_err(engine_failure)?;
    let result = session.run_to_completion().map(|_| ()).map_err(engine_failure);
    let state = session.state();
    let svg_path = args.out.join("final.svg");
    std::fs::write(&svg_path, compile_svg(&state.current).text).map_err(io(&svg_path))?;
    let json_path = args.out.join("final.json");
    std::fs::write(&json_path, serialize_diagram(&state.current) + "\n").map_err(io(&json_path))?;
    result?;

    let mut out = format!("{} after {} step(s)\n", state.phase, state.step_count);
    if let Some(t) = &target {
        if let Ok(d) = structural_distance(&state.current, t) {
            let _ = writeln!(out, "distance to target {:.4}", d.value);
        }
    }
    let _ = writeln!(out, "wrote {}", args.out.display());
    let code = match state.phase {
        Phase::Converged => exit::OK,
        Phase::Failed => exit::FAILURE,
        _ => exit::EXHAUSTED,
    };
    Ok(Outcome {
        code,
        stdout: out,
        stderr: String::new(),
    })
}

pub fn serve(config: Option<&Path>, listen: Option<String>) -> Result<Outcome, Outcome> {
    let mut app = AppConfig::load(config).map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;
    if let Some(l) = listen {
        app.listen = l;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;
    rt.block_on(crate::service::serve(app))
        .map_err(|e| Outcome::fail(exit::FAILURE, e.to_string()))?;
    Ok(Outcome::ok(String::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arguments_parse() {
        let cli = Cli::try_parse_from([
            "sketch2svg",
            "run",
            "--sketch",
            "s.png",
            "--backend",
            "oracle",
            "--canvas",
            "200x100",
            "--max-steps",
            "4",
        ])
        .unwrap();
        match cli.command {
            Command::Run(a) => {
                assert_eq!(a.backend, Some(BackendKind::Oracle));
                assert_eq!(a.canvas, Some(Canvas::new(200, 100).unwrap()));
                assert_eq!(a.max_steps, Some(4));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["sketch2svg", "run", "--sketch", "s.png", "--backend", "gpt"]).is_err());
    }

    #[test]
    fn missing_sketch_is_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let o = execute(
            Cli::try_parse_from([
                "sketch2svg",
                "run",
                "--sketch",
                dir.path().join("nope.png").to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .unwrap(),
        );
        assert_eq!(o.code, exit::FAILURE);
        assert!(o.stderr.contains("nope.png"));
    }

    #[test]
    fn validate_reports_pointers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        std::fs::write(
            &p,
            r#"{"shapes": [{"shape_type": "circle"}, {"shape_type": "hexagon"}]}"#,
        )
        .unwrap();
        let o = validate(&p, Canvas::new(100, 100).unwrap()).unwrap();
        assert_eq!(o.code, exit::INVALID);
        assert!(o.stdout.contains("/shapes/1/shape_type"), "{}", o.stdout);
        std::fs::write(&p, r#"{"shapes": [{"shape_type": "circle"}]}"#).unwrap();
        let o = validate(&p, Canvas::new(100, 100).unwrap()).unwrap();
        assert_eq!(o.code, exit::OK);
        assert!(o.stdout.starts_with("0 errors"));
    }
}
