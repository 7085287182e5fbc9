//! Configuration shared by the CLI and the HTTP service.
//!
//! Read from a TOML file, then overridden by `SKETCH2SVG_*` environment
//! variables:
//!
//! | variable                    | field                       |
//! |-----------------------------|-----------------------------|
//! | `SKETCH2SVG_LISTEN`         | `listen`                    |
//! | `SKETCH2SVG_STORE`          | `store_root`                |
//! | `SKETCH2SVG_BACKEND`        | `backend`                   |
//! | `SKETCH2SVG_CANVAS`         | `default_canvas`            |
//! | `SKETCH2SVG_ENDPOINT`       | `remote.endpoint`           |
//! | `SKETCH2SVG_CRITIC_MODEL`   | `remote.critic_model`       |
//! | `SKETCH2SVG_SYNTH_MODEL`    | `remote.synthesizer_model`  |
//! | `SKETCH2SVG_JUDGE_MODEL`    | `remote.judge_model`        |
//! | `SKETCH2SVG_CREDENTIAL_ENV` | `remote.credential_env`     |
//! | `SKETCH2SVG_TIMEOUT_SECS`   | `remote.timeout_secs`       |
//! | `SKETCH2SVG_MAX_REPAIRS`    | `gateway.max_repairs`       |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::oracle::OracleBackend;
use crate::gateway::remote::{RemoteBackend, RemoteConfig};
use crate::gateway::{GatewayPolicy, ModelGateway};
use crate::grammar::{parse_diagram, Canvas, Diagram};
use crate::render::DecodedPng;
use crate::replay::scripted_from_trace;
use crate::trace::SessionTrace;

/// PNG text chunk holding the diagram a sketch was rendered from.
pub const DIAGRAM_CHUNK: &str = "diagram";
/// PNG text chunk holding that diagram's canvas, as `WxH`.
pub const CANVAS_CHUNK: &str = "canvas";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("{0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Remote,
    Scripted,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Oracle => "oracle",
            BackendKind::Remote => "remote",
            BackendKind::Scripted => "scripted",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(BackendKind::Oracle),
            "remote" => Ok(BackendKind::Remote),
            "scripted" => Ok(BackendKind::Scripted),
            _ => Err(format!("unknown backend {s:?} (expected oracle, remote or scripted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    pub max_repairs: u32,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub supersample: u32,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        let p = GatewayPolicy::default();
        Self {
            max_repairs: p.max_repairs,
            retry_attempts: p.retry.attempts,
            retry_backoff_ms: p.retry.initial_backoff.as_millis() as u64,
            supersample: p.supersample,
        }
    }
}

impl GatewaySettings {
    pub fn policy(&self) -> GatewayPolicy {
        GatewayPolicy {
            max_repairs: self.max_repairs,
            retry: crate::gateway::RetryPolicy {
                attempts: self.retry_attempts.max(1),
                initial_backoff: std::time::Duration::from_millis(self.retry_backoff_ms),
            },
            supersample: self.supersample.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub listen: String,
    pub store_root: PathBuf,
    pub backend: BackendKind,
    /// `WxH`; when unset, sessions take the canvas from the sketch.
    pub default_canvas: Option<String>,
    pub remote: RemoteConfig,
    pub gateway: GatewaySettings,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            store_root: PathBuf::from("sketch2svg-data"),
            backend: BackendKind::Oracle,
            default_canvas: None,
            remote: RemoteConfig::default(),
            gateway: GatewaySettings::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// File (if given) plus process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text).map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(var: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e: T::Err| ConfigError::Env {
                var: var.into(),
                message: e.to_string(),
            })
        }
        if let Some(v) = lookup("SKETCH2SVG_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("SKETCH2SVG_STORE") {
            self.store_root = v.into();
        }
        if let Some(v) = lookup("SKETCH2SVG_BACKEND") {
            self.backend = parse("SKETCH2SVG_BACKEND", &v)?;
        }
        if let Some(v) = lookup("SKETCH2SVG_CANVAS") {
            parse::<Canvas>("SKETCH2SVG_CANVAS", &v)?;
            self.default_canvas = Some(v);
        }
        if let Some(v) = lookup("SKETCH2SVG_ENDPOINT") {
            self.remote.endpoint = v;
        }
        if let Some(v) = lookup("SKETCH2SVG_CRITIC_MODEL") {
            self.remote.critic_model = v;
        }
        if let Some(v) = lookup("SKETCH2SVG_SYNTH_MODEL") {
            self.remote.synthesizer_model = v;
        }
        if let Some(v) = lookup("SKETCH2SVG_JUDGE_MODEL") {
            self.remote.judge_model = v;
        }
        if let Some(v) = lookup("SKETCH2SVG_CREDENTIAL_ENV") {
            self.remote.credential_env = Some(v);
        }
        if let Some(v) = lookup("SKETCH2SVG_TIMEOUT_SECS") {
            self.remote.timeout_secs = parse("SKETCH2SVG_TIMEOUT_SECS", &v)?;
        }
        if let Some(v) = lookup("SKETCH2SVG_MAX_REPAIRS") {
            self.gateway.max_repairs = parse("SKETCH2SVG_MAX_REPAIRS", &v)?;
        }
        Ok(())
    }

    pub fn default_canvas(&self) -> Option<Canvas> {
        self.default_canvas.as_deref().and_then(|c| c.parse().ok())
    }
}

/// The diagram embedded in a rendered sketch, if it carries one.
pub fn embedded_target(png: &DecodedPng) -> Option<Result<Diagram, String>> {
    let text = png.text_value(DIAGRAM_CHUNK)?;
    let canvas = match png.text_value(CANVAS_CHUNK) {
        Some(c) => c.parse::<Canvas>().map_err(|e| e.to_string()),
        None => Canvas::new(png.image.width, png.image.height).map_err(|e| e.to_string()),
    };
    Some(canvas.and_then(|c| parse_diagram(text, c).map_err(|e| e.to_string())))
}

/// What a backend needs besides the app config.
#[derive(Debug, Default)]
pub struct BackendInputs {
    /// Required by the oracle.
    pub target: Option<Diagram>,
    /// Required by the scripted backend.
    pub script: Option<SessionTrace>,
}

pub fn build_gateway(
    kind: BackendKind,
    config: &AppConfig,
    inputs: BackendInputs,
) -> Result<ModelGateway, ConfigError> {
    let policy = config.gateway.policy();
    Ok(match kind {
        BackendKind::Oracle => {
            let target = inputs.target.ok_or_else(|| {
                ConfigError::Backend(
                    "the oracle backend needs a target diagram (embedded in the sketch PNG or given explicitly)".into(),
                )
            })?;
            ModelGateway::uniform(Arc::new(OracleBackend::new(target)), policy)
        }
        BackendKind::Remote => ModelGateway::uniform(Arc::new(RemoteBackend::new(config.remote.clone())), policy),
        BackendKind::Scripted => {
            let trace = inputs
                .script
                .ok_or_else(|| ConfigError::Backend("the scripted backend needs a trace to replay".into()))?;
            let backend = scripted_from_trace(&trace).map_err(|e| ConfigError::Backend(e.to_string()))?;
            ModelGateway::uniform(Arc::new(backend), policy)
        }
    })
}
