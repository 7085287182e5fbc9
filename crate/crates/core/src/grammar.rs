//! The shape grammar: a closed JSON vocabulary of four primitives and nine
//! named colors, plus the canonical serializer and a structural differ.
//!
//! A document looks like
//!
//! ```json
//! {"shapes": [{"shape_type": "circle", "x": 50, "y": 50, "scale_x": 20, "scale_y": 20,
//!   "fill_color": "red", "stroke_color": "black", "stroke_width": 1, "rotation": 0}]}
//! ```
//!
//! The canvas is not part of the document; it travels with the session
//! configuration. Parsing is strict: unknown keys, unknown enum spellings
//! (including capitalised colors) and non-positive scales are errors.
//! Every numeric field is quantised to four decimal places during
//! normalisation so that `parse(serialize(d)) == d` holds field-exactly.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Largest absolute value accepted for any numeric field.
pub const MAX_ABS_NUMBER: f64 = 1.0e9;

/// Drawing surface, in pixels. Origin top-left, +x right, +y down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Result<Self, GrammarError> {
        if width == 0 || height == 0 {
            return Err(GrammarError::InvalidCanvas { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }
}

impl fmt::Display for Canvas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Canvas {
    type Err = GrammarError;

    /// Parses `WxH`, e.g. `400x300`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GrammarError::MalformedJson(format!("canvas must look like WxH, got {s:?}"));
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let w: u32 = w.trim().parse().map_err(|_| bad())?;
        let h: u32 = h.trim().parse().map_err(|_| bad())?;
        Canvas::new(w, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeType {
    Circle,
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeType {
    pub const ALL: [ShapeType; 4] = [
        ShapeType::Circle,
        ShapeType::Rectangle,
        ShapeType::Ellipse,
        ShapeType::Triangle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeType::Circle => "circle",
            ShapeType::Rectangle => "rectangle",
            ShapeType::Ellipse => "ellipse",
            ShapeType::Triangle => "triangle",
        }
    }

    /// Exact, case-sensitive lookup.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }
}

impl fmt::Display for ShapeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Black,
    White,
    None,
}

impl NamedColor {
    pub const ALL: [NamedColor; 9] = [
        NamedColor::Red,
        NamedColor::Green,
        NamedColor::Blue,
        NamedColor::Yellow,
        NamedColor::Purple,
        NamedColor::Orange,
        NamedColor::Black,
        NamedColor::White,
        NamedColor::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
            NamedColor::Purple => "purple",
            NamedColor::Orange => "orange",
            NamedColor::Black => "black",
            NamedColor::White => "white",
            NamedColor::None => "none",
        }
    }

    /// Exact, case-sensitive lookup: `"Red"` is not a color.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == name)
    }

    /// SVG 1.1 named-color value; `None` for the "none" paint.
    pub fn rgb(self) -> Option<[u8; 3]> {
        match self {
            NamedColor::Red => Some([255, 0, 0]),
            NamedColor::Green => Some([0, 128, 0]),
            NamedColor::Blue => Some([0, 0, 255]),
            NamedColor::Yellow => Some([255, 255, 0]),
            NamedColor::Purple => Some([128, 0, 128]),
            NamedColor::Orange => Some([255, 165, 0]),
            NamedColor::Black => Some([0, 0, 0]),
            NamedColor::White => Some([255, 255, 255]),
            NamedColor::None => None,
        }
    }

    pub fn is_none(self) -> bool {
        self == NamedColor::None
    }
}

impl fmt::Display for NamedColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One primitive. `(x, y)` is the center; for circles and ellipses the
/// scales are diameters. Rotation is in degrees, clockwise on screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub shape_type: ShapeType,
    pub x: f64,
    pub y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub fill_color: NamedColor,
    pub stroke_color: NamedColor,
    pub stroke_width: f64,
    pub rotation: f64,
}

impl Shape {
    /// A shape of the given type with every other field at its default.
    pub fn new(shape_type: ShapeType) -> Self {
        Self {
            shape_type,
            x: 0.0,
            y: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            fill_color: NamedColor::None,
            stroke_color: NamedColor::Black,
            stroke_width: 1.0,
            rotation: 0.0,
        }
    }

    pub fn at(mut self, x: f64, y: f64) -> Self {
        self.x = x;
        self.y = y;
        self
    }

    pub fn sized(mut self, scale_x: f64, scale_y: f64) -> Self {
        self.scale_x = scale_x;
        self.scale_y = scale_y;
        self
    }

    pub fn filled(mut self, color: NamedColor) -> Self {
        self.fill_color = color;
        self
    }

    pub fn stroked(mut self, color: NamedColor, width: f64) -> Self {
        self.stroke_color = color;
        self.stroke_width = width;
        self
    }

    pub fn rotated(mut self, degrees: f64) -> Self {
        self.rotation = degrees;
        self
    }

    pub fn get(&self, field: ShapeField) -> FieldValue {
        match field {
            ShapeField::X => FieldValue::Number(self.x),
            ShapeField::Y => FieldValue::Number(self.y),
            ShapeField::ScaleX => FieldValue::Number(self.scale_x),
            ShapeField::ScaleY => FieldValue::Number(self.scale_y),
            ShapeField::FillColor => FieldValue::Color(self.fill_color),
            ShapeField::StrokeColor => FieldValue::Color(self.stroke_color),
            ShapeField::StrokeWidth => FieldValue::Number(self.stroke_width),
            ShapeField::Rotation => FieldValue::Number(self.rotation),
        }
    }

    /// Sets a field; a value of the wrong kind is ignored.
    pub fn set(&mut self, field: ShapeField, value: FieldValue) {
        match (field, value) {
            (ShapeField::X, FieldValue::Number(v)) => self.x = v,
            (ShapeField::Y, FieldValue::Number(v)) => self.y = v,
            (ShapeField::ScaleX, FieldValue::Number(v)) => self.scale_x = v,
            (ShapeField::ScaleY, FieldValue::Number(v)) => self.scale_y = v,
            (ShapeField::FillColor, FieldValue::Color(c)) => self.fill_color = c,
            (ShapeField::StrokeColor, FieldValue::Color(c)) => self.stroke_color = c,
            (ShapeField::StrokeWidth, FieldValue::Number(v)) => self.stroke_width = v,
            (ShapeField::Rotation, FieldValue::Number(v)) => self.rotation = v,
            _ => {}
        }
    }

    /// Rounds numbers to the serialisation grid and reduces rotation into
    /// `[0, 360)`. Fails on non-positive scales or negative stroke width.
    pub fn normalized(&self) -> Result<Shape, GrammarError> {
        let mut s = *self;
        for (field, v) in [
            (ShapeField::X, s.x),
            (ShapeField::Y, s.y),
            (ShapeField::ScaleX, s.scale_x),
            (ShapeField::ScaleY, s.scale_y),
            (ShapeField::StrokeWidth, s.stroke_width),
            (ShapeField::Rotation, s.rotation),
        ] {
            if !v.is_finite() || v.abs() > MAX_ABS_NUMBER {
                return Err(GrammarError::InvalidNumber {
                    path: String::new(),
                    field: field.as_str(),
                    reason: format!("{v} is not a finite number within ±{MAX_ABS_NUMBER}"),
                });
            }
        }
        s.x = quantize(s.x);
        s.y = quantize(s.y);
        s.scale_x = quantize(s.scale_x);
        s.scale_y = quantize(s.scale_y);
        s.stroke_width = quantize(s.stroke_width);
        s.rotation = normalize_rotation(s.rotation);
        for (field, v) in [(ShapeField::ScaleX, s.scale_x), (ShapeField::ScaleY, s.scale_y)] {
            if v <= 0.0 {
                return Err(GrammarError::NonPositiveScale {
                    path: String::new(),
                    field: field.as_str(),
                    value: v,
                });
            }
        }
        if s.stroke_width < 0.0 {
            return Err(GrammarError::InvalidNumber {
                path: String::new(),
                field: "stroke_width",
                reason: "stroke width must be >= 0".into(),
            });
        }
        Ok(s)
    }
}

/// Field names in canonical serialisation order (after `shape_type`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeField {
    X,
    Y,
    ScaleX,
    ScaleY,
    FillColor,
    StrokeColor,
    StrokeWidth,
    Rotation,
}

impl ShapeField {
    pub const ALL: [ShapeField; 8] = [
        ShapeField::X,
        ShapeField::Y,
        ShapeField::ScaleX,
        ShapeField::ScaleY,
        ShapeField::FillColor,
        ShapeField::StrokeColor,
        ShapeField::StrokeWidth,
        ShapeField::Rotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeField::X => "x",
            ShapeField::Y => "y",
            ShapeField::ScaleX => "scale_x",
            ShapeField::ScaleY => "scale_y",
            ShapeField::FillColor => "fill_color",
            ShapeField::StrokeColor => "stroke_color",
            ShapeField::StrokeWidth => "stroke_width",
            ShapeField::Rotation => "rotation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == name)
    }

    fn is_color(self) -> bool {
        matches!(self, ShapeField::FillColor | ShapeField::StrokeColor)
    }
}

impl fmt::Display for ShapeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Color(NamedColor),
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Number(v) => f.write_str(&format_number(*v)),
            FieldValue::Color(c) => f.write_str(c.as_str()),
        }
    }
}

/// A canvas plus shapes in painter's order (later shapes draw on top).
#[derive(Debug, Clone, PartialEq)]
pub struct Diagram {
    pub canvas: Canvas,
    pub shapes: Vec<Shape>,
}

impl Diagram {
    pub fn empty(canvas: Canvas) -> Self {
        Self {
            canvas,
            shapes: Vec::new(),
        }
    }

    /// Builds a normalised diagram from raw shapes.
    pub fn from_shapes(canvas: Canvas, shapes: Vec<Shape>) -> Result<Self, GrammarError> {
        let shapes = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| s.normalized().map_err(|e| e.at_shape(i)))
            .collect::<Result<_, _>>()?;
        Ok(Self { canvas, shapes })
    }

    pub fn to_json(&self) -> String {
        serialize_diagram(self)
    }
}

/// Things that parse but are suspicious.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrammarWarning {
    pub path: String,
    pub message: String,
}

impl fmt::Display for GrammarWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", display_path(&self.path), self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("{}: expected {expected}", display_path(path))]
    TypeMismatch { path: String, expected: &'static str },
    #[error("{}: unknown shape type {value:?}", display_path(path))]
    UnknownShapeType { path: String, value: String },
    #[error("{}: unknown color {value:?} (colors are lowercase: red, green, blue, yellow, purple, orange, black, white, none)", display_path(path))]
    UnknownColor { path: String, value: String },
    #[error("{}: missing required field {field:?}", display_path(path))]
    MissingRequiredField { path: String, field: &'static str },
    #[error("{}: {field} must be > 0, got {value}", display_path(path))]
    NonPositiveScale {
        path: String,
        field: &'static str,
        value: f64,
    },
    #[error("{}: unknown field {field:?}", display_path(path))]
    UnknownField { path: String, field: String },
    #[error("{}: invalid {field}: {reason}", display_path(path))]
    InvalidNumber {
        path: String,
        field: &'static str,
        reason: String,
    },
    #[error("canvas must be at least 1x1, got {width}x{height}")]
    InvalidCanvas { width: u32, height: u32 },
    #[error("diagrams are on different canvases ({a} vs {b})")]
    CanvasMismatch { a: Canvas, b: Canvas },
}

impl GrammarError {
    /// JSON pointer of the offending value, when there is one.
    pub fn pointer(&self) -> Option<&str> {
        match self {
            GrammarError::TypeMismatch { path, .. }
            | GrammarError::UnknownShapeType { path, .. }
            | GrammarError::UnknownColor { path, .. }
            | GrammarError::MissingRequiredField { path, .. }
            | GrammarError::NonPositiveScale { path, .. }
            | GrammarError::UnknownField { path, .. }
            | GrammarError::InvalidNumber { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Stable machine-readable class name.
    pub fn code(&self) -> &'static str {
        match self {
            GrammarError::MalformedJson(_) => "malformed_json",
            GrammarError::TypeMismatch { .. } => "type_mismatch",
            GrammarError::UnknownShapeType { .. } => "unknown_shape_type",
            GrammarError::UnknownColor { .. } => "unknown_color",
            GrammarError::MissingRequiredField { .. } => "missing_required_field",
            GrammarError::NonPositiveScale { .. } => "non_positive_scale",
            GrammarError::UnknownField { .. } => "unknown_field",
            GrammarError::InvalidNumber { .. } => "invalid_number",
            GrammarError::InvalidCanvas { .. } => "invalid_canvas",
            GrammarError::CanvasMismatch { .. } => "canvas_mismatch",
        }
    }

    fn at_shape(self, index: usize) -> Self {
        let prefix = format!("/shapes/{index}");
        self.prefixed(&prefix)
    }

    fn prefixed(mut self, prefix: &str) -> Self {
        match &mut self {
            GrammarError::TypeMismatch { path, .. }
            | GrammarError::UnknownShapeType { path, .. }
            | GrammarError::UnknownColor { path, .. }
            | GrammarError::MissingRequiredField { path, .. }
            | GrammarError::NonPositiveScale { path, .. }
            | GrammarError::UnknownField { path, .. }
            | GrammarError::InvalidNumber { path, .. } => {
                if !path.starts_with(prefix) {
                    *path = format!("{prefix}{path}");
                }
            }
            _ => {}
        }
        self
    }
}

fn display_path(path: &str) -> &str {
    if path.is_empty() {
        "/"
    } else {
        path
    }
}

/// Everything a full validation pass found.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub errors: Vec<GrammarError>,
    pub warnings: Vec<GrammarWarning>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Strict parse of a diagram document; returns the first error found.
pub fn parse_diagram(text: &str, canvas: Canvas) -> Result<Diagram, GrammarError> {
    let (diagram, mut errors, _) = parse_collect(text, canvas);
    match diagram {
        Some(d) if errors.is_empty() => Ok(d),
        _ => Err(errors.remove(0)),
    }
}

/// Like [`parse_diagram`] but also returns warnings.
pub fn parse_diagram_with_warnings(text: &str, canvas: Canvas) -> Result<(Diagram, Vec<GrammarWarning>), GrammarError> {
    let (diagram, mut errors, warnings) = parse_collect(text, canvas);
    match diagram {
        Some(d) if errors.is_empty() => Ok((d, warnings)),
        _ => Err(errors.remove(0)),
    }
}

/// Collects every error and warning in the document instead of stopping at
/// the first one.
pub fn validate_document(text: &str, canvas: Canvas) -> ValidationReport {
    let (_, errors, warnings) = parse_collect(text, canvas);
    ValidationReport { errors, warnings }
}

/// Parses an already-decoded JSON value.
pub fn diagram_from_value(value: &Value, canvas: Canvas) -> Result<Diagram, GrammarError> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let d = diagram_from_value_collect(value, canvas, &mut errors, &mut warnings);
    match d {
        Some(d) if errors.is_empty() => Ok(d),
        _ => Err(errors.remove(0)),
    }
}

fn parse_collect(text: &str, canvas: Canvas) -> (Option<Diagram>, Vec<GrammarError>, Vec<GrammarWarning>) {
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return (None, vec![GrammarError::MalformedJson(e.to_string())], vec![]),
    };
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let d = diagram_from_value_collect(&value, canvas, &mut errors, &mut warnings);
    (d, errors, warnings)
}

fn diagram_from_value_collect(
    value: &Value,
    canvas: Canvas,
    errors: &mut Vec<GrammarError>,
    warnings: &mut Vec<GrammarWarning>,
) -> Option<Diagram> {
    let Some(obj) = value.as_object() else {
        errors.push(GrammarError::TypeMismatch {
            path: String::new(),
            expected: "an object with a \"shapes\" array",
        });
        return None;
    };
    for key in obj.keys() {
        if key != "shapes" {
            errors.push(GrammarError::UnknownField {
                path: format!("/{}", escape_pointer(key)),
                field: key.clone(),
            });
        }
    }
    let Some(shapes_value) = obj.get("shapes") else {
        errors.push(GrammarError::MissingRequiredField {
            path: String::new(),
            field: "shapes",
        });
        return None;
    };
    let Some(items) = shapes_value.as_array() else {
        errors.push(GrammarError::TypeMismatch {
            path: "/shapes".into(),
            expected: "an array",
        });
        return None;
    };
    let mut shapes = Vec::with_capacity(items.len());
    let mut ok = true;
    for (i, item) in items.iter().enumerate() {
        let path = format!("/shapes/{i}");
        match item.as_object() {
            Some(record) => match shape_from_record(record, &path, errors) {
                Some(s) => {
                    if s.shape_type == ShapeType::Circle && s.scale_x != s.scale_y {
                        warnings.push(GrammarWarning {
                            path: path.clone(),
                            message: format!(
                                "circle has scale_x {} != scale_y {}; scale_x is used as the diameter",
                                format_number(s.scale_x),
                                format_number(s.scale_y)
                            ),
                        });
                    }
                    shapes.push(s);
                }
                None => ok = false,
            },
            None => {
                errors.push(GrammarError::TypeMismatch {
                    path,
                    expected: "a shape object",
                });
                ok = false;
            }
        }
    }
    ok.then_some(Diagram { canvas, shapes })
}

fn shape_from_record(record: &Map<String, Value>, path: &str, errors: &mut Vec<GrammarError>) -> Option<Shape> {
    let before = errors.len();
    for key in record.keys() {
        if key != "shape_type" && ShapeField::from_name(key).is_none() {
            errors.push(GrammarError::UnknownField {
                path: format!("{path}/{}", escape_pointer(key)),
                field: key.clone(),
            });
        }
    }
    let shape_type = match record.get("shape_type") {
        None => {
            errors.push(GrammarError::MissingRequiredField {
                path: path.to_string(),
                field: "shape_type",
            });
            None
        }
        Some(Value::String(name)) => match ShapeType::from_name(name) {
            Some(t) => Some(t),
            None => {
                errors.push(GrammarError::UnknownShapeType {
                    path: format!("{path}/shape_type"),
                    value: name.clone(),
                });
                None
            }
        },
        Some(other) => {
            errors.push(GrammarError::UnknownShapeType {
                path: format!("{path}/shape_type"),
                value: other.to_string(),
            });
            None
        }
    };
    let mut shape = Shape::new(shape_type.unwrap_or(ShapeType::Circle));
    for field in ShapeField::ALL {
        let Some(v) = record.get(field.as_str()) else {
            continue;
        };
        let fpath = format!("{path}/{}", field.as_str());
        if field.is_color() {
            match v.as_str().and_then(NamedColor::from_name) {
                Some(c) => shape.set(field, FieldValue::Color(c)),
                None => errors.push(GrammarError::UnknownColor {
                    path: fpath,
                    value: v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()),
                }),
            }
        } else {
            match v.as_f64() {
                Some(n) => shape.set(field, FieldValue::Number(n)),
                None => errors.push(GrammarError::InvalidNumber {
                    path: fpath,
                    field: field.as_str(),
                    reason: format!("expected a number, got {v}"),
                }),
            }
        }
    }
    if errors.len() > before || shape_type.is_none() {
        return None;
    }
    match shape.normalized() {
        Ok(s) => Some(s),
        Err(e) => {
            let e = match e {
                GrammarError::NonPositiveScale { field, value, .. } => GrammarError::NonPositiveScale {
                    path: format!("{path}/{field}"),
                    field,
                    value,
                },
                GrammarError::InvalidNumber { field, reason, .. } => GrammarError::InvalidNumber {
                    path: format!("{path}/{field}"),
                    field,
                    reason,
                },
                other => other,
            };
            errors.push(e);
            None
        }
    }
}

fn escape_pointer(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

/// Fills defaults into a partially specified shape record and normalises
/// it. `shape_type` must be present.
pub fn normalize_shape(record: &Value) -> Result<Shape, GrammarError> {
    let Some(obj) = record.as_object() else {
        return Err(GrammarError::TypeMismatch {
            path: String::new(),
            expected: "a shape object",
        });
    };
    let mut errors = Vec::new();
    match shape_from_record(obj, "", &mut errors) {
        Some(s) if errors.is_empty() => Ok(s),
        _ => Err(errors.remove(0)),
    }
}

/// Rounds to four decimal places; never returns negative zero.
pub fn quantize(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0 + 0.0
}

/// Reduces into `[0, 360)` on the serialisation grid.
pub fn normalize_rotation(degrees: f64) -> f64 {
    let r = quantize(degrees.rem_euclid(360.0));
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Formats with at most four decimals, trailing zeros trimmed.
pub fn format_number(v: f64) -> String {
    let k = (v * 10_000.0).round() as i64;
    if k == 0 {
        return "0".into();
    }
    let sign = if k < 0 { "-" } else { "" };
    let a = k.unsigned_abs();
    let (int, frac) = (a / 10_000, a % 10_000);
    if frac == 0 {
        format!("{sign}{int}")
    } else {
        let digits = format!("{frac:04}");
        format!("{sign}{int}.{}", digits.trim_end_matches('0'))
    }
}

/// Canonical JSON text: every field explicit, fixed key order.
pub fn serialize_diagram(d: &Diagram) -> String {
    let mut out = String::from("{\"shapes\": [");
    for (i, s) in d.shapes.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&serialize_shape(s));
    }
    out.push_str("]}");
    out
}

pub fn serialize_shape(s: &Shape) -> String {
    format!(
        "{{\"shape_type\": \"{}\", \"x\": {}, \"y\": {}, \"scale_x\": {}, \"scale_y\": {}, \
         \"fill_color\": \"{}\", \"stroke_color\": \"{}\", \"stroke_width\": {}, \"rotation\": {}}}",
        s.shape_type,
        format_number(s.x),
        format_number(s.y),
        format_number(s.scale_x),
        format_number(s.scale_y),
        s.fill_color,
        s.stroke_color,
        format_number(s.stroke_width),
        format_number(s.rotation),
    )
}

/// The canonical document as a JSON value (for embedding in other JSON).
pub fn diagram_to_value(d: &Diagram) -> Value {
    serde_json::from_str(&serialize_diagram(d)).expect("canonical serialisation is valid JSON")
}

/// One field that differs between a matched source and target shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    /// Index in the source diagram.
    pub index: usize,
    pub field: ShapeField,
    pub old: FieldValue,
    pub new: FieldValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddedShape {
    /// Position in the target diagram.
    pub index: usize,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedShape {
    /// Position in the source diagram.
    pub index: usize,
    pub shape: Shape,
}

/// Edit script from one diagram to another.
///
/// `moves` is empty unless the painter order changed; then it maps every
/// matched shape as `(source index, target index)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagramDelta {
    pub added: Vec<AddedShape>,
    pub removed: Vec<RemovedShape>,
    pub modified: Vec<FieldChange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moves: Vec<(usize, usize)>,
}

impl DiagramDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty() && self.moves.is_empty()
    }

    /// Number of shape-level additions/removals plus field-level changes.
    pub fn discrepancy_count(&self) -> usize {
        self.added.len() + self.removed.len() + self.modified.len()
    }

    /// Human-readable one-line-per-entry summary.
    pub fn summary_lines(&self, source: &Diagram) -> Vec<String> {
        let mut lines = Vec::new();
        for r in &self.removed {
            lines.push(format!(
                "removed {} {} at ({}, {})",
                r.shape.fill_color,
                r.shape.shape_type,
                format_number(r.shape.x),
                format_number(r.shape.y)
            ));
        }
        for a in &self.added {
            lines.push(format!(
                "added {} {} at ({}, {})",
                a.shape.fill_color,
                a.shape.shape_type,
                format_number(a.shape.x),
                format_number(a.shape.y)
            ));
        }
        for m in &self.modified {
            let what = source
                .shapes
                .get(m.index)
                .map(|s| format!("{} {}", s.fill_color, s.shape_type))
                .unwrap_or_else(|| "shape".into());
            lines.push(format!("{what} #{}: {} {} -> {}", m.index, m.field, m.old, m.new));
        }
        lines
    }
}

/// Greedy structural diff. Shapes are matched by type and then by smallest
/// center distance; unmatched sources are removals, unmatched targets are
/// additions.
pub fn diff_diagrams(a: &Diagram, b: &Diagram) -> Result<DiagramDelta, GrammarError> {
    if a.canvas != b.canvas {
        return Err(GrammarError::CanvasMismatch {
            a: a.canvas,
            b: b.canvas,
        });
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, sa) in a.shapes.iter().enumerate() {
        for (j, sb) in b.shapes.iter().enumerate() {
            if sa.shape_type == sb.shape_type {
                pairs.push(((sa.x - sb.x).hypot(sa.y - sb.y), i, j));
            }
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let mut a_used = vec![false; a.shapes.len()];
    let mut b_match: Vec<Option<usize>> = vec![None; b.shapes.len()];
    for (_, i, j) in pairs {
        if !a_used[i] && b_match[j].is_none() {
            a_used[i] = true;
            b_match[j] = Some(i);
        }
    }

    let mut delta = DiagramDelta::default();
    for (i, used) in a_used.iter().enumerate() {
        if !used {
            delta.removed.push(RemovedShape {
                index: i,
                shape: a.shapes[i],
            });
        }
    }
    let mut matched: Vec<(usize, usize)> = Vec::new();
    for (j, m) in b_match.iter().enumerate() {
        match m {
            Some(i) => matched.push((*i, j)),
            None => delta.added.push(AddedShape {
                index: j,
                shape: b.shapes[j],
            }),
        }
    }
    matched.sort();
    for &(i, j) in &matched {
        for field in ShapeField::ALL {
            let (old, new) = (a.shapes[i].get(field), b.shapes[j].get(field));
            if old != new {
                delta.modified.push(FieldChange {
                    index: i,
                    field,
                    old,
                    new,
                });
            }
        }
    }
    // Painter order only matters when the natural layout differs: survivors
    // in source order, with additions slotted into their target positions.
    let natural = natural_layout(a.shapes.len(), &delta.removed, &delta.added);
    let target_of: Vec<Option<usize>> = {
        let mut t = vec![None; a.shapes.len()];
        for &(i, j) in &matched {
            t[i] = Some(j);
        }
        t
    };
    if natural.iter().enumerate().any(|(j, slot)| match slot {
        Slot::Source(i) => target_of[*i] != Some(j),
        Slot::Added => false,
    }) {
        delta.moves = matched;
    }
    Ok(delta)
}

enum Slot {
    Source(usize),
    Added,
}

fn natural_layout(source_len: usize, removed: &[RemovedShape], added: &[AddedShape]) -> Vec<Slot> {
    let survivors: Vec<usize> = (0..source_len)
        .filter(|i| !removed.iter().any(|r| r.index == *i))
        .collect();
    let total = survivors.len() + added.len();
    let mut out = Vec::with_capacity(total);
    let mut it = survivors.into_iter();
    for j in 0..total {
        if added.iter().any(|a| a.index == j) {
            out.push(Slot::Added);
        } else if let Some(i) = it.next() {
            out.push(Slot::Source(i));
        }
    }
    out
}

/// Applies a delta produced by [`diff_diagrams`] to its source diagram.
pub fn apply_delta(source: &Diagram, delta: &DiagramDelta) -> Result<Diagram, DeltaError> {
    let mut shapes = source.shapes.clone();
    for m in &delta.modified {
        let s = shapes.get_mut(m.index).ok_or(DeltaError::IndexOutOfRange(m.index))?;
        if s.get(m.field) != m.old {
            return Err(DeltaError::Stale {
                index: m.index,
                field: m.field,
            });
        }
        s.set(m.field, m.new);
    }
    for r in &delta.removed {
        if r.index >= shapes.len() {
            return Err(DeltaError::IndexOutOfRange(r.index));
        }
    }
    let natural = natural_layout(shapes.len(), &delta.removed, &delta.added);
    let total = natural.len();
    let mut out: Vec<Option<Shape>> = vec![None; total];
    for a in &delta.added {
        *out.get_mut(a.index).ok_or(DeltaError::IndexOutOfRange(a.index))? = Some(a.shape);
    }
    if delta.moves.is_empty() {
        for (j, slot) in natural.iter().enumerate() {
            if let Slot::Source(i) = slot {
                out[j] = Some(shapes[*i]);
            }
        }
    } else {
        for &(i, j) in &delta.moves {
            let shape = *shapes.get(i).ok_or(DeltaError::IndexOutOfRange(i))?;
            *out.get_mut(j).ok_or(DeltaError::IndexOutOfRange(j))? = Some(shape);
        }
    }
    let shapes = out
        .into_iter()
        .enumerate()
        .map(|(j, s)| s.ok_or(DeltaError::IndexOutOfRange(j)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Diagram {
        canvas: source.canvas,
        shapes,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeltaError {
    #[error("delta refers to shape index {0}, which does not exist")]
    IndexOutOfRange(usize),
    #[error("delta expects a different old value for shape {index} field {field}")]
    Stale { index: usize, field: ShapeField },
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn canvas() -> Canvas {
        Canvas::new(100, 100).unwrap()
    }

    #[test]
    fn default_circle_gets_every_default() {
        let d = parse_diagram(r#"{"shapes":[{"shape_type":"circle"}]}"#, canvas()).unwrap();
        assert_eq!(d.shapes, vec![Shape::new(ShapeType::Circle)]);
        let s = d.shapes[0];
        assert_eq!((s.x, s.y, s.scale_x, s.scale_y), (0.0, 0.0, 1.0, 1.0));
        assert_eq!(s.fill_color, NamedColor::None);
        assert_eq!(s.stroke_color, NamedColor::Black);
        assert_eq!((s.stroke_width, s.rotation), (1.0, 0.0));
    }

    #[test]
    fn empty_program() {
        let d = parse_diagram(r#"{"shapes":[]}"#, canvas()).unwrap();
        assert!(d.shapes.is_empty());
        assert_eq!(serialize_diagram(&d), r#"{"shapes": []}"#);
    }

    #[test]
    fn unknown_type_is_rejected() {
        let e = parse_diagram(r#"{"shapes":[{"shape_type":"square"}]}"#, canvas()).unwrap_err();
        assert!(matches!(e, GrammarError::UnknownShapeType { .. }), "{e:?}");
        assert_eq!(e.pointer(), Some("/shapes/0/shape_type"));
    }

    #[test]
    fn colors_are_case_sensitive() {
        let e = parse_diagram(r#"{"shapes":[{"shape_type":"circle","fill_color":"Red"}]}"#, canvas()).unwrap_err();
        assert!(matches!(e, GrammarError::UnknownColor { ref value, .. } if value == "Red"));
    }

    #[test]
    fn unknown_fields_are_errors() {
        let e = parse_diagram(r#"{"shapes":[{"shape_type":"circle","opacity":0.5}]}"#, canvas()).unwrap_err();
        assert_eq!(e.pointer(), Some("/shapes/0/opacity"));
        let e = parse_diagram(r#"{"shapes":[],"canvas":{}}"#, canvas()).unwrap_err();
        assert!(matches!(e, GrammarError::UnknownField { .. }));
    }

    #[test]
    fn default_circle_serialises_every_field() {
        let d = Diagram::from_shapes(canvas(), vec![Shape::new(ShapeType::Circle)]).unwrap();
        let text = serialize_diagram(&d);
        assert!(text.contains("\"scale_x\": 1"));
        assert!(text.contains("\"stroke_color\": \"black\""));
        assert_eq!(
            text,
            "{\"shapes\": [{\"shape_type\": \"circle\", \"x\": 0, \"y\": 0, \"scale_x\": 1, \
             \"scale_y\": 1, \"fill_color\": \"none\", \"stroke_color\": \"black\", \
             \"stroke_width\": 1, \"rotation\": 0}]}"
        );
    }

    #[test]
    fn normalize_reduces_rotation_and_fills_defaults() {
        let s = normalize_shape(&json!({"shape_type": "rectangle", "rotation": 450})).unwrap();
        assert_eq!(s.rotation, 90.0);
        let s = normalize_shape(&json!({"shape_type": "triangle"})).unwrap();
        assert_eq!(s.fill_color, NamedColor::None);
        let s = normalize_shape(&json!({"shape_type": "ellipse", "scale_x": 40})).unwrap();
        assert_eq!((s.scale_x, s.scale_y), (40.0, 1.0));
        let s = normalize_shape(&json!({"shape_type": "ellipse", "rotation": -90})).unwrap();
        assert_eq!(s.rotation, 270.0);
        let s = normalize_shape(&json!({"shape_type": "ellipse", "rotation": 359.99999})).unwrap();
        assert_eq!(s.rotation, 0.0);
    }

    #[test]
    fn normalize_requires_shape_type() {
        let e = normalize_shape(&json!({"x": 3})).unwrap_err();
        assert!(matches!(
            e,
            GrammarError::MissingRequiredField {
                field: "shape_type",
                ..
            }
        ));
    }

    #[test]
    fn scales_must_be_positive() {
        for bad in [r#"0"#, r#"-3"#, r#"0.00001"#] {
            let text = format!(r#"{{"shapes":[{{"shape_type":"rectangle","scale_y":{bad}}}]}}"#);
            let e = parse_diagram(&text, canvas()).unwrap_err();
            assert!(
                matches!(e, GrammarError::NonPositiveScale { field: "scale_y", .. }),
                "{e:?}"
            );
        }
    }

    #[test]
    fn circle_with_unequal_diameters_warns() {
        let (d, warnings) = parse_diagram_with_warnings(
            r#"{"shapes":[{"shape_type":"circle","scale_x":10,"scale_y":20}]}"#,
            canvas(),
        )
        .unwrap();
        assert_eq!(d.shapes.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].path, "/shapes/0");
    }

    #[test]
    fn validate_collects_all_errors() {
        let report = validate_document(
            r#"{"shapes":[{"shape_type":"blob"},{"shape_type":"circle","fill_color":"teal","x":"a"}]}"#,
            canvas(),
        );
        let codes: Vec<_> = report.errors.iter().map(|e| e.code()).collect();
        assert_eq!(codes, vec!["unknown_shape_type", "invalid_number", "unknown_color"]);
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(1.0), "1");
        assert_eq!(format_number(0.5), "0.5");
        assert_eq!(format_number(-12.34567), "-12.3457");
        assert_eq!(format_number(-0.00001), "0");
        assert_eq!(format_number(100.1), "100.1");
        assert_eq!(format_number(3.0001), "3.0001");
    }

    #[test]
    fn diff_of_identical_is_empty() {
        let d = Diagram::from_shapes(
            canvas(),
            vec![
                Shape::new(ShapeType::Circle).at(10.0, 10.0),
                Shape::new(ShapeType::Circle).at(10.0, 10.0),
                Shape::new(ShapeType::Rectangle).at(50.0, 20.0),
            ],
        )
        .unwrap();
        assert!(diff_diagrams(&d, &d).unwrap().is_empty());
    }

    #[test]
    fn diff_single_color_change() {
        let a = Diagram::from_shapes(
            canvas(),
            vec![Shape::new(ShapeType::Rectangle).at(20.0, 20.0).filled(NamedColor::Red)],
        )
        .unwrap();
        let mut b = a.clone();
        b.shapes[0].fill_color = NamedColor::Blue;
        let delta = diff_diagrams(&a, &b).unwrap();
        assert_eq!(delta.modified.len(), 1);
        assert!(delta.added.is_empty() && delta.removed.is_empty());
        assert_eq!(apply_delta(&a, &delta).unwrap(), b);
    }

    #[test]
    fn diff_from_empty_is_one_addition() {
        let a = Diagram::empty(canvas());
        let b = Diagram::from_shapes(canvas(), vec![Shape::new(ShapeType::Triangle)]).unwrap();
        let delta = diff_diagrams(&a, &b).unwrap();
        assert_eq!(delta.added.len(), 1);
        assert_eq!(delta.discrepancy_count(), 1);
        assert_eq!(apply_delta(&a, &delta).unwrap(), b);
    }

    #[test]
    fn diff_handles_reordering() {
        let c = Shape::new(ShapeType::Circle).at(10.0, 10.0);
        let r = Shape::new(ShapeType::Rectangle).at(50.0, 50.0);
        let a = Diagram::from_shapes(canvas(), vec![c, r]).unwrap();
        let b = Diagram::from_shapes(canvas(), vec![r, c]).unwrap();
        let delta = diff_diagrams(&a, &b).unwrap();
        assert!(!delta.is_empty());
        assert_eq!(delta.discrepancy_count(), 0);
        assert_eq!(apply_delta(&a, &delta).unwrap(), b);
    }

    #[test]
    fn diff_rejects_canvas_mismatch() {
        let a = Diagram::empty(canvas());
        let b = Diagram::empty(Canvas::new(10, 10).unwrap());
        assert!(matches!(
            diff_diagrams(&a, &b),
            Err(GrammarError::CanvasMismatch { .. })
        ));
    }

    #[test]
    fn canvas_parses_from_text() {
        assert_eq!("400x300".parse::<Canvas>().unwrap(), Canvas::new(400, 300).unwrap());
        assert!("0x3".parse::<Canvas>().is_err());
        assert!("400".parse::<Canvas>().is_err());
    }
}
