//! Diagram → SVG text, and a small deterministic rasterizer for the same
//! scene.
//!
//! [`compile_svg`] lowers every shape to a [`Primitive`] (a convex polygon or
//! a rotated ellipse, in canvas coordinates) and prints the SVG from those
//! primitives. [`rasterize`] draws the very same primitives, so the text a
//! human exports and the pixels a model is shown never disagree.
//!
//! Rasterization is plain coverage compositing on an opaque white
//! background: each output pixel is box-filtered over a fixed 4×4 grid of
//! sub-samples, fill first, then a stroke band centered on the outline
//! (round joins). All arithmetic is in `f64` with a fixed evaluation order,
//! so the same input always yields the same bytes on a given build.

use std::fmt::Write as _;
use std::io::Cursor;

use thiserror::Error;

use crate::grammar::{format_number, Canvas, Diagram, NamedColor, Shape, ShapeType};

/// Sub-samples per output pixel along each axis.
const AA_GRID: usize = 4;
/// Guard against absurd allocations.
const MAX_RASTER_SIDE: u64 = 16_384;

pub const DEFAULT_SUPERSAMPLE: u32 = 2;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render backend failure: {0}")]
    RenderBackendFailure(String),
    #[error("PNG encoding failed: {0}")]
    EncodingFailure(String),
    #[error("PNG decoding failed: {0}")]
    DecodingFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Convex polygon, vertices in canvas coordinates.
    Polygon(Vec2Array),
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        /// Clockwise, degrees.
        rotation: f64,
    },
}

/// Up to four vertices; triangles leave the last slot unused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2Array {
    pts: [(f64, f64); 4],
    len: usize,
}

impl Vec2Array {
    fn new(points: &[(f64, f64)]) -> Self {
        let mut pts = [(0.0, 0.0); 4];
        pts[..points.len()].copy_from_slice(points);
        Self { pts, len: points.len() }
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.pts[..self.len]
    }
}

/// A lowered shape with resolved paint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub geometry: Geometry,
    pub fill: Option<[u8; 3]>,
    pub stroke: Option<[u8; 3]>,
    pub stroke_width: f64,
}

/// SVG text plus the primitives it was printed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgDocument {
    pub text: String,
    pub canvas: Canvas,
    pub primitives: Vec<Primitive>,
}

/// Rotates `(px, py)` clockwise (on a y-down screen) about `(cx, cy)`.
pub fn rotate_about(px: f64, py: f64, cx: f64, cy: f64, degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let (dx, dy) = (px - cx, py - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

/// Outline vertices before rotation: rectangle corners clockwise from the
/// top-left, triangle apex first.
fn local_vertices(s: &Shape) -> Vec<(f64, f64)> {
    let (hx, hy) = (s.scale_x / 2.0, s.scale_y / 2.0);
    match s.shape_type {
        ShapeType::Rectangle => vec![
            (s.x - hx, s.y - hy),
            (s.x + hx, s.y - hy),
            (s.x + hx, s.y + hy),
            (s.x - hx, s.y + hy),
        ],
        ShapeType::Triangle => vec![(s.x, s.y - hy), (s.x - hx, s.y + hy), (s.x + hx, s.y + hy)],
        ShapeType::Circle | ShapeType::Ellipse => Vec::new(),
    }
}

/// Vertices of a polygonal shape after rotation; empty for round shapes.
pub fn shape_vertices(s: &Shape) -> Vec<(f64, f64)> {
    local_vertices(s)
        .into_iter()
        .map(|(px, py)| rotate_about(px, py, s.x, s.y, s.rotation))
        .collect()
}

pub fn lower_shape(s: &Shape) -> Primitive {
    let geometry = match s.shape_type {
        ShapeType::Rectangle | ShapeType::Triangle => Geometry::Polygon(Vec2Array::new(&shape_vertices(s))),
        ShapeType::Circle => Geometry::Ellipse {
            cx: s.x,
            cy: s.y,
            rx: s.scale_x / 2.0,
            ry: s.scale_x / 2.0,
            rotation: 0.0,
        },
        ShapeType::Ellipse => Geometry::Ellipse {
            cx: s.x,
            cy: s.y,
            rx: s.scale_x / 2.0,
            ry: s.scale_y / 2.0,
            rotation: s.rotation,
        },
    };
    let stroke = if s.stroke_width > 0.0 {
        s.stroke_color.rgb()
    } else {
        None
    };
    Primitive {
        geometry,
        fill: s.fill_color.rgb(),
        stroke,
        stroke_width: s.stroke_width,
    }
}

fn paint_attrs(out: &mut String, s: &Shape) {
    let _ = write!(out, " fill=\"{}\"", s.fill_color.as_str());
    if s.stroke_color == NamedColor::None {
        out.push_str(" stroke=\"none\"");
    } else {
        let _ = write!(
            out,
            " stroke=\"{}\" stroke-width=\"{}\" stroke-linejoin=\"round\"",
            s.stroke_color.as_str(),
            format_number(s.stroke_width)
        );
    }
}

fn rotate_attr(out: &mut String, s: &Shape) {
    if s.rotation != 0.0 {
        let _ = write!(
            out,
            " transform=\"rotate({} {} {})\"",
            format_number(s.rotation),
            format_number(s.x),
            format_number(s.y)
        );
    }
}

/// Compiles a normalised diagram to an SVG 1.1 document, one element per
/// shape in painter's order.
pub fn compile_svg(d: &Diagram) -> SvgDocument {
    let (w, h) = (d.canvas.width, d.canvas.height);
    let mut text = String::new();
    let _ = writeln!(
        text,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(
        text,
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\" data-role=\"background\"/>"
    );
    for s in &d.shapes {
        let mut el = String::from("  ");
        match s.shape_type {
            ShapeType::Rectangle => {
                let _ = write!(
                    el,
                    "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\"",
                    format_number(s.x - s.scale_x / 2.0),
                    format_number(s.y - s.scale_y / 2.0),
                    format_number(s.scale_x),
                    format_number(s.scale_y)
                );
                rotate_attr(&mut el, s);
            }
            ShapeType::Circle => {
                let _ = write!(
                    el,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"{}\"",
                    format_number(s.x),
                    format_number(s.y),
                    format_number(s.scale_x / 2.0)
                );
            }
            ShapeType::Ellipse => {
                let _ = write!(
                    el,
                    "<ellipse cx=\"{}\" cy=\"{}\" rx=\"{}\" ry=\"{}\"",
                    format_number(s.x),
                    format_number(s.y),
                    format_number(s.scale_x / 2.0),
                    format_number(s.scale_y / 2.0)
                );
                rotate_attr(&mut el, s);
            }
            ShapeType::Triangle => {
                let pts: Vec<String> = local_vertices(s)
                    .iter()
                    .map(|(x, y)| format!("{},{}", format_number(*x), format_number(*y)))
                    .collect();
                let _ = write!(el, "<polygon points=\"{}\"", pts.join(" "));
                rotate_attr(&mut el, s);
            }
        }
        paint_attrs(&mut el, s);
        el.push_str("/>\n");
        text.push_str(&el);
    }
    text.push_str("</svg>\n");
    SvgDocument {
        text,
        canvas: d.canvas,
        primitives: d.shapes.iter().map(lower_shape).collect(),
    }
}

/// Row-major RGBA8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 4);
        for _ in 0..(width as usize * height as usize) {
            pixels.extend_from_slice(&rgba);
        }
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [
            self.pixels[i],
            self.pixels[i + 1],
            self.pixels[i + 2],
            self.pixels[i + 3],
        ]
    }

    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let [r, g, b, _] = self.pixel(x, y);
        [r, g, b]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: u32) -> RasterImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 4);
        let n = f64::from(factor * factor);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 4];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        for c in 0..4 {
                            acc[c] += u32::from(p[c]);
                        }
                    }
                }
                for a in acc {
                    pixels.push((f64::from(a) / n).round() as u8);
                }
            }
        }
        RasterImage {
            width: w,
            height: h,
            pixels,
        }
    }
}

/// Shortest distance from `p` to segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - (a.0 + t * abx)).hypot(p.1 - (a.1 + t * aby))
}

/// Point-in-convex-polygon, orientation agnostic.
pub fn polygon_contains(pts: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut sign = 0.0f64;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

pub fn polygon_boundary_distance(pts: &[(f64, f64)], p: (f64, f64)) -> f64 {
    (0..pts.len())
        .map(|i| segment_distance(p, pts[i], pts[(i + 1) % pts.len()]))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from a point (in the ellipse's own axis-aligned frame, centered
/// at the origin) to the ellipse outline. Iterative closest-point search on
/// the first quadrant; converges in a handful of steps.
pub fn ellipse_boundary_distance(rx: f64, ry: f64, px: f64, py: f64) -> f64 {
    let (px, py) = (px.abs(), py.abs());
    if rx <= 0.0 || ry <= 0.0 {
        return px.hypot(py);
    }
    let (mut tx, mut ty) = (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);
    for _ in 0..4 {
        let (x, y) = (rx * tx, ry * ty);
        let ex = (rx * rx - ry * ry) * tx.powi(3) / rx;
        let ey = (ry * ry - rx * rx) * ty.powi(3) / ry;
        let (rxv, ryv) = (x - ex, y - ey);
        let (qx, qy) = (px - ex, py - ey);
        let r = rxv.hypot(ryv);
        let q = qx.hypot(qy);
        let scale = if q > 0.0 { r / q } else { 0.0 };
        tx = ((qx * scale + ex) / rx).clamp(0.0, 1.0);
        ty = ((qy * scale + ey) / ry).clamp(0.0, 1.0);
        let t = tx.hypot(ty);
        if t > 0.0 {
            tx /= t;
            ty /= t;
        }
    }
    (px - rx * tx).hypot(py - ry * ty)
}

impl Geometry {
    /// Whether `p` lies inside the region.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        match self {
            Geometry::Polygon(pts) => polygon_contains(pts.as_slice(), p),
            Geometry::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rotation,
            } => {
                let (lx, ly) = rotate_about(p.0, p.1, *cx, *cy, -rotation);
                let (dx, dy) = ((lx - cx) / rx, (ly - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Unsigned distance from `p` to the outline.
    pub fn boundary_distance(&self, p: (f64, f64)) -> f64 {
        match self {
            Geometry::Polygon(pts) => polygon_boundary_distance(pts.as_slice(), p),
            Geometry::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rotation,
            } => {
                let (lx, ly) = rotate_about(p.0, p.1, *cx, *cy, -rotation);
                ellipse_boundary_distance(*rx, *ry, lx - cx, ly - cy)
            }
        }
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` of the outline.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Geometry::Polygon(pts) => pts.as_slice().iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
            Geometry::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rotation,
            } => {
                let (s, c) = rotation.to_radians().sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
        }
    }
}

/// Draws the document at `canvas × supersample` pixels.
pub fn rasterize(svg: &SvgDocument, supersample: u32) -> Result<RasterImage, RenderError> {
    if supersample == 0 {
        return Err(RenderError::RenderBackendFailure(
            "supersample factor must be >= 1".into(),
        ));
    }
    let w = u64::from(svg.canvas.width) * u64::from(supersample);
    let h = u64::from(svg.canvas.height) * u64::from(supersample);
    if w == 0 || h == 0 || w > MAX_RASTER_SIDE || h > MAX_RASTER_SIDE {
        return Err(RenderError::RenderBackendFailure(format!(
            "raster size {w}x{h} is outside 1..={MAX_RASTER_SIDE}"
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut buf = vec![255.0f64; w * h * 3];
    let px = 1.0 / f64::from(supersample);
    let sub = px / AA_GRID as f64;
    let samples = (AA_GRID * AA_GRID) as f64;

    for prim in &svg.primitives {
        let half = if prim.stroke.is_some() {
            prim.stroke_width / 2.0
        } else {
            0.0
        };
        if prim.fill.is_none() && prim.stroke.is_none() {
            continue;
        }
        let (x0, y0, x1, y1) = prim.geometry.bounds();
        let to_px = |v: f64, max: usize| ((v * f64::from(supersample)).floor().max(0.0) as usize).min(max);
        let (ix0, iy0) = (to_px(x0 - half - px, w), to_px(y0 - half - px, h));
        let (ix1, iy1) = (to_px(x1 + half + px, w - 1) + 1, to_px(y1 + half + px, h - 1) + 1);
        for iy in iy0..iy1.min(h) {
            for ix in ix0..ix1.min(w) {
                let (mut fill_hits, mut stroke_hits) = (0u32, 0u32);
                let centre = ((ix as f64 + 0.5) * px, (iy as f64 + 0.5) * px);
                // Pixels well clear of every edge are uniformly covered.
                if prim.geometry.boundary_distance(centre) > half + px * std::f64::consts::FRAC_1_SQRT_2 + 1e-9 {
                    if prim.fill.is_none() || !prim.geometry.contains(centre) {
                        continue;
                    }
                    fill_hits = (AA_GRID * AA_GRID) as u32;
                }
                for sy in 0..if fill_hits > 0 { 0 } else { AA_GRID } {
                    for sx in 0..AA_GRID {
                        let p = (
                            ix as f64 * px + (sx as f64 + 0.5) * sub,
                            iy as f64 * px + (sy as f64 + 0.5) * sub,
                        );
                        if prim.fill.is_some() && prim.geometry.contains(p) {
                            fill_hits += 1;
                        }
                        if prim.stroke.is_some() && prim.geometry.boundary_distance(p) <= half {
                            stroke_hits += 1;
                        }
                    }
                }
                let i = (iy * w + ix) * 3;
                for (paint, hits) in [(prim.fill, fill_hits), (prim.stroke, stroke_hits)] {
                    if let (Some(rgb), true) = (paint, hits > 0) {
                        let cov = f64::from(hits) / samples;
                        for c in 0..3 {
                            buf[i + c] = buf[i + c] * (1.0 - cov) + f64::from(rgb[c]) * cov;
                        }
                    }
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(w * h * 4);
    for chunk in buf.chunks_exact(3) {
        for v in chunk {
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
        pixels.push(255);
    }
    Ok(RasterImage {
        width: w as u32,
        height: h as u32,
        pixels,
    })
}

/// Compile and rasterize in one go.
pub fn render_diagram(d: &Diagram, supersample: u32) -> Result<RasterImage, RenderError> {
    rasterize(&compile_svg(d), supersample)
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, RenderError> {
    encode_png_with_text(img, &[])
}

/// PNG with `tEXt` chunks attached (used to carry a diagram's source
/// alongside its render).
pub fn encode_png_with_text(img: &RasterImage, text: &[(&str, &str)]) -> Result<Vec<u8>, RenderError> {
    let expected = img.width as usize * img.height as usize * 4;
    if img.is_empty() || img.pixels.len() != expected {
        return Err(RenderError::EncodingFailure(format!(
            "{}x{} image has {} bytes, expected {expected}",
            img.width,
            img.height,
            img.pixels.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        for (k, v) in text {
            enc.add_text_chunk((*k).to_string(), (*v).to_string())
                .map_err(|e| RenderError::EncodingFailure(e.to_string()))?;
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| RenderError::EncodingFailure(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| RenderError::EncodingFailure(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| RenderError::EncodingFailure(e.to_string()))?;
    }
    Ok(out)
}

/// Decoded PNG plus any `tEXt` chunks.
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub image: RasterImage,
    pub text: Vec<(String, String)>,
}

impl DecodedPng {
    pub fn text_value(&self, key: &str) -> Option<&str> {
        self.text.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Decodes any 8-bit PNG into RGBA.
pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, RenderError> {
    let err = |e: png::DecodingError| RenderError::DecodingFailure(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RenderError::DecodingFailure("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width, info.height);
    let pixels = match info.color_type {
        png::ColorType::Rgba => buf,
        png::ColorType::Rgb => buf.chunks_exact(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0], c[1]]).collect(),
        png::ColorType::Indexed => return Err(RenderError::DecodingFailure("indexed PNG was not expanded".into())),
    };
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(DecodedPng {
        image: RasterImage {
            width: w,
            height: h,
            pixels,
        },
        text,
    })
}
