//! Geometry written out by hand, independent of the renderer.

use sketch2svg::grammar::{Shape, ShapeType};

/// Outline of a shape as a closed polygon, built from first principles:
/// SVG `rotate(θ cx cy)` maps (dx, dy) to (dx·cosθ − dy·sinθ, dx·sinθ + dy·cosθ).
pub fn outline(s: &Shape) -> Vec<(f64, f64)> {
    let (hx, hy) = (s.scale_x / 2.0, s.scale_y / 2.0);
    let local: Vec<(f64, f64)> = match s.shape_type {
        ShapeType::Rectangle => vec![(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)],
        ShapeType::Triangle => vec![(0.0, -hy), (-hx, hy), (hx, hy)],
        ShapeType::Circle => (0..1440)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 1440.0;
                (hx * t.cos(), hx * t.sin())
            })
            .collect(),
        ShapeType::Ellipse => (0..1440)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 1440.0;
                (hx * t.cos(), hy * t.sin())
            })
            .collect(),
    };
    let theta = if s.shape_type == ShapeType::Circle {
        0.0
    } else {
        s.rotation.to_radians()
    };
    let (sn, cs) = theta.sin_cos();
    local
        .into_iter()
        .map(|(dx, dy)| (s.x + dx * cs - dy * sn, s.y + dx * sn + dy * cs))
        .collect()
}

pub fn inside(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            c = !c;
        }
    }
    c
}

pub fn boundary_distance(poly: &[(f64, f64)], p: (f64, f64)) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (vx, vy) = (b.0 - a.0, b.1 - a.1);
            let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
            ((a.0 + t * vx - p.0).powi(2) + (a.1 + t * vy - p.1).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}
