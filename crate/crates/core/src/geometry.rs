//! Qualitative spatial relations between shapes and a matching-based
//! structural distance between diagrams.
//!
//! Relations are what a critic talks about ("the blue box touches the red
//! circle on its left"); the distance is what the oracle judge minimises.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grammar::{serialize_diagram, Canvas, Diagram, GrammarError, NamedColor, Shape, ShapeType};
use crate::render::{lower_shape, rotate_about, shape_vertices};

/// Boundary gap (px) under which two shapes count as touching, and the
/// deepest overlap still tolerated.
pub const TOUCH_TOLERANCE: f64 = 1.0;
/// Required inset (px) on every side for containment.
pub const CONTAIN_MARGIN: f64 = 1.0;
/// Center offset, as a fraction of the canvas extent on that axis, under
/// which two shapes are aligned.
pub const ALIGN_FRACTION: f64 = 0.02;
/// Area ratio above which one shape is larger than another.
pub const LARGER_RATIO: f64 = 1.1;
/// Distances below this are treated as "the same diagram".
pub const EQUIVALENCE_THRESHOLD: f64 = 0.01;
/// Exact assignment is used while every per-type group has at most this many shapes.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 10;

const ELLIPSE_SEGMENTS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Aabb {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// True when `other` sits inside `self` with at least `margin` to spare
    /// on all four sides.
    pub fn contains_with_margin(&self, other: &Aabb, margin: f64) -> bool {
        other.min_x >= self.min_x + margin
            && other.min_y >= self.min_y + margin
            && other.max_x <= self.max_x - margin
            && other.max_y <= self.max_y - margin
    }
}

/// Tight box around the rotated outline, stroke excluded.
pub fn bounding_box(s: &Shape) -> Aabb {
    let (min_x, min_y, max_x, max_y) = lower_shape(s).geometry.bounds();
    Aabb {
        min_x,
        min_y,
        max_x,
        max_y,
    }
}

/// Analytic area of the filled region.
pub fn shape_area(s: &Shape) -> f64 {
    match s.shape_type {
        ShapeType::Rectangle => s.scale_x * s.scale_y,
        ShapeType::Triangle => s.scale_x * s.scale_y / 2.0,
        ShapeType::Ellipse => std::f64::consts::FRAC_PI_4 * s.scale_x * s.scale_y,
        ShapeType::Circle => std::f64::consts::FRAC_PI_4 * s.scale_x * s.scale_x,
    }
}

/// Convex outline; ellipses are approximated by a fine polygon.
pub fn outline(s: &Shape) -> Vec<(f64, f64)> {
    match s.shape_type {
        ShapeType::Rectangle | ShapeType::Triangle => shape_vertices(s),
        ShapeType::Circle | ShapeType::Ellipse => {
            let rx = s.scale_x / 2.0;
            let ry = if s.shape_type == ShapeType::Circle {
                rx
            } else {
                s.scale_y / 2.0
            };
            let rot = if s.shape_type == ShapeType::Circle {
                0.0
            } else {
                s.rotation
            };
            (0..ELLIPSE_SEGMENTS)
                .map(|k| {
                    let t = k as f64 / ELLIPSE_SEGMENTS as f64 * std::f64::consts::TAU;
                    rotate_about(s.x + rx * t.cos(), s.y + ry * t.sin(), s.x, s.y, rot)
                })
                .collect()
        }
    }
}

/// Contact between two convex outlines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Contact {
    /// Disjoint, with the shortest boundary-to-boundary distance.
    Gap(f64),
    /// Overlapping, with the minimum translation that would separate them.
    Overlap(f64),
}

fn project(pts: &[(f64, f64)], axis: (f64, f64)) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.0 * axis.0 + p.1 * axis.1;
        (lo.min(d), hi.max(d))
    })
}

fn edge_normals(pts: &[(f64, f64)]) -> impl Iterator<Item = (f64, f64)> + '_ {
    (0..pts.len()).filter_map(move |i| {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let len = ex.hypot(ey);
        (len > 0.0).then(|| (-ey / len, ex / len))
    })
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby)
}

fn min_vertex_edge(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for &p in a {
        for i in 0..b.len() {
            best = best.min(seg_dist(p, b[i], b[(i + 1) % b.len()]));
        }
    }
    best
}

/// Separating-axis contact test for two convex polygons.
pub fn convex_contact(a: &[(f64, f64)], b: &[(f64, f64)]) -> Contact {
    let mut depth = f64::INFINITY;
    for axis in edge_normals(a).chain(edge_normals(b)) {
        let (a0, a1) = project(a, axis);
        let (b0, b1) = project(b, axis);
        let overlap = a1.min(b1) - a0.max(b0);
        if overlap < 0.0 {
            return Contact::Gap(min_vertex_edge(a, b).min(min_vertex_edge(b, a)));
        }
        // Push-out in the cheaper direction; exceeds `overlap` when one
        // projection contains the other.
        depth = depth.min((a1 - b0).min(b1 - a0));
    }
    Contact::Overlap(depth)
}

pub fn shape_contact(a: &Shape, b: &Shape) -> Contact {
    convex_contact(&outline(a), &outline(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
    HorizontallyAligned,
    VerticallyAligned,
    Touching,
    Contains,
    LargerThan,
    SameColor,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left-of",
            RelationKind::RightOf => "right-of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
            RelationKind::HorizontallyAligned => "horizontally-aligned",
            RelationKind::VerticallyAligned => "vertically-aligned",
            RelationKind::Touching => "touching",
            RelationKind::Contains => "contains",
            RelationKind::LargerThan => "larger-than",
            RelationKind::SameColor => "same-color",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QualitativeRelation {
    pub kind: RelationKind,
    pub subject: usize,
    pub object: usize,
}

/// Evaluates a single relation predicate for an ordered pair.
pub fn relation_holds(kind: RelationKind, canvas: Canvas, a: &Shape, b: &Shape) -> bool {
    let (ba, bb) = (bounding_box(a), bounding_box(b));
    match kind {
        RelationKind::LeftOf => ba.max_x <= bb.min_x + TOUCH_TOLERANCE,
        RelationKind::RightOf => bb.max_x <= ba.min_x + TOUCH_TOLERANCE,
        RelationKind::Above => ba.max_y <= bb.min_y + TOUCH_TOLERANCE,
        RelationKind::Below => bb.max_y <= ba.min_y + TOUCH_TOLERANCE,
        RelationKind::HorizontallyAligned => (a.y - b.y).abs() <= ALIGN_FRACTION * f64::from(canvas.height),
        RelationKind::VerticallyAligned => (a.x - b.x).abs() <= ALIGN_FRACTION * f64::from(canvas.width),
        RelationKind::Touching => match shape_contact(a, b) {
            Contact::Gap(g) => g <= TOUCH_TOLERANCE,
            Contact::Overlap(d) => d <= TOUCH_TOLERANCE,
        },
        RelationKind::Contains => ba.contains_with_margin(&bb, CONTAIN_MARGIN),
        RelationKind::LargerThan => shape_area(a) > LARGER_RATIO * shape_area(b),
        RelationKind::SameColor => a.fill_color != NamedColor::None && a.fill_color == b.fill_color,
    }
}

const KINDS: [RelationKind; 10] = [
    RelationKind::LeftOf,
    RelationKind::RightOf,
    RelationKind::Above,
    RelationKind::Below,
    RelationKind::HorizontallyAligned,
    RelationKind::VerticallyAligned,
    RelationKind::Touching,
    RelationKind::Contains,
    RelationKind::LargerThan,
    RelationKind::SameColor,
];

/// Every relation that holds, ordered by kind, then subject, then object.
pub fn extract_relations(d: &Diagram) -> Vec<QualitativeRelation> {
    let mut out = Vec::new();
    for kind in KINDS {
        for (i, a) in d.shapes.iter().enumerate() {
            for (j, b) in d.shapes.iter().enumerate() {
                if i != j && relation_holds(kind, d.canvas, a, b) {
                    out.push(QualitativeRelation {
                        kind,
                        subject: i,
                        object: j,
                    });
                }
            }
        }
    }
    out
}

/// Short noun phrase for a shape, e.g. "red rectangle #2".
pub fn describe_shape(s: &Shape, index: usize) -> String {
    if s.fill_color == NamedColor::None {
        format!("outlined {} #{index}", s.shape_type)
    } else {
        format!("{} {} #{index}", s.fill_color, s.shape_type)
    }
}

pub fn describe_relation(d: &Diagram, r: &QualitativeRelation) -> String {
    format!(
        "{} {} {}",
        describe_shape(&d.shapes[r.subject], r.subject),
        r.kind,
        describe_shape(&d.shapes[r.object], r.object)
    )
}

/// Weights of the per-shape cost. Each term is in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub position: f64,
    pub size: f64,
    pub fill: f64,
    pub stroke: f64,
    pub rotation: f64,
    pub unmatched_penalty: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            position: 0.5,
            size: 0.2,
            fill: 0.15,
            stroke: 0.1,
            rotation: 0.05,
            unmatched_penalty: 1.0,
        }
    }
}

fn relative_difference(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m > 0.0 {
        (a - b).abs() / m
    } else {
        0.0
    }
}

/// Smallest angle between two rotations, in degrees (0..=180).
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Cost of matching `a` with `b` (same type assumed).
pub fn shape_cost(canvas: Canvas, a: &Shape, b: &Shape, w: &CostWeights) -> f64 {
    let displacement = ((a.x - b.x).hypot(a.y - b.y) / canvas.diagonal()).min(1.0);
    let (ba, bb) = (bounding_box(a), bounding_box(b));
    let size = (relative_difference(ba.width(), bb.width()) + relative_difference(ba.height(), bb.height())) / 2.0;
    let fill = f64::from(u8::from(a.fill_color != b.fill_color));
    let stroke = f64::from(u8::from(a.stroke_color != b.stroke_color));
    let rotation = angular_difference(a.rotation, b.rotation) / 180.0;
    w.position * displacement + w.size * size + w.fill * fill + w.stroke * stroke + w.rotation * rotation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralDistance {
    pub value: f64,
    /// `(index in a, index in b)`, sorted by index in `a`.
    pub matching: Vec<(usize, usize)>,
}

impl StructuralDistance {
    pub fn is_equivalent(&self) -> bool {
        self.value < EQUIVALENCE_THRESHOLD
    }
}

pub fn structural_distance(a: &Diagram, b: &Diagram) -> Result<StructuralDistance, GrammarError> {
    structural_distance_with(a, b, &CostWeights::default())
}

/// Minimal-cost matching between same-typed shapes plus a flat penalty for
/// every shape left unmatched. Symmetric in its arguments.
pub fn structural_distance_with(a: &Diagram, b: &Diagram, w: &CostWeights) -> Result<StructuralDistance, GrammarError> {
    if a.canvas != b.canvas {
        return Err(GrammarError::CanvasMismatch {
            a: a.canvas,
            b: b.canvas,
        });
    }
    // Evaluate in a canonical argument order so swapping a and b gives
    // bit-identical values.
    if serialize_diagram(a) > serialize_diagram(b) {
        let mut d = distance_canonical(b, a, w);
        d.matching = d.matching.into_iter().map(|(i, j)| (j, i)).collect();
        d.matching.sort();
        return Ok(d);
    }
    Ok(distance_canonical(a, b, w))
}

fn distance_canonical(a: &Diagram, b: &Diagram, w: &CostWeights) -> StructuralDistance {
    let mut pair_costs = Vec::new();
    let mut matching = Vec::new();
    let mut unmatched = 0usize;
    for t in ShapeType::ALL {
        let ia: Vec<usize> = (0..a.shapes.len()).filter(|&i| a.shapes[i].shape_type == t).collect();
        let ib: Vec<usize> = (0..b.shapes.len()).filter(|&j| b.shapes[j].shape_type == t).collect();
        if ia.is_empty() && ib.is_empty() {
            continue;
        }
        let cost: Vec<Vec<f64>> = ia
            .iter()
            .map(|&i| {
                ib.iter()
                    .map(|&j| shape_cost(a.canvas, &a.shapes[i], &b.shapes[j], w))
                    .collect()
            })
            .collect();
        let pairs = if ia.len().max(ib.len()) <= EXHAUSTIVE_MATCH_LIMIT {
            optimal_assignment(&cost, w.unmatched_penalty)
        } else {
            greedy_assignment(&cost)
        };
        unmatched += ia.len() + ib.len() - 2 * pairs.len();
        for (r, c) in pairs {
            pair_costs.push(cost[r][c]);
            matching.push((ia[r], ib[c]));
        }
    }
    pair_costs.sort_by(f64::total_cmp);
    let value = pair_costs.iter().sum::<f64>() + w.unmatched_penalty * unmatched as f64;
    matching.sort();
    StructuralDistance { value, matching }
}

/// Exact minimum-cost partial assignment by dynamic programming over subsets
/// of columns. Rows may stay unmatched at `penalty` each, as may columns.
pub fn optimal_assignment(cost: &[Vec<f64>], penalty: f64) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Iterate over the smaller dimension so the subset side stays small.
    if rows < cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut pairs: Vec<_> = optimal_assignment(&t, penalty)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort();
        return pairs;
    }
    let full = 1usize << cols;
    // best[k][mask]: min cost having decided rows < k, using columns `mask`.
    let mut best = vec![vec![f64::INFINITY; full]; rows + 1];
    let mut choice = vec![vec![usize::MAX; full]; rows + 1];
    best[0][0] = 0.0;
    for k in 0..rows {
        for mask in 0..full {
            let cur = best[k][mask];
            if cur == f64::INFINITY {
                continue;
            }
            let skip = cur + penalty;
            if skip < best[k + 1][mask] {
                best[k + 1][mask] = skip;
                choice[k + 1][mask] = cols;
            }
            for c in 0..cols {
                if mask & (1 << c) == 0 {
                    let next = mask | (1 << c);
                    let v = cur + cost[k][c];
                    if v < best[k + 1][next] {
                        best[k + 1][next] = v;
                        choice[k + 1][next] = c;
                    }
                }
            }
        }
    }
    let mut best_mask = 0;
    let mut best_total = f64::INFINITY;
    for mask in 0..full {
        let free = (cols - mask.count_ones() as usize) as f64;
        let total = best[rows][mask] + penalty * free;
        if total < best_total {
            best_total = total;
            best_mask = mask;
        }
    }
    let mut pairs = Vec::new();
    let mut mask = best_mask;
    for k in (1..=rows).rev() {
        let c = choice[k][mask];
        if c < cols {
            pairs.push((k - 1, c));
            mask &= !(1 << c);
        }
    }
    pairs.reverse();
    pairs
}

/// Cheapest-pair-first matching for large groups.
pub fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = cost
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (v, r, c)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let (mut ru, mut cu) = (vec![false; rows], vec![false; cols]);
    let mut pairs = Vec::new();
    for (_, r, c) in all {
        if !ru[r] && !cu[c] {
            ru[r] = true;
            cu[c] = true;
            pairs.push((r, c));
        }
    }
    pairs.sort();
    pairs
}

/// Relations present in one diagram but not the other, after mapping shape
/// indices through the structural matching.
#[derive(Debug, Clone, Default)]
pub struct RelationDiff {
    /// Holds in the target, missing in the current diagram.
    pub missing: Vec<String>,
    /// Holds in the current diagram, absent from the target.
    pub extra: Vec<String>,
}

pub fn relation_diff(current: &Diagram, target: &Diagram) -> Result<RelationDiff, GrammarError> {
    let dist = structural_distance(current, target)?;
    let to_target = |i: usize| dist.matching.iter().find(|m| m.0 == i).map(|m| m.1);
    let to_current = |j: usize| dist.matching.iter().find(|m| m.1 == j).map(|m| m.0);
    let cur_rel = extract_relations(current);
    let tgt_rel = extract_relations(target);
    let mut diff = RelationDiff::default();
    for r in &tgt_rel {
        let mapped = match (to_current(r.subject), to_current(r.object)) {
            (Some(s), Some(o)) => Some(QualitativeRelation {
                kind: r.kind,
                subject: s,
                object: o,
            }),
            _ => None,
        };
        if mapped.is_none_or(|m| !cur_rel.contains(&m)) {
            diff.missing.push(describe_relation(target, r));
        }
    }
    for r in &cur_rel {
        let mapped = match (to_target(r.subject), to_target(r.object)) {
            (Some(s), Some(o)) => Some(QualitativeRelation {
                kind: r.kind,
                subject: s,
                object: o,
            }),
            _ => None,
        };
        if mapped.is_none_or(|m| !tgt_rel.contains(&m)) {
            diff.extra.push(describe_relation(current, r));
        }
    }
    Ok(diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{Diagram, NamedColor, Shape, ShapeType};

    fn c100() -> Canvas {
        Canvas::new(100, 100).unwrap()
    }

    fn rect(x: f64, y: f64, w: f64, h: f64) -> Shape {
        Shape::new(ShapeType::Rectangle).at(x, y).sized(w, h)
    }

    fn has(rels: &[QualitativeRelation], kind: RelationKind, s: usize, o: usize) -> bool {
        rels.contains(&QualitativeRelation {
            kind,
            subject: s,
            object: o,
        })
    }

    #[test]
    fn bounding_boxes() {
        let b = bounding_box(&rect(50.0, 50.0, 20.0, 10.0));
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (40.0, 45.0, 60.0, 55.0));
        let b = bounding_box(&rect(50.0, 50.0, 20.0, 10.0).rotated(90.0));
        for (got, want) in [(b.min_x, 45.0), (b.min_y, 40.0), (b.max_x, 55.0), (b.max_y, 60.0)] {
            assert!((got - want).abs() < 1e-9, "{b:?}");
        }
        let c = bounding_box(&Shape::new(ShapeType::Circle).at(30.0, 30.0).sized(10.0, 10.0));
        assert_eq!((c.min_x, c.min_y, c.max_x, c.max_y), (25.0, 25.0, 35.0, 35.0));
    }

    #[test]
    fn aligned_circles_both_ways() {
        let d = Diagram::from_shapes(
            c100(),
            vec![
                Shape::new(ShapeType::Circle).at(20.0, 50.0).sized(10.0, 10.0),
                Shape::new(ShapeType::Circle).at(80.0, 50.0).sized(10.0, 10.0),
            ],
        )
        .unwrap();
        let rels = extract_relations(&d);
        assert!(has(&rels, RelationKind::HorizontallyAligned, 0, 1));
        assert!(has(&rels, RelationKind::HorizontallyAligned, 1, 0));
        assert!(has(&rels, RelationKind::LeftOf, 0, 1));
        assert!(has(&rels, RelationKind::RightOf, 1, 0));
        assert!(!has(&rels, RelationKind::VerticallyAligned, 0, 1));
    }

    #[test]
    fn nested_rectangles() {
        let d = Diagram::from_shapes(c100(), vec![rect(50.0, 50.0, 10.0, 10.0), rect(50.0, 50.0, 60.0, 40.0)]).unwrap();
        let rels = extract_relations(&d);
        assert!(has(&rels, RelationKind::Contains, 1, 0));
        assert!(has(&rels, RelationKind::LargerThan, 1, 0));
        assert!(!has(&rels, RelationKind::Contains, 0, 1));
        assert!(!has(&rels, RelationKind::Touching, 0, 1));
    }

    #[test]
    fn half_pixel_gap_touches() {
        // Right edge of A at 40, left edge of B at 40.5.
        let d = Diagram::from_shapes(c100(), vec![rect(30.0, 50.0, 20.0, 20.0), rect(50.5, 50.0, 20.0, 20.0)]).unwrap();
        match shape_contact(&d.shapes[0], &d.shapes[1]) {
            Contact::Gap(g) => assert!((g - 0.5).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert!(has(&extract_relations(&d), RelationKind::Touching, 0, 1));
        let far =
            Diagram::from_shapes(c100(), vec![rect(30.0, 50.0, 20.0, 20.0), rect(52.0, 50.0, 20.0, 20.0)]).unwrap();
        assert!(!has(&extract_relations(&far), RelationKind::Touching, 0, 1));
    }

    #[test]
    fn relation_order_is_by_kind_then_indices() {
        let d = Diagram::from_shapes(
            c100(),
            vec![
                rect(20.0, 20.0, 10.0, 10.0).filled(NamedColor::Red),
                rect(80.0, 20.0, 10.0, 10.0).filled(NamedColor::Red),
                rect(20.0, 80.0, 30.0, 10.0),
            ],
        )
        .unwrap();
        let rels = extract_relations(&d);
        let mut sorted = rels.clone();
        sorted.sort();
        assert_eq!(rels, sorted);
        assert!(has(&rels, RelationKind::SameColor, 0, 1));
    }

    #[test]
    fn distance_identical_is_zero() {
        let d = Diagram::from_shapes(c100(), vec![rect(10.0, 10.0, 5.0, 5.0), rect(50.0, 60.0, 8.0, 3.0)]).unwrap();
        let sd = structural_distance(&d, &d).unwrap();
        assert_eq!(sd.value, 0.0);
        assert_eq!(sd.matching, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn distance_of_a_pure_translation() {
        let a = Diagram::from_shapes(c100(), vec![rect(40.0, 50.0, 10.0, 10.0)]).unwrap();
        let b = Diagram::from_shapes(c100(), vec![rect(50.0, 50.0, 10.0, 10.0)]).unwrap();
        // 0.5 * 10 / hypot(100, 100)
        let expected = 0.5 * 10.0 / 141.421_356_237_309_5;
        let v = structural_distance(&a, &b).unwrap().value;
        assert!((v - expected).abs() < 1e-12, "{v}");
    }

    #[test]
    fn one_extra_shape_costs_one() {
        let base = vec![
            rect(10.0, 10.0, 5.0, 5.0),
            Shape::new(ShapeType::Circle).at(40.0, 40.0).sized(9.0, 9.0),
            Shape::new(ShapeType::Triangle).at(70.0, 70.0).sized(9.0, 9.0),
        ];
        let a = Diagram::from_shapes(c100(), base.clone()).unwrap();
        let mut more = base;
        more.push(rect(80.0, 20.0, 10.0, 10.0).filled(NamedColor::Blue));
        let b = Diagram::from_shapes(c100(), more).unwrap();
        assert_eq!(structural_distance(&a, &b).unwrap().value, 1.0);
        assert_eq!(structural_distance(&b, &a).unwrap().value, 1.0);
    }

    #[test]
    fn types_never_match_across() {
        let a = Diagram::from_shapes(c100(), vec![rect(10.0, 10.0, 5.0, 5.0)]).unwrap();
        let b = Diagram::from_shapes(
            c100(),
            vec![Shape::new(ShapeType::Ellipse).at(10.0, 10.0).sized(5.0, 5.0)],
        )
        .unwrap();
        let sd = structural_distance(&a, &b).unwrap();
        assert_eq!(sd.value, 2.0);
        assert!(sd.matching.is_empty());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let cost = vec![
            vec![0.9, 0.1, 0.5, 0.3],
            vec![0.2, 0.8, 0.4, 0.7],
            vec![0.6, 0.3, 0.05, 0.9],
        ];
        let pairs = optimal_assignment(&cost, 1.0);
        let total: f64 = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert!((total - 0.35).abs() < 1e-12);
    }

    #[test]
    fn relation_diff_reports_moves() {
        let current =
            Diagram::from_shapes(c100(), vec![rect(20.0, 50.0, 10.0, 10.0), rect(80.0, 20.0, 10.0, 10.0)]).unwrap();
        let target =
            Diagram::from_shapes(c100(), vec![rect(20.0, 50.0, 10.0, 10.0), rect(80.0, 50.0, 10.0, 10.0)]).unwrap();
        let diff = relation_diff(&current, &target).unwrap();
        assert!(
            diff.missing.iter().any(|l| l.contains("horizontally-aligned")),
            "{diff:?}"
        );
        assert!(diff.extra.iter().any(|l| l.contains("above")), "{diff:?}");
    }
}
