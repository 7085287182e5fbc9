mod common;

use proptest::prelude::*;
use serde_json::{json, Value};

use sketch2svg::grammar::{
    apply_delta, diff_diagrams, normalize_shape, parse_diagram, serialize_diagram, serialize_shape, Canvas, Diagram,
    GrammarError, NamedColor, Shape, ShapeType,
};

fn canvas() -> Canvas {
    Canvas::new(256, 192).unwrap()
}

fn arb_color() -> impl Strategy<Value = NamedColor> {
    (0usize..9).prop_map(|i| NamedColor::ALL[i])
}

fn arb_number(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    prop_oneof![
        (lo..hi),
        (lo.ceil() as i64..hi as i64).prop_map(|v| v as f64),
        (lo..hi).prop_map(|v| (v * 10_000.0).round() / 10_000.0),
    ]
}

fn arb_shape() -> impl Strategy<Value = Shape> {
    (
        (0usize..4).prop_map(|i| ShapeType::ALL[i]),
        arb_number(-50.0, 300.0),
        arb_number(-50.0, 300.0),
        arb_number(0.01, 200.0),
        arb_number(0.01, 200.0),
        arb_color(),
        arb_color(),
        arb_number(0.0, 10.0),
        arb_number(-720.0, 720.0),
    )
        .prop_map(|(t, x, y, sx, sy, f, s, w, r)| Shape {
            shape_type: t,
            x,
            y,
            scale_x: sx,
            scale_y: sy,
            fill_color: f,
            stroke_color: s,
            stroke_width: w,
            rotation: r,
        })
}

fn arb_diagram(max: usize) -> impl Strategy<Value = Diagram> {
    prop::collection::vec(arb_shape(), 0..max).prop_map(|shapes| Diagram::from_shapes(canvas(), shapes).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn round_trip(d in arb_diagram(12)) {
        let text = serialize_diagram(&d);
        let back = parse_diagram(&text, canvas()).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(serialize_diagram(&back), text);
    }

    #[test]
    fn normalization_is_idempotent(s in arb_shape()) {
        if let Ok(n) = s.normalized() {
            prop_assert_eq!(n.normalized().unwrap(), n);
            let record: Value = serde_json::from_str(&serialize_shape(&n)).unwrap();
            prop_assert_eq!(normalize_shape(&record).unwrap(), n);
        }
    }

    #[test]
    fn delta_soundness(a in arb_diagram(8), b in arb_diagram(8)) {
        let delta = diff_diagrams(&a, &b).unwrap();
        prop_assert_eq!(apply_delta(&a, &delta).unwrap(), b.clone());
        prop_assert_eq!(delta.is_empty(), a == b);
    }

    #[test]
    fn foreign_color_names_are_rejected(name in "[A-Za-z_ -]{1,12}") {
        prop_assume!(NamedColor::from_name(&name).is_none());
        let doc = json!({"shapes": [{"shape_type": "circle", "fill_color": name}]}).to_string();
        let is_unknown_color = matches!(parse_diagram(&doc, canvas()), Err(GrammarError::UnknownColor { .. }));
        prop_assert!(is_unknown_color);
    }

    #[test]
    fn foreign_type_names_are_rejected(name in "[A-Za-z_ -]{1,12}") {
        prop_assume!(ShapeType::from_name(&name).is_none());
        let doc = json!({"shapes": [{"shape_type": name}]}).to_string();
        let is_unknown_type = matches!(parse_diagram(&doc, canvas()), Err(GrammarError::UnknownShapeType { .. }));
        prop_assert!(is_unknown_type);
    }
}
