//! Bird's-eye-view SVG rendering: points as gray dots, ground-truth boxes
//! as gray outlines, predictions colored by generation order from magenta
//! to blue.

use std::fmt::Write;

use crate::geometry::{bev_footprint, Box3D};
use crate::scenegen::Scene;

const CANVAS: f64 = 800.0;

/// Linear RGB ramp (255,0,255) -> (0,0,255) over the generation index.
fn order_color(index: usize, total: usize) -> String {
    let t = if total <= 1 {
        0.0
    } else {
        index as f64 / (total - 1) as f64
    };
    let red = (255.0 * (1.0 - t)).round() as u8;
    format!("rgb({red},0,255)")
}

fn world_extent(scene: &Scene, predictions: &[Box3D]) -> f64 {
    let mut m: f64 = 1.0;
    for p in &scene.points {
        m = m.max(p.x.abs()).max(p.y.abs());
    }
    for b in scene.boxes.iter().chain(predictions) {
        for v in bev_footprint(b).vertices {
            m = m.max(v[0].abs()).max(v[1].abs());
        }
    }
    (m + 2.0).ceil()
}

/// Well-formed SVG 1.1 document for a scene and optional predictions.
pub fn render_svg(scene: &Scene, predictions: &[Box3D]) -> String {
    let extent = world_extent(scene, predictions);
    // World (x up, y left at yaw 0) to screen: x right, y down.
    let sx = |x: f64| (x + extent) / (2.0 * extent) * CANVAS;
    let sy = |y: f64| (extent - y) / (2.0 * extent) * CANVAS;

    let mut out = String::new();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="white"/>"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<title>scene {} ({} points, {} gt boxes, {} predictions)</title>"#,
        scene.id,
        scene.points.len(),
        scene.boxes.len(),
        predictions.len()
    )
    .unwrap();

    for p in &scene.points {
        writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="#b0b0b0"/>"##,
            sx(p.x),
            sy(p.y)
        )
        .unwrap();
    }

    let polygon = |b: &Box3D, stroke: &str, width: f64| {
        let pts: Vec<String> = bev_footprint(b)
            .vertices
            .iter()
            .map(|v| format!("{:.2},{:.2}", sx(v[0]), sy(v[1])))
            .collect();
        format!(
            r#"<polygon points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
            pts.join(" ")
        )
    };

    for b in &scene.boxes {
        writeln!(out, "{}", polygon(b, "#808080", 1.5)).unwrap();
    }
    for (i, b) in predictions.iter().enumerate() {
        writeln!(out, "{}", polygon(b, &order_color(i, predictions.len()), 2.0)).unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    out
}
