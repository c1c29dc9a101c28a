//! Static SVG snapshots of landmarks, ground-truth labels, and predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{GroundTruthLabel, MapRecord, PlacementResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub landmark_stroke: String,
    pub ground_truth_stroke: String,
    pub prediction_stroke: String,
    pub stroke_width: f64,
    pub font_size: f64,
    /// Half-length of the prediction crosshair arms.
    pub marker_radius: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            landmark_stroke: "#1f77b4".into(),
            ground_truth_stroke: "#2ca02c".into(),
            prediction_stroke: "#d62728".into(),
            stroke_width: 1.5,
            font_size: 10.0,
            marker_radius: 5.0,
        }
    }
}

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Renders one map. Element ids are `landmark-<id>`, `gt-<id>` and
/// `pred-<id>`; layers are emitted in landmark, ground-truth, prediction
/// order with items sorted by landmark id, so output is byte-stable.
pub fn render_svg(
    map: &MapRecord,
    labels: &[GroundTruthLabel],
    results: &[PlacementResult],
    style: &RenderStyle,
) -> String {
    let (w, h) = (map.image_width, map.image_height);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );

    let mut landmarks: Vec<_> = map.landmarks.iter().collect();
    landmarks.sort_by(|a, b| a.id.cmp(&b.id));
    let on_map = |id: &str| map.landmark(id).is_some();
    let mut labels: Vec<_> = labels.iter().filter(|l| on_map(&l.landmark_id)).collect();
    labels.sort_by(|a, b| a.landmark_id.cmp(&b.landmark_id));
    let mut preds: Vec<_> = results
        .iter()
        .filter(|r| on_map(&r.landmark_id))
        .filter_map(|r| r.predicted.map(|p| (r.landmark_id.as_str(), p)))
        .collect();
    preds.sort_by(|a, b| a.0.cmp(b.0));

    if !landmarks.is_empty() {
        s.push('\n');
        let _ = writeln!(
            s,
            r#"<g class="landmarks" fill="none" stroke="{}" stroke-width="{}" font-size="{}" font-family="sans-serif">"#,
            escape_xml(&style.landmark_stroke),
            style.stroke_width,
            style.font_size
        );
        for lm in &landmarks {
            let points: Vec<String> = lm.boundary.vertices().iter().map(|p| format!("{},{}", p.x, p.y)).collect();
            let id = escape_xml(&lm.id);
            let _ = writeln!(
                s,
                r#"<g id="landmark-{id}"><polygon points="{}"/><title>{}</title></g>"#,
                points.join(" "),
                escape_xml(&lm.name)
            );
        }
        s.push_str("</g>");
    }
    if !labels.is_empty() {
        s.push('\n');
        let _ = writeln!(
            s,
            r#"<g class="ground-truth" fill="none" stroke="{}" stroke-width="{}">"#,
            escape_xml(&style.ground_truth_stroke),
            style.stroke_width
        );
        for l in &labels {
            let b = l.bbox;
            let _ = writeln!(
                s,
                r#"<rect id="gt-{}" x="{}" y="{}" width="{}" height="{}"/>"#,
                escape_xml(&l.landmark_id),
                b.min().x,
                b.min().y,
                b.width(),
                b.height()
            );
        }
        s.push_str("</g>");
    }
    if !preds.is_empty() {
        s.push('\n');
        let _ = writeln!(
            s,
            r#"<g class="predictions" fill="none" stroke="{}" stroke-width="{}">"#,
            escape_xml(&style.prediction_stroke),
            style.stroke_width
        );
        let r = style.marker_radius;
        for (id, p) in &preds {
            let _ = writeln!(
                s,
                r#"<path id="pred-{}" d="M {} {} H {} M {} {} V {}"/>"#,
                escape_xml(id),
                p.x - r,
                p.y,
                p.x + r,
                p.x,
                p.y - r,
                p.y + r
            );
        }
        s.push_str("</g>");
    }
    s.push_str("</svg>\n");
    s
}
