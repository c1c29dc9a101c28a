//! Prompt rendering: coordinate formats, the labeling prompt, neighbor
//! context, and instruction-tuning export.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::model::CoordFormat;
use crate::guidelines::{GuidelineError, RetrievalQuery, Retriever};
use crate::model::{boundary_distance, Dataset, Landmark, MapRecord, Polygon};

pub const TEMPLATE_VERSION: &str = "alp-prompt-v1";
pub const DEFAULT_NEIGHBOR_THRESHOLD_PX: f64 = 50.0;

/// Sentence appended when a response could not be parsed.
pub const OUTPUT_REMINDER: &str =
    "Your previous answer did not contain a coordinate pair. Respond with exactly one (X, Y) pair of pixel coordinates and nothing else.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instruction retrieval failed for `{landmark_id}`: {source}")]
    Retrieval {
        landmark_id: String,
        #[source]
        source: GuidelineError,
    },
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Renders polygon vertices, rounded to integers, in the canonical string for
/// `fmt`.
pub fn format_coords(poly: &Polygon, fmt: CoordFormat) -> String {
    let pts: Vec<(i64, i64)> = poly.vertices().iter().map(|p| p.rounded()).collect();
    match fmt {
        CoordFormat::List => {
            let items: Vec<String> = pts.iter().map(|(x, y)| format!("({x}, {y})")).collect();
            format!("[{}]", items.join(", "))
        }
        CoordFormat::Json => {
            let items: Vec<String> = pts.iter().map(|(x, y)| format!("{{\"x\": {x}, \"y\": {y}}}")).collect();
            format!("{{\"coordinates\": [{}]}}", items.join(", "))
        }
        CoordFormat::Css => {
            let items: Vec<String> = pts.iter().map(|(x, y)| format!("{x}px {y}px")).collect();
            format!("clip-path: polygon({});", items.join(", "))
        }
        CoordFormat::Xml => {
            let items: String = pts.iter().map(|(x, y)| format!("<point x=\"{x}\" y=\"{y}\"/>")).collect();
            format!("<polygon>{items}</polygon>")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec<'a> {
    pub instructions_text: String,
    pub landmark: &'a Landmark,
    pub format: CoordFormat,
    pub neighbors: Vec<&'a Landmark>,
    pub template_version: String,
}

impl<'a> PromptSpec<'a> {
    pub fn new(instructions_text: impl Into<String>, landmark: &'a Landmark, format: CoordFormat) -> Self {
        Self {
            instructions_text: instructions_text.into(),
            landmark,
            format,
            neighbors: Vec::new(),
            template_version: TEMPLATE_VERSION.to_string(),
        }
    }

    pub fn with_neighbors(mut self, neighbors: Vec<&'a Landmark>) -> Self {
        self.neighbors = neighbors;
        self
    }
}

/// Renders the labeling prompt. The neighbor block is appended only when
/// neighbors are present.
pub fn build_prompt(spec: &PromptSpec<'_>) -> String {
    let lm = spec.landmark;
    let fmt = spec.format;
    let mut p = String::new();
    p.push_str("You are an expert cartographer. Your task is to place a label for the landmark on a map.\n\n");
    p.push_str("Follow these labeling instructions:\n");
    p.push_str(spec.instructions_text.trim_end());
    p.push_str("\n\n");
    p.push_str(&format!("Landmark name: {}\n", lm.name));
    p.push_str(&format!("Landmark type: {}\n", lm.kind.key()));
    p.push_str(&format!(
        "Landmark location ({} format, pixel coordinates with the origin at the top-left corner of the map): {}\n\n",
        fmt,
        format_coords(&lm.boundary, fmt)
    ));
    p.push_str(
        "Where should the center of the label be placed? Answer with exactly one (X, Y) pair of pixel coordinates, for example (120, 340).\n",
    );
    if !spec.neighbors.is_empty() {
        p.push_str("\nNearby landmarks:\n");
        for n in &spec.neighbors {
            p.push_str(&format!(
                "- type: {}; location ({} format): {}\n",
                n.kind.key(),
                fmt,
                format_coords(&n.boundary, fmt)
            ));
        }
        p.push_str(
            "Consider these nearby landmarks and place the label so that it does not interfere with them or their labels.\n",
        );
    }
    p
}

/// Other landmarks on `map` within `threshold_px` of `landmark`, nearest
/// first, ties by id.
pub fn neighbors_of<'a>(landmark: &Landmark, map: &'a MapRecord, threshold_px: f64) -> Vec<&'a Landmark> {
    let own = landmark.bbox();
    let mut found: Vec<(f64, &Landmark)> = map
        .landmarks
        .iter()
        .filter(|l| l.id != landmark.id)
        .map(|l| (boundary_distance(own, l.bbox()), l))
        .filter(|(d, _)| *d <= threshold_px)
        .collect();
    found.sort_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)));
    found.into_iter().map(|(_, l)| l).collect()
}

/// Retrieval query for a landmark, with neighbor names and types when given.
pub fn retrieval_query(landmark: &Landmark, neighbors: Option<&[&Landmark]>) -> RetrievalQuery {
    let q = RetrievalQuery::new(landmark.name.clone(), landmark.kind);
    match neighbors {
        Some(ns) => q.with_neighbors(ns.iter().map(|n| (n.name.clone(), n.kind)).collect()),
        None => q,
    }
}

/// Retrieves instructions and renders the full prompt for one landmark.
pub fn prompt_for_landmark(
    landmark: &Landmark,
    map: &MapRecord,
    retriever: &Retriever<'_>,
    fmt: CoordFormat,
    neighbor_threshold: Option<f64>,
) -> Result<String, GuidelineError> {
    let neighbors = neighbor_threshold.map(|t| neighbors_of(landmark, map, t));
    let query = retrieval_query(landmark, neighbors.as_deref());
    let instructions = retriever.instructions_for(&query)?;
    let spec = PromptSpec::new(instructions, landmark, fmt).with_neighbors(neighbors.unwrap_or_default());
    Ok(build_prompt(&spec))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningPair {
    pub instruction: String,
    pub response: String,
}

/// `(X, Y)` with integer-rounded coordinates.
pub fn format_response(x: i64, y: i64) -> String {
    format!("({x}, {y})")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExportReport {
    pub written: usize,
    /// Landmarks in the requested set that have no ground-truth label.
    pub skipped_missing_ground_truth: Vec<String>,
}

/// Writes one `{"instruction", "response"}` JSON line per landmark in
/// `landmark_ids` that has a ground-truth label. Landmarks are visited in
/// dataset order.
pub fn export_tuning<W: Write>(
    dataset: &Dataset,
    landmark_ids: &HashSet<String>,
    fmt: CoordFormat,
    retriever: &Retriever<'_>,
    neighbor_threshold: Option<f64>,
    mut out: W,
) -> Result<ExportReport, PromptError> {
    let labels = dataset.label_index();
    let mut report = ExportReport::default();
    for map in &dataset.maps {
        for lm in map.landmarks.iter().filter(|l| landmark_ids.contains(&l.id)) {
            let Some(label) = labels.get(lm.id.as_str()) else {
                report.skipped_missing_ground_truth.push(lm.id.clone());
                continue;
            };
            let instruction = prompt_for_landmark(lm, map, retriever, fmt, neighbor_threshold).map_err(|source| {
                PromptError::Retrieval {
                    landmark_id: lm.id.clone(),
                    source,
                }
            })?;
            let (x, y) = label.centroid().rounded();
            let pair = TuningPair {
                instruction,
                response: format_response(x, y),
            };
            serde_json::to_writer(&mut out, &pair).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            report.written += 1;
        }
    }
    out.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LandmarkType, Point};
    use proptest::prelude::*;

    fn poly(pts: &[(f64, f64)]) -> Polygon {
        Polygon::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    fn lm(id: &str, b: (f64, f64, f64, f64)) -> Landmark {
        Landmark {
            id: id.into(),
            name: format!("Place {id}"),
            kind: LandmarkType::Shop,
            boundary: poly(&[(b.0, b.1), (b.2, b.3)]),
            map_id: "m".into(),
        }
    }

    #[test]
    fn format_examples() {
        let p = poly(&[(100., 150.), (250., 300.), (100., 400.), (250., 500.)]);
        assert_eq!(
            format_coords(&p, CoordFormat::List),
            "[(100, 150), (250, 300), (100, 400), (250, 500)]"
        );
        assert_eq!(
            format_coords(&poly(&[(1., 2.)]), CoordFormat::Xml),
            r#"<polygon><point x="1" y="2"/></polygon>"#
        );
        assert_eq!(
            format_coords(&poly(&[(1., 2.), (3., 4.)]), CoordFormat::Css),
            "clip-path: polygon(1px 2px, 3px 4px);"
        );
        assert_eq!(
            format_coords(&poly(&[(1., 2.), (3., 4.)]), CoordFormat::Json),
            r#"{"coordinates": [{"x": 1, "y": 2}, {"x": 3, "y": 4}]}"#
        );
        assert_eq!(format_coords(&poly(&[(1.5, 2.49)]), CoordFormat::List), "[(2, 2)]");
    }

    #[test]
    fn prompt_structure() {
        let target = lm("a", (0., 0., 10., 10.));
        let n = lm("b", (20., 0., 30., 10.));
        let spec = PromptSpec::new("Place shop labels inside the footprint.", &target, CoordFormat::List);
        let plain = build_prompt(&spec);
        assert_eq!(plain, build_prompt(&spec));
        assert!(plain.contains("Place shop labels inside the footprint."));
        assert!(!plain.contains("Nearby landmarks"));
        let order = [
            "place a label for the landmark on a map",
            "Place shop labels",
            "Landmark name: Place a",
            "Landmark type: shop",
            "[(0, 0), (10, 10)]",
            "exactly one (X, Y) pair",
        ];
        let positions: Vec<usize> = order.iter().map(|s| plain.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));

        let with_n = build_prompt(&spec.clone().with_neighbors(vec![&n]));
        assert!(with_n.starts_with(&plain));
        assert!(with_n.contains("- type: shop; location (List format): [(20, 0), (30, 10)]"));
    }

    #[test]
    fn neighbor_threshold() {
        let m = MapRecord {
            id: "m".into(),
            city: "c".into(),
            image_width: 500,
            image_height: 500,
            labeled_image_path: "l.png".into(),
            unlabeled_image_path: "u.png".into(),
            landmarks: vec![
                lm("a", (0., 0., 10., 10.)),
                lm("touch", (10., 0., 20., 10.)),
                lm("far", (61., 0., 70., 10.)),
                lm("edge", (0., 60., 10., 70.)),
            ],
        };
        let got: Vec<_> = neighbors_of(&m.landmarks[0], &m, 50.0).iter().map(|l| l.id.as_str()).collect();
        assert_eq!(got, vec!["touch", "edge"]);
        assert!(neighbors_of(&m.landmarks[2], &m, 20.0).is_empty());
        let iso = neighbors_of(&m.landmarks[3], &m, 49.0);
        assert!(iso.is_empty());
    }

    proptest! {
        #[test]
        fn formats_are_injective(
            a in prop::collection::vec((-50i64..50, -50i64..50), 1..5),
            b in prop::collection::vec((-50i64..50, -50i64..50), 1..5),
        ) {
            let pa = poly(&a.iter().map(|&(x, y)| (x as f64, y as f64)).collect::<Vec<_>>());
            let pb = poly(&b.iter().map(|&(x, y)| (x as f64, y as f64)).collect::<Vec<_>>());
            for fmt in CoordFormat::ALL {
                prop_assert_eq!(a == b, format_coords(&pa, fmt) == format_coords(&pb, fmt));
            }
        }

        #[test]
        fn neighbors_symmetric(boxes in prop::collection::vec((0.0..300.0f64, 0.0..300.0f64, 1.0..40.0f64), 2..8)) {
            let m = MapRecord {
                id: "m".into(), city: "c".into(), image_width: 400, image_height: 400,
                labeled_image_path: "l".into(), unlabeled_image_path: "u".into(),
                landmarks: boxes.iter().enumerate().map(|(i, &(x, y, s))| lm(&format!("l{i}"), (x, y, x + s, y + s))).collect(),
            };
            for a in &m.landmarks {
                for b in &m.landmarks {
                    if a.id == b.id { continue; }
                    let ab = neighbors_of(a, &m, 50.0).iter().any(|l| l.id == b.id);
                    let ba = neighbors_of(b, &m, 50.0).iter().any(|l| l.id == a.id);
                    prop_assert_eq!(ab, ba);
                }
            }
        }
    }
}
