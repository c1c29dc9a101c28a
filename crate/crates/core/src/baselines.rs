//! Classical placement baselines: bounding-box centroid, fixed compass
//! anchor, and simulated annealing over discrete anchor candidates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundingBox, Landmark, MapRecord, Point};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("map `{0}` has no landmarks")]
    EmptyMap(String),
    #[error("no placement given for landmark `{0}`")]
    MissingPlacement(String),
    #[error("invalid annealing parameters: {0}")]
    InvalidParams(String),
}

/// Candidate label position relative to a landmark's bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    Center,
    Top,
    TopRight,
    Right,
    BottomRight,
    Bottom,
    BottomLeft,
    Left,
    TopLeft,
}

impl Anchor {
    pub const ALL: [Anchor; 9] = [
        Anchor::Center,
        Anchor::Top,
        Anchor::TopRight,
        Anchor::Right,
        Anchor::BottomRight,
        Anchor::Bottom,
        Anchor::BottomLeft,
        Anchor::Left,
        Anchor::TopLeft,
    ];

    /// Unit direction in image space (y down).
    pub fn direction(self) -> (f64, f64) {
        match self {
            Anchor::Center => (0.0, 0.0),
            Anchor::Top => (0.0, -1.0),
            Anchor::TopRight => (1.0, -1.0),
            Anchor::Right => (1.0, 0.0),
            Anchor::BottomRight => (1.0, 1.0),
            Anchor::Bottom => (0.0, 1.0),
            Anchor::BottomLeft => (-1.0, 1.0),
            Anchor::Left => (-1.0, 0.0),
            Anchor::TopLeft => (-1.0, -1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Anchor::Center => "center",
            Anchor::Top => "top",
            Anchor::TopRight => "top-right",
            Anchor::Right => "right",
            Anchor::BottomRight => "bottom-right",
            Anchor::Bottom => "bottom",
            Anchor::BottomLeft => "bottom-left",
            Anchor::Left => "left",
            Anchor::TopLeft => "top-left",
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Anchor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "above" | "n" | "north" => Ok(Anchor::Top),
            "below" | "s" | "south" => Ok(Anchor::Bottom),
            "ne" => Ok(Anchor::TopRight),
            "nw" => Ok(Anchor::TopLeft),
            "se" => Ok(Anchor::BottomRight),
            "sw" => Ok(Anchor::BottomLeft),
            "e" | "east" => Ok(Anchor::Right),
            "w" | "west" => Ok(Anchor::Left),
            "centroid" => Ok(Anchor::Center),
            _ => Anchor::ALL
                .into_iter()
                .find(|a| a.as_str() == s)
                .ok_or_else(|| format!("unknown anchor `{s}`")),
        }
    }
}

/// Centroid of the landmark's bounding box.
pub fn place_centroid(landmark: &Landmark) -> Point {
    landmark.bbox().centroid()
}

fn anchor_point(b: &BoundingBox, anchor: Anchor, offset_px: f64) -> Point {
    let c = b.centroid();
    let (dx, dy) = anchor.direction();
    let pick = |d: f64, lo: f64, mid: f64, hi: f64| match d {
        d if d < 0.0 => lo - offset_px,
        d if d > 0.0 => hi + offset_px,
        _ => mid,
    };
    Point::new(pick(dx, b.min().x, c.x, b.max().x), pick(dy, b.min().y, c.y, b.max().y))
}

/// Point `offset_px` outside the bounding box at the given compass position,
/// e.g. top-right is `(max.x + offset, min.y - offset)`.
pub fn place_anchor(landmark: &Landmark, anchor: Anchor, offset_px: f64) -> Point {
    anchor_point(&landmark.bbox(), anchor, offset_px)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealParams {
    /// Estimated label width per character of the landmark name.
    pub glyph_width_px: f64,
    pub label_height_px: f64,
    /// Gap between the landmark box and a compass-anchored label box.
    pub offset_px: f64,
    pub w_overlap: f64,
    pub w_distance: f64,
    pub initial_temperature: f64,
    pub cooling: f64,
    pub iterations_per_temperature: u32,
    pub min_temperature: f64,
    pub seed: u64,
}

impl Default for AnnealParams {
    fn default() -> Self {
        Self {
            glyph_width_px: 7.0,
            label_height_px: 12.0,
            offset_px: 8.0,
            w_overlap: 1.0,
            w_distance: 1.0,
            initial_temperature: 10.0,
            cooling: 0.95,
            iterations_per_temperature: 50,
            min_temperature: 0.01,
            seed: 0,
        }
    }
}

impl AnnealParams {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::InvalidParams(m.to_string()));
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return bad("cooling must be in (0, 1)");
        }
        if self.iterations_per_temperature == 0 {
            return bad("iterations_per_temperature must be >= 1");
        }
        if !(self.w_overlap >= 0.0 && self.w_distance >= 0.0) {
            return bad("weights must be >= 0");
        }
        if !(self.initial_temperature > 0.0 && self.min_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.glyph_width_px > 0.0 && self.label_height_px > 0.0 && self.offset_px >= 0.0) {
            return bad("label size must be positive and offset non-negative");
        }
        Ok(())
    }

    pub fn label_size(&self, name: &str) -> (f64, f64) {
        (self.glyph_width_px * name.chars().count() as f64, self.label_height_px)
    }

    /// Estimated label box for `landmark` centered on `center`.
    pub fn label_box(&self, landmark: &Landmark, center: Point) -> BoundingBox {
        let (w, h) = self.label_size(&landmark.name);
        BoundingBox::centered(center, w, h).expect("finite label geometry")
    }

    /// Label center for a candidate anchor: compass anchors put the whole
    /// label box outside the landmark box, `offset_px` away from it.
    pub fn candidate_center(&self, landmark: &Landmark, anchor: Anchor) -> Point {
        let p = place_anchor(landmark, anchor, self.offset_px);
        let (w, h) = self.label_size(&landmark.name);
        let (dx, dy) = anchor.direction();
        Point::new(p.x + dx * w / 2.0, p.y + dy * h / 2.0)
    }
}

fn cost_terms(landmarks: &[&Landmark], labels: &[BoundingBox], params: &AnnealParams) -> f64 {
    let lm_boxes: Vec<BoundingBox> = landmarks.iter().map(|l| l.bbox()).collect();
    let mut overlap = 0.0;
    let mut distance = 0.0;
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            overlap += labels[i].overlap_area(&labels[j]);
        }
        for (j, lb) in lm_boxes.iter().enumerate() {
            if j != i {
                overlap += labels[i].overlap_area(lb);
            }
        }
        distance += lm_boxes[i].gap(&labels[i]);
    }
    params.w_overlap * overlap + params.w_distance * distance
}

/// Weighted sum of pairwise label overlap, label-over-other-landmark overlap,
/// and each label's gap to its own landmark.
pub fn objective(
    map: &MapRecord,
    placements: &BTreeMap<String, Point>,
    params: &AnnealParams,
) -> Result<f64, BaselineError> {
    let landmarks: Vec<&Landmark> = map.landmarks.iter().collect();
    let labels = landmarks
        .iter()
        .map(|l| {
            placements
                .get(&l.id)
                .map(|p| params.label_box(l, *p))
                .ok_or_else(|| BaselineError::MissingPlacement(l.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cost_terms(&landmarks, &labels, params))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnealOutcome {
    pub placements: BTreeMap<String, Point>,
    pub anchors: BTreeMap<String, Anchor>,
    pub initial_cost: f64,
    pub best_cost: f64,
    /// Best-seen cost after each temperature step.
    pub best_trace: Vec<f64>,
}

/// Simulated annealing over the nine anchor candidates per landmark.
///
/// Starts with every label at its centroid candidate, proposes single-landmark
/// anchor changes, accepts them by the Metropolis rule, cools geometrically,
/// and returns the best configuration seen. Deterministic for a given seed.
pub fn place_annealed(map: &MapRecord, params: &AnnealParams) -> Result<AnnealOutcome, BaselineError> {
    params.validate()?;
    if map.landmarks.is_empty() {
        return Err(BaselineError::EmptyMap(map.id.clone()));
    }
    let mut landmarks: Vec<&Landmark> = map.landmarks.iter().collect();
    landmarks.sort_by(|a, b| a.id.cmp(&b.id));
    let candidates: Vec<Vec<BoundingBox>> = landmarks
        .iter()
        .map(|l| {
            Anchor::ALL
                .iter()
                .map(|a| params.label_box(l, params.candidate_center(l, *a)))
                .collect()
        })
        .collect();

    let n = landmarks.len();
    let mut state = vec![0usize; n];
    let labels_of = |s: &[usize]| -> Vec<BoundingBox> { s.iter().enumerate().map(|(i, &a)| candidates[i][a]).collect() };

    let mut current_cost = cost_terms(&landmarks, &labels_of(&state), params);
    let initial_cost = current_cost;
    let mut best_state = state.clone();
    let mut best_cost = current_cost;
    let mut best_trace = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut temperature = params.initial_temperature;
    while temperature >= params.min_temperature {
        for _ in 0..params.iterations_per_temperature {
            let i = rng.random_range(0..n);
            let shift = rng.random_range(1..Anchor::ALL.len());
            let previous = state[i];
            state[i] = (previous + shift) % Anchor::ALL.len();
            let proposed = cost_terms(&landmarks, &labels_of(&state), params);
            let delta = proposed - current_cost;
            let accept = delta <= 0.0 || rng.random::<f64>() < (-delta / temperature).exp();
            if accept {
                current_cost = proposed;
                if current_cost < best_cost {
                    best_cost = current_cost;
                    best_state.clone_from(&state);
                }
            } else {
                state[i] = previous;
            }
        }
        best_trace.push(best_cost);
        temperature *= params.cooling;
    }

    let mut placements = BTreeMap::new();
    let mut anchors = BTreeMap::new();
    for (i, l) in landmarks.iter().enumerate() {
        let anchor = Anchor::ALL[best_state[i]];
        placements.insert(l.id.clone(), params.candidate_center(l, anchor));
        anchors.insert(l.id.clone(), anchor);
    }
    Ok(AnnealOutcome {
        placements,
        anchors,
        initial_cost,
        best_cost,
        best_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LandmarkType, Polygon};

    fn lm(id: &str, name: &str, b: (f64, f64, f64, f64)) -> Landmark {
        Landmark {
            id: id.into(),
            name: name.into(),
            kind: LandmarkType::Shop,
            boundary: Polygon::new(vec![Point::new(b.0, b.1), Point::new(b.2, b.3)]).unwrap(),
            map_id: "m".into(),
        }
    }

    fn map(landmarks: Vec<Landmark>) -> MapRecord {
        MapRecord {
            id: "m".into(),
            city: "c".into(),
            image_width: 1000,
            image_height: 1000,
            labeled_image_path: "l.png".into(),
            unlabeled_image_path: "u.png".into(),
            landmarks,
        }
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(place_centroid(&lm("a", "x", (0., 0., 10., 10.))), Point::new(5., 5.));
        let point = Landmark {
            boundary: Polygon::new(vec![Point::new(3., 4.)]).unwrap(),
            ..lm("p", "x", (0., 0., 1., 1.))
        };
        assert_eq!(place_centroid(&point), Point::new(3., 4.));
        assert_eq!(place_centroid(&lm("r", "x", (100., 150., 250., 500.))), Point::new(175., 325.));
    }

    #[test]
    fn anchor_examples() {
        let l = lm("a", "x", (0., 0., 10., 10.));
        assert_eq!(place_anchor(&l, Anchor::TopRight, 8.0), Point::new(18., -8.));
        assert_eq!(place_anchor(&l, "above".parse().unwrap(), 8.0), Point::new(5., -8.));
        assert_eq!(place_anchor(&l, Anchor::TopRight, 0.0), Point::new(10., 0.));
    }

    #[test]
    fn objective_examples() {
        let params = AnnealParams::default();
        // "Oak" label is 21x12; centered 6px above a 10px box it touches the top edge.
        let single = map(vec![lm("a", "Oak", (0., 0., 10., 10.))]);
        let touching = BTreeMap::from([("a".to_string(), Point::new(5., -6.))]);
        assert_eq!(objective(&single, &touching, &params).unwrap(), 0.0);

        let two = map(vec![lm("a", "Oak", (0., 0., 1., 1.)), lm("b", "Elm", (900., 900., 901., 901.))]);
        let stacked = BTreeMap::from([
            ("a".to_string(), Point::new(500., 500.)),
            ("b".to_string(), Point::new(500., 500.)),
        ]);
        let p = AnnealParams { w_overlap: 2.0, w_distance: 0.0, ..params.clone() };
        assert_eq!(objective(&two, &stacked, &p).unwrap(), 2.0 * 21.0 * 12.0);

        let d1 = AnnealParams { w_overlap: 0.0, ..params.clone() };
        let d2 = AnnealParams { w_overlap: 0.0, w_distance: 2.0, ..params.clone() };
        let c1 = objective(&two, &stacked, &d1).unwrap();
        assert!(c1 > 0.0);
        assert_eq!(objective(&two, &stacked, &d2).unwrap(), 2.0 * c1);

        assert!(matches!(
            objective(&two, &BTreeMap::new(), &params),
            Err(BaselineError::MissingPlacement(_))
        ));
    }

    #[test]
    fn compass_candidates_sit_outside() {
        let params = AnnealParams::default();
        let l = lm("a", "Bakery", (100., 100., 140., 130.));
        for a in Anchor::ALL.into_iter().skip(1) {
            let b = params.label_box(&l, params.candidate_center(&l, a));
            assert_eq!(b.overlap_area(&l.bbox()), 0.0, "{a}");
        }
    }

    #[test]
    fn annealing_single_and_collision() {
        let params = AnnealParams::default();
        let single = map(vec![lm("a", "Oak", (0., 0., 10., 10.))]);
        let out = place_annealed(&single, &params).unwrap();
        assert!(out.best_cost <= out.initial_cost);

        // Two identical footprints: both centroid labels collide and cover each other's landmark.
        let pair = map(vec![lm("a", "Bakery", (100., 100., 150., 130.)), lm("b", "Bistro", (100., 100., 150., 130.))]);
        let out = place_annealed(&pair, &params).unwrap();
        assert!(out.best_cost < out.initial_cost);
        assert!(out.best_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out, place_annealed(&pair, &params).unwrap());
    }

    #[test]
    fn annealing_errors() {
        assert!(matches!(place_annealed(&map(vec![]), &AnnealParams::default()), Err(BaselineError::EmptyMap(_))));
        let bad = AnnealParams { cooling: 1.0, ..AnnealParams::default() };
        assert!(place_annealed(&map(vec![lm("a", "x", (0., 0., 1., 1.))]), &bad).is_err());
    }

    #[test]
    fn objective_is_relabeling_invariant() {
        let params = AnnealParams::default();
        let a = map(vec![lm("a", "Oak", (0., 0., 30., 30.)), lm("b", "Elm Street Deli", (20., 20., 60., 50.))]);
        let b = map(vec![lm("z", "Oak", (0., 0., 30., 30.)), lm("y", "Elm Street Deli", (20., 20., 60., 50.))]);
        let pa = BTreeMap::from([("a".to_string(), Point::new(10., 10.)), ("b".to_string(), Point::new(30., 30.))]);
        let pb = BTreeMap::from([("z".to_string(), Point::new(10., 10.)), ("y".to_string(), Point::new(30., 30.))]);
        assert_eq!(objective(&a, &pa, &params).unwrap(), objective(&b, &pb, &params).unwrap());
    }
}
