//! Pixel-space geometry and the dataset object model.
//!
//! All coordinates live in image pixel space: origin at the top-left corner,
//! `x` grows rightward and `y` grows downward. Every type here is an immutable
//! value object.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty input: at least one element is required")]
    EmptyInput,
    #[error("non-finite coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("inverted box: min ({0}, {1}) exceeds max ({2}, {3})")]
    Inverted(f64, f64, f64, f64),
}

/// A pixel position. Serialized as an `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Rounds both coordinates to the nearest integer (half away from zero).
    pub fn rounded(&self) -> (i64, i64) {
        (self.x.round() as i64, self.y.round() as i64)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Deserialize)]
struct RawBox {
    min: Point,
    max: Point,
}

/// Axis-aligned box with `min.x <= max.x` and `min.y <= max.y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    min: Point,
    max: Point,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.min, raw.max)
    }
}

impl BoundingBox {
    pub fn new(min: Point, max: Point) -> Result<Self, GeometryError> {
        for p in [min, max] {
            if !p.is_finite() {
                return Err(GeometryError::NonFinite(p.x, p.y));
            }
        }
        if min.x > max.x || min.y > max.y {
            return Err(GeometryError::Inverted(min.x, min.y, max.x, max.y));
        }
        Ok(Self { min, max })
    }

    /// Builds a box from `(min_x, min_y, max_x, max_y)`.
    ///
    /// # Panics
    /// Panics on inverted or non-finite input; use [`BoundingBox::new`] for
    /// untrusted data.
    pub fn from_coords(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self::new(Point::new(min_x, min_y), Point::new(max_x, max_y))
            .expect("invalid bounding box coordinates")
    }

    /// Box spanning two arbitrary corners.
    pub fn spanning(a: Point, b: Point) -> Result<Self, GeometryError> {
        Self::new(
            Point::new(a.x.min(b.x), a.y.min(b.y)),
            Point::new(a.x.max(b.x), a.y.max(b.y)),
        )
    }

    /// Box of the given size centered on `center`.
    pub fn centered(center: Point, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::spanning(
            Point::new(center.x - width / 2.0, center.y - height / 2.0),
            Point::new(center.x + width / 2.0, center.y + height / 2.0),
        )
    }

    pub fn min(&self) -> Point {
        self.min
    }

    pub fn max(&self) -> Point {
        self.max
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn centroid(&self) -> Point {
        Point::new(
            (self.min.x + self.max.x) / 2.0,
            (self.min.y + self.max.y) / 2.0,
        )
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.contains_point(other.min) && self.contains_point(other.max)
    }

    /// Closed-set intersection test; touching edges count.
    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min: Point::new(self.min.x.min(other.min.x), self.min.y.min(other.min.y)),
            max: Point::new(self.max.x.max(other.max.x), self.max.y.max(other.max.y)),
        }
    }

    /// Grows the box by `margin` on every side.
    pub fn expanded(&self, margin: f64) -> BoundingBox {
        BoundingBox {
            min: Point::new(self.min.x - margin, self.min.y - margin),
            max: Point::new(self.max.x + margin, self.max.y + margin),
        }
    }

    /// Area of the intersection, zero for disjoint or merely touching boxes.
    pub fn overlap_area(&self, other: &BoundingBox) -> f64 {
        let w = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let h = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Minimum Euclidean gap between the two boxes; zero when they intersect.
    pub fn gap(&self, other: &BoundingBox) -> f64 {
        let dx = (other.min.x - self.max.x).max(self.min.x - other.max.x).max(0.0);
        let dy = (other.min.y - self.max.y).max(self.min.y - other.max.y).max(0.0);
        dx.hypot(dy)
    }
}

impl From<Point> for BoundingBox {
    fn from(p: Point) -> Self {
        BoundingBox { min: p, max: p }
    }
}

impl From<&Polygon> for BoundingBox {
    fn from(poly: &Polygon) -> Self {
        poly.bbox()
    }
}

impl From<&BoundingBox> for BoundingBox {
    fn from(b: &BoundingBox) -> Self {
        *b
    }
}

/// Minimal axis-aligned box containing every input box.
pub fn bbox_union(boxes: &[BoundingBox]) -> Result<BoundingBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyInput)?;
    Ok(rest.iter().fold(*first, |acc, b| acc.union(b)))
}

/// Distance between a landmark shape and a query shape, measured between
/// their bounding boxes. Points and polygons convert to their boxes.
pub fn boundary_distance<A, B>(landmark: A, query: B) -> f64
where
    A: Into<BoundingBox>,
    B: Into<BoundingBox>,
{
    landmark.into().gap(&query.into())
}

/// Landmark boundary. Closed implicitly; a single vertex is a point feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::EmptyInput);
        }
        if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(p.x, p.y));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn bbox(&self) -> BoundingBox {
        let first = self.vertices[0];
        self.vertices
            .iter()
            .skip(1)
            .fold(BoundingBox::from(first), |acc, p| acc.union(&BoundingBox::from(*p)))
    }
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = GeometryError;

    fn try_from(vertices: Vec<Point>) -> Result<Self, Self::Error> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

/// Landmark category. Declaration order is the canonical reporting order and
/// the precedence order used when a feature carries several category tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkType {
    Tourism,
    Shop,
    Amenity,
    Leisure,
    Office,
    Building,
    Place,
}

impl LandmarkType {
    pub const ALL: [LandmarkType; 7] = [
        LandmarkType::Tourism,
        LandmarkType::Shop,
        LandmarkType::Amenity,
        LandmarkType::Leisure,
        LandmarkType::Office,
        LandmarkType::Building,
        LandmarkType::Place,
    ];

    /// Lowercase key, identical to the OpenStreetMap tag key.
    pub fn key(self) -> &'static str {
        match self {
            LandmarkType::Tourism => "tourism",
            LandmarkType::Shop => "shop",
            LandmarkType::Amenity => "amenity",
            LandmarkType::Leisure => "leisure",
            LandmarkType::Office => "office",
            LandmarkType::Building => "building",
            LandmarkType::Place => "place",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            LandmarkType::Tourism => "Tourism",
            LandmarkType::Shop => "Shop",
            LandmarkType::Amenity => "Amenity",
            LandmarkType::Leisure => "Leisure",
            LandmarkType::Office => "Office",
            LandmarkType::Building => "Building",
            LandmarkType::Place => "Place",
        }
    }
}

impl fmt::Display for LandmarkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

impl FromStr for LandmarkType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LandmarkType::ALL
            .into_iter()
            .find(|t| t.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown landmark type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub name: String,
    pub kind: LandmarkType,
    pub boundary: Polygon,
    pub map_id: String,
}

impl Landmark {
    pub fn bbox(&self) -> BoundingBox {
        self.boundary.bbox()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub id: String,
    pub city: String,
    pub image_width: u32,
    pub image_height: u32,
    pub labeled_image_path: String,
    pub unlabeled_image_path: String,
    pub landmarks: Vec<Landmark>,
}

impl MapRecord {
    pub fn image_bounds(&self) -> BoundingBox {
        BoundingBox::from_coords(0.0, 0.0, self.image_width as f64, self.image_height as f64)
    }

    pub fn landmark(&self, id: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }
}

/// One recognized word from the text detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedText {
    pub map_id: String,
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedWord {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Ground-truth label location: the union of the words assigned to a landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub landmark_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub matched_words: Vec<MatchedWord>,
}

impl GroundTruthLabel {
    pub fn centroid(&self) -> Point {
        self.bbox.centroid()
    }
}

/// Textual encoding of a landmark location inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoordFormat {
    List,
    #[serde(rename = "CSS")]
    Css,
    #[serde(rename = "JSON")]
    Json,
    #[serde(rename = "XML")]
    Xml,
}

impl CoordFormat {
    pub const ALL: [CoordFormat; 4] = [
        CoordFormat::List,
        CoordFormat::Css,
        CoordFormat::Json,
        CoordFormat::Xml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CoordFormat::List => "List",
            CoordFormat::Css => "CSS",
            CoordFormat::Json => "JSON",
            CoordFormat::Xml => "XML",
        }
    }
}

impl fmt::Display for CoordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CoordFormat::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown coordinate format `{s}` (expected list, css, json or xml)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMethod {
    Llm,
    Centroid,
    Anchor,
    Annealed,
}

impl PlacementMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PlacementMethod::Llm => "llm",
            PlacementMethod::Centroid => "centroid",
            PlacementMethod::Anchor => "anchor",
            PlacementMethod::Annealed => "annealed",
        }
    }
}

impl fmt::Display for PlacementMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(PlacementMethod::Llm),
            "centroid" => Ok(PlacementMethod::Centroid),
            "anchor" => Ok(PlacementMethod::Anchor),
            "annealed" => Ok(PlacementMethod::Annealed),
            _ => Err(format!("unknown placement method `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    /// Short machine-readable category, e.g. `parse`, `transport`, `retrieval`.
    pub kind: String,
    pub message: String,
}

/// One predicted label point, or the reason no point was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub landmark_id: String,
    pub predicted: Option<Point>,
    pub method: PlacementMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coord_format: Option<CoordFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<FailureRecord>,
}

impl PlacementResult {
    /// Result for a non-LLM method that always produces a point.
    pub fn placed(landmark_id: impl Into<String>, method: PlacementMethod, point: Point) -> Self {
        Self {
            landmark_id: landmark_id.into(),
            predicted: Some(point),
            method,
            coord_format: None,
            raw_output: None,
            attempts: 1,
            error: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.predicted.is_some()
    }
}

/// A loaded dataset: maps with their landmarks, detected words and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub cities: Vec<String>,
    pub maps: Vec<MapRecord>,
    pub texts: Vec<DetectedText>,
    pub labels: Vec<GroundTruthLabel>,
}

/// Summary counts. Per-type and per-city totals are both reported because
/// they need not agree with each other on real corpora.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub maps: usize,
    pub landmarks: usize,
    pub labels: usize,
    pub detected_texts: usize,
    pub by_type: BTreeMap<LandmarkType, usize>,
    pub by_city: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.maps.iter().flat_map(|m| m.landmarks.iter())
    }

    pub fn landmark_index(&self) -> HashMap<&str, (&MapRecord, &Landmark)> {
        self.maps
            .iter()
            .flat_map(|m| m.landmarks.iter().map(move |l| (l.id.as_str(), (m, l))))
            .collect()
    }

    pub fn label_index(&self) -> HashMap<&str, &GroundTruthLabel> {
        self.labels.iter().map(|l| (l.landmark_id.as_str(), l)).collect()
    }

    pub fn map(&self, id: &str) -> Option<&MapRecord> {
        self.maps.iter().find(|m| m.id == id)
    }

    pub fn texts_for_map<'a>(&'a self, map_id: &'a str) -> impl Iterator<Item = &'a DetectedText> + 'a {
        self.texts.iter().filter(move |t| t.map_id == map_id)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut by_type = BTreeMap::new();
        let mut by_city = BTreeMap::new();
        for map in &self.maps {
            *by_city.entry(map.city.clone()).or_insert(0) += map.landmarks.len();
            for l in &map.landmarks {
                *by_type.entry(l.kind).or_insert(0) += 1;
            }
        }
        DatasetStats {
            maps: self.maps.len(),
            landmarks: self.landmarks().count(),
            labels: self.labels.len(),
            detected_texts: self.texts.len(),
            by_type,
            by_city,
        }
    }
}
