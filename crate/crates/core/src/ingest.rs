//! Landmark acquisition from an Overpass-compatible API, projection into
//! map-image pixel space, and the on-disk dataset layout.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json                     {"name": .., "cities": [..]}
//! maps/<id>/map.json                MapRecord (landmarks inline)
//! maps/<id>/labeled.png             referenced, not read
//! maps/<id>/unlabeled.png           referenced, not read
//! maps/<id>/detected_text.jsonl     one DetectedText per line (optional)
//! maps/<id>/ground_truth.json       list of GroundTruthLabel (optional)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    bbox_union, Dataset, DetectedText, GroundTruthLabel, Landmark, LandmarkType, MapRecord, Point,
    Polygon,
};

/// Latitude limit of the square Web Mercator world.
pub const MERCATOR_MAX_LAT: f64 = 85.051129;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPS_DIR: &str = "maps";
pub const MAP_FILE: &str = "map.json";
pub const TEXT_FILE: &str = "detected_text.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("latitude {0} is outside the Web Mercator domain (|lat| < {MERCATOR_MAX_LAT})")]
    OutsideMercator(f64),
    #[error("image dimensions must be positive, got {0}x{1}")]
    InvalidImageSize(u32, u32),
    #[error("feature {0} carries none of the landmark keys")]
    Unclassifiable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by map API (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("map API returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed map API response: {0}")]
    MalformedResponse(String),
    #[error("{}: I/O error: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: missing required file", .0.display())]
    MissingFile(PathBuf),
    #[error("{}{}: {message}", path.display(), locus_suffix(locus))]
    Schema {
        path: PathBuf,
        locus: Option<String>,
        message: String,
    },
    #[error("{}{}: dangling reference: {message}", path.display(), locus_suffix(locus))]
    DanglingReference {
        path: PathBuf,
        locus: Option<String>,
        message: String,
    },
}

fn locus_suffix(locus: &Option<String>) -> String {
    locus.as_ref().map(|l| format!(" ({l})")).unwrap_or_default()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, locus: impl Into<Option<String>>, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        path: path.to_path_buf(),
        locus: locus.into(),
        message: message.into(),
    }
}

fn dangling(path: &Path, locus: impl Into<Option<String>>, message: impl Into<String>) -> IngestError {
    IngestError::DanglingReference {
        path: path.to_path_buf(),
        locus: locus.into(),
        message: message.into(),
    }
}

/// WGS84 query rectangle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl GeoBBox {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Result<Self, IngestError> {
        let all = [south, west, north, east];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::InvalidRegion("non-finite coordinate".into()));
        }
        if !(-90.0..=90.0).contains(&south) || !(-90.0..=90.0).contains(&north) {
            return Err(IngestError::InvalidRegion("latitude outside [-90, 90]".into()));
        }
        if !(-180.0..=180.0).contains(&west) || !(-180.0..=180.0).contains(&east) {
            return Err(IngestError::InvalidRegion("longitude outside [-180, 180]".into()));
        }
        if south >= north {
            return Err(IngestError::InvalidRegion(format!("south {south} >= north {north}")));
        }
        if west >= east {
            return Err(IngestError::InvalidRegion(format!("west {west} >= east {east}")));
        }
        Ok(Self {
            south,
            west,
            north,
            east,
        })
    }

    /// Parses `south,west,north,east`.
    pub fn parse(s: &str) -> Result<Self, IngestError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IngestError::InvalidRegion(format!("`{s}`: {e}")))?;
        match parts.as_slice() {
            &[s, w, n, e] => GeoBBox::new(s, w, n, e),
            _ => Err(IngestError::InvalidRegion(format!(
                "`{s}`: expected four comma-separated values south,west,north,east"
            ))),
        }
    }
}

/// A named OSM element as returned by the map API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeature {
    /// `type/id`, e.g. `way/123456`.
    pub source_id: String,
    pub name: Option<String>,
    pub tags: BTreeMap<String, String>,
    /// `(lon, lat)` pairs in degrees.
    pub geometry: Vec<(f64, f64)>,
}

/// Picks the landmark type, honoring the canonical type order when several
/// category keys are present.
pub fn classify(feature: &RawFeature) -> Result<LandmarkType, IngestError> {
    LandmarkType::ALL
        .into_iter()
        .find(|t| feature.tags.contains_key(t.key()))
        .ok_or_else(|| IngestError::Unclassifiable(feature.source_id.clone()))
}

fn mercator_y(lat: f64) -> Result<f64, IngestError> {
    if lat.abs() >= MERCATOR_MAX_LAT || !lat.is_finite() {
        return Err(IngestError::OutsideMercator(lat));
    }
    let phi = lat.to_radians();
    Ok((std::f64::consts::FRAC_PI_4 + phi / 2.0).tan().ln())
}

/// Projects `(lon, lat)` vertices with Web Mercator and maps the region
/// affinely onto the image: north-west corner to `(0, 0)`, south-east corner
/// to `(width, height)`. Results are clamped to the image.
pub fn project_to_pixels(
    geometry: &[(f64, f64)],
    region: &GeoBBox,
    image_width: u32,
    image_height: u32,
) -> Result<Polygon, IngestError> {
    if image_width == 0 || image_height == 0 {
        return Err(IngestError::InvalidImageSize(image_width, image_height));
    }
    let (w, h) = (image_width as f64, image_height as f64);
    let y_north = mercator_y(region.north)?;
    let y_south = mercator_y(region.south)?;
    let (x_west, x_east) = (region.west.to_radians(), region.east.to_radians());

    let vertices = geometry
        .iter()
        .map(|&(lon, lat)| {
            let my = mercator_y(lat)?;
            let px = (lon.to_radians() - x_west) / (x_east - x_west) * w;
            let py = (y_north - my) / (y_north - y_south) * h;
            Ok(Point::new(px.clamp(0.0, w), py.clamp(0.0, h)))
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    Polygon::new(vertices).map_err(|e| IngestError::MalformedResponse(e.to_string()))
}

/// Overpass QL selecting named elements with any landmark key inside `region`.
pub fn overpass_query(region: &GeoBBox) -> String {
    let bbox = format!("{},{},{},{}", region.south, region.west, region.north, region.east);
    let mut q = String::from("[out:json][timeout:60];\n(\n");
    for t in LandmarkType::ALL {
        q.push_str(&format!("  nwr[\"{}\"][\"name\"]({bbox});\n", t.key()));
    }
    q.push_str(");\nout geom;\n");
    q
}

#[derive(Deserialize)]
struct OverpassResponse {
    elements: Vec<OverpassElement>,
}

#[derive(Deserialize)]
struct LatLon {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct OverpassBounds {
    minlat: f64,
    minlon: f64,
    maxlat: f64,
    maxlon: f64,
}

#[derive(Deserialize)]
struct OverpassMember {
    #[serde(default)]
    role: String,
    #[serde(default)]
    geometry: Vec<Option<LatLon>>,
}

#[derive(Deserialize)]
struct OverpassElement {
    #[serde(rename = "type")]
    kind: String,
    id: u64,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    lat: Option<f64>,
    lon: Option<f64>,
    #[serde(default)]
    geometry: Vec<Option<LatLon>>,
    #[serde(default)]
    members: Vec<OverpassMember>,
    bounds: Option<OverpassBounds>,
}

impl OverpassElement {
    fn lon_lat(&self) -> Vec<(f64, f64)> {
        if let (Some(lat), Some(lon)) = (self.lat, self.lon) {
            return vec![(lon, lat)];
        }
        let flatten = |g: &[Option<LatLon>]| -> Vec<(f64, f64)> {
            g.iter().flatten().map(|p| (p.lon, p.lat)).collect()
        };
        let own = flatten(&self.geometry);
        if !own.is_empty() {
            return own;
        }
        let outer: Vec<(f64, f64)> = self
            .members
            .iter()
            .filter(|m| m.role == "outer")
            .flat_map(|m| flatten(&m.geometry))
            .collect();
        if !outer.is_empty() {
            return outer;
        }
        match &self.bounds {
            Some(b) => vec![
                (b.minlon, b.maxlat),
                (b.maxlon, b.maxlat),
                (b.maxlon, b.minlat),
                (b.minlon, b.minlat),
            ],
            None => Vec::new(),
        }
    }
}

/// Parses an Overpass JSON body, keeping only named elements that carry a
/// landmark key and have geometry.
pub fn parse_overpass_response(body: &str) -> Result<Vec<RawFeature>, IngestError> {
    let response: OverpassResponse =
        serde_json::from_str(body).map_err(|e| IngestError::MalformedResponse(e.to_string()))?;
    let mut features = Vec::new();
    for el in response.elements {
        let name = el.tags.get("name").map(|n| n.trim().to_string()).filter(|n| !n.is_empty());
        if name.is_none() {
            continue;
        }
        if !LandmarkType::ALL.iter().any(|t| el.tags.contains_key(t.key())) {
            continue;
        }
        let geometry = el.lon_lat();
        if geometry.is_empty() {
            log::warn!("skipping {}/{}: no geometry", el.kind, el.id);
            continue;
        }
        features.push(RawFeature {
            source_id: format!("{}/{}", el.kind, el.id),
            name,
            tags: el.tags,
            geometry,
        });
    }
    Ok(features)
}

/// Blocking Overpass client. Clones share one politeness gate, so concurrent
/// region fetches are globally spaced by `min_interval`.
#[derive(Clone)]
pub struct OverpassClient {
    endpoint: String,
    http: reqwest::blocking::Client,
    min_interval: Duration,
    last_request: Arc<Mutex<Option<Instant>>>,
}

impl OverpassClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://overpass-api.de/api/interpreter";

    pub fn new(endpoint: impl Into<String>, timeout: Duration, min_interval: Duration) -> Result<Self, IngestError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("maplabel/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| IngestError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            http,
            min_interval,
            last_request: Arc::new(Mutex::new(None)),
        })
    }

    fn wait_turn(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// Fetches named landmark features inside `region`.
    pub fn fetch_landmarks(&self, region: &GeoBBox) -> Result<Vec<RawFeature>, IngestError> {
        self.wait_turn();
        let response = self
            .http
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "text/plain; charset=utf-8")
            .body(overpass_query(region))
            .send()
            .map_err(|e| IngestError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(IngestError::RateLimited { retry_after });
        }
        let body = response.text().map_err(|e| IngestError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(IngestError::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        parse_overpass_response(&body)
    }
}

/// Builds a map record from fetched features. Unclassifiable or unnamed
/// features are skipped.
pub fn build_map_record(
    map_id: &str,
    city: &str,
    region: &GeoBBox,
    image_width: u32,
    image_height: u32,
    features: &[RawFeature],
) -> Result<MapRecord, IngestError> {
    let mut landmarks = Vec::with_capacity(features.len());
    let mut seen = HashSet::new();
    for f in features {
        let Some(name) = f.name.clone() else { continue };
        let Ok(kind) = classify(f) else {
            log::warn!("skipping unclassifiable feature {}", f.source_id);
            continue;
        };
        let id = format!("{map_id}-{}", f.source_id.replace('/', "-"));
        if !seen.insert(id.clone()) {
            continue;
        }
        landmarks.push(Landmark {
            id,
            name,
            kind,
            boundary: project_to_pixels(&f.geometry, region, image_width, image_height)?,
            map_id: map_id.to_string(),
        });
    }
    landmarks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MapRecord {
        id: map_id.to_string(),
        city: city.to_string(),
        image_width,
        image_height,
        labeled_image_path: "labeled.png".into(),
        unlabeled_image_path: "unlabeled.png".into(),
        landmarks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(default)]
    pub cities: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| schema(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IngestError> {
    let mut text = serde_json::to_string_pretty(value).expect("dataset types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Map directory for `map_id` under a dataset root.
pub fn map_dir(root: &Path, map_id: &str) -> PathBuf {
    root.join(MAPS_DIR).join(map_id)
}

/// Loads and validates a dataset, enforcing referential integrity.
pub fn load_dataset(root: &Path) -> Result<Dataset, IngestError> {
    let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    let maps_root = root.join(MAPS_DIR);
    let mut map_dirs = Vec::new();
    if maps_root.exists() {
        for entry in fs::read_dir(&maps_root).map_err(io_err(&maps_root))? {
            let entry = entry.map_err(io_err(&maps_root))?;
            if entry.file_type().map_err(io_err(&entry.path()))?.is_dir() {
                map_dirs.push(entry.path());
            }
        }
    }
    map_dirs.sort();

    let mut dataset = Dataset {
        name: manifest.name,
        cities: manifest.cities,
        ..Dataset::default()
    };
    let mut landmark_ids: HashSet<String> = HashSet::new();

    for dir in map_dirs {
        let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let map_path = dir.join(MAP_FILE);
        let map: MapRecord = read_json(&map_path)?;
        validate_map(&map, &dir_name, &map_path, &mut landmark_ids)?;

        let text_path = dir.join(TEXT_FILE);
        if text_path.exists() {
            let file = fs::File::open(&text_path).map_err(io_err(&text_path))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&text_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let locus = format!("line {}", idx + 1);
                let text: DetectedText = serde_json::from_str(&line)
                    .map_err(|e| schema(&text_path, locus.clone(), e.to_string()))?;
                validate_text(&text, &map, &text_path, &locus)?;
                dataset.texts.push(text);
            }
        }

        let gt_path = dir.join(GROUND_TRUTH_FILE);
        if gt_path.exists() {
            let labels: Vec<GroundTruthLabel> = read_json(&gt_path)?;
            let mut seen = HashSet::new();
            for (idx, label) in labels.into_iter().enumerate() {
                let locus = format!("label #{idx} ({})", label.landmark_id);
                if map.landmark(&label.landmark_id).is_none() {
                    return Err(dangling(
                        &gt_path,
                        locus,
                        format!("landmark `{}` is not on map `{}`", label.landmark_id, map.id),
                    ));
                }
                if !seen.insert(label.landmark_id.clone()) {
                    return Err(schema(&gt_path, locus, "duplicate label for landmark"));
                }
                if label.matched_words.is_empty() {
                    return Err(schema(&gt_path, locus, "matched_words is empty"));
                }
                let boxes: Vec<_> = label.matched_words.iter().map(|w| w.bbox).collect();
                if bbox_union(&boxes).ok() != Some(label.bbox) {
                    return Err(schema(&gt_path, locus, "box is not the union of matched word boxes"));
                }
                dataset.labels.push(label);
            }
        }
        dataset.maps.push(map);
    }
    Ok(dataset)
}

fn validate_map(
    map: &MapRecord,
    dir_name: &str,
    path: &Path,
    landmark_ids: &mut HashSet<String>,
) -> Result<(), IngestError> {
    if map.id != dir_name {
        return Err(schema(path, None, format!("map id `{}` does not match directory `{dir_name}`", map.id)));
    }
    if map.image_width == 0 || map.image_height == 0 {
        return Err(schema(path, None, "image dimensions must be positive"));
    }
    if map.labeled_image_path.trim().is_empty() || map.unlabeled_image_path.trim().is_empty() {
        return Err(schema(path, None, "both labeled and unlabeled image paths are required"));
    }
    let bounds = map.image_bounds();
    for (idx, lm) in map.landmarks.iter().enumerate() {
        let locus = format!("landmark #{idx} ({})", lm.id);
        if lm.id.is_empty() {
            return Err(schema(path, locus, "empty landmark id"));
        }
        if lm.name.trim().is_empty() {
            return Err(schema(path, locus, "empty landmark name"));
        }
        if lm.map_id != map.id {
            return Err(dangling(path, locus, format!("landmark references map `{}`", lm.map_id)));
        }
        if !lm.boundary.vertices().iter().all(|p| bounds.contains_point(*p)) {
            return Err(schema(path, locus, "boundary vertex outside image bounds"));
        }
        if !landmark_ids.insert(lm.id.clone()) {
            return Err(schema(path, locus, "duplicate landmark id in dataset"));
        }
    }
    Ok(())
}

fn validate_text(text: &DetectedText, map: &MapRecord, path: &Path, locus: &str) -> Result<(), IngestError> {
    if text.map_id != map.id {
        return Err(dangling(path, locus.to_string(), format!("text references map `{}`", text.map_id)));
    }
    if text.text.trim().is_empty() {
        return Err(schema(path, locus.to_string(), "empty text"));
    }
    if !(0.0..=1.0).contains(&text.confidence) {
        return Err(schema(path, locus.to_string(), format!("confidence {} outside [0, 1]", text.confidence)));
    }
    if !map.image_bounds().contains_box(&text.bbox) {
        return Err(schema(path, locus.to_string(), "text box outside image bounds"));
    }
    Ok(())
}

/// Puts a dataset into the order `load_dataset` produces: maps and landmarks
/// sorted by id, texts grouped by map in their original relative order, labels
/// grouped by map and sorted by landmark id.
pub fn canonicalize(dataset: &mut Dataset) {
    dataset.maps.sort_by(|a, b| a.id.cmp(&b.id));
    for map in &mut dataset.maps {
        map.landmarks.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let rank: HashMap<String, usize> =
        dataset.maps.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
    let owner: HashMap<String, usize> = dataset
        .maps
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.landmarks.iter().map(move |l| (l.id.clone(), i)))
        .collect();
    dataset
        .texts
        .sort_by_key(|t| rank.get(&t.map_id).copied().unwrap_or(usize::MAX));
    dataset.labels.sort_by(|a, b| {
        let ka = owner.get(&a.landmark_id).copied().unwrap_or(usize::MAX);
        let kb = owner.get(&b.landmark_id).copied().unwrap_or(usize::MAX);
        ka.cmp(&kb).then_with(|| a.landmark_id.cmp(&b.landmark_id))
    });
}

/// Writes a dataset in canonical order.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), IngestError> {
    let mut canonical = dataset.clone();
    canonicalize(&mut canonical);

    fs::create_dir_all(root).map_err(io_err(root))?;
    write_json(
        &root.join(MANIFEST_FILE),
        &Manifest {
            name: canonical.name.clone(),
            cities: canonical.cities.clone(),
        },
    )?;
    for map in &canonical.maps {
        let dir = map_dir(root, &map.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_json(&dir.join(MAP_FILE), map)?;

        let text_path = dir.join(TEXT_FILE);
        let file = fs::File::create(&text_path).map_err(io_err(&text_path))?;
        let mut out = BufWriter::new(file);
        for t in canonical.texts.iter().filter(|t| t.map_id == map.id) {
            let line = serde_json::to_string(t).expect("dataset types serialize");
            writeln!(out, "{line}").map_err(io_err(&text_path))?;
        }
        out.flush().map_err(io_err(&text_path))?;

        let labels: Vec<&GroundTruthLabel> = canonical
            .labels
            .iter()
            .filter(|l| map.landmark(&l.landmark_id).is_some())
            .collect();
        write_ground_truth(root, &map.id, &labels)?;
    }
    Ok(())
}

/// Writes one map's `ground_truth.json`, sorted by landmark id.
pub fn write_ground_truth(root: &Path, map_id: &str, labels: &[&GroundTruthLabel]) -> Result<(), IngestError> {
    let mut sorted: Vec<&GroundTruthLabel> = labels.to_vec();
    sorted.sort_by(|a, b| a.landmark_id.cmp(&b.landmark_id));
    let dir = map_dir(root, map_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(&dir.join(GROUND_TRUTH_FILE), &sorted)
}
