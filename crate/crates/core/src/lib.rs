//! Automatic label placement on maps.
//!
//! The crate covers the whole workbench: dataset ingestion from an Overpass
//! API, ground-truth label derivation from detected map text, guideline
//! retrieval, prompt construction for an LLM endpoint, classical baselines,
//! evaluation, and SVG snapshots.

pub mod baselines;
pub mod eval;
pub mod groundtruth;
pub mod guidelines;
pub mod ingest;
pub mod llm;
pub mod model;
pub mod prompting;
pub mod render;

pub use model::{
    bbox_union, boundary_distance, BoundingBox, CoordFormat, Dataset, DatasetStats, DetectedText,
    FailureRecord, GeometryError, GroundTruthLabel, Landmark, LandmarkType, MapRecord, MatchedWord,
    PlacementMethod, PlacementResult, Point, Polygon,
};
