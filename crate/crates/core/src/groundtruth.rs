//! Derives ground-truth label boxes from detected map text.
//!
//! Words near a landmark whose text fuzzily matches a token of the landmark's
//! name are assigned to that landmark (each word to at most one landmark), and
//! the label box is the union of the assigned word boxes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    bbox_union, boundary_distance, Dataset, DetectedText, GroundTruthLabel, Landmark, MapRecord,
    MatchedWord,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtParams {
    /// Maximum gap in pixels between a word box and the landmark's box.
    pub proximity_px: f64,
    /// Minimum normalized similarity `1 - lev / max_len` for a match.
    pub similarity_threshold: f64,
    pub case_sensitive: bool,
}

impl Default for GtParams {
    fn default() -> Self {
        Self {
            proximity_px: 50.0,
            similarity_threshold: 0.80,
            case_sensitive: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GtError {
    #[error("proximity_px must be finite and >= 0, got {0}")]
    InvalidProximity(f64),
    #[error("similarity_threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("coverage is undefined: {0}")]
    UndefinedCoverage(&'static str),
}

impl GtParams {
    pub fn validate(&self) -> Result<(), GtError> {
        if !(self.proximity_px.is_finite() && self.proximity_px >= 0.0) {
            return Err(GtError::InvalidProximity(self.proximity_px));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(GtError::InvalidThreshold(self.similarity_threshold));
        }
        Ok(())
    }
}

/// Edit distance over Unicode scalar values (insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)`; two empty strings are identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// Strips punctuation and symbols, and case-folds unless `case_sensitive`.
pub fn normalize(s: &str, case_sensitive: bool) -> String {
    let kept: String = s.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    if case_sensitive {
        kept
    } else {
        kept.to_lowercase()
    }
}

/// Whitespace-split, normalized, non-empty name tokens.
pub fn name_tokens(name: &str, case_sensitive: bool) -> Vec<String> {
    name.split_whitespace()
        .map(|t| normalize(t, case_sensitive))
        .filter(|t| !t.is_empty())
        .collect()
}

/// True when `word` is within the similarity threshold of some name token.
pub fn fuzzy_match(word: &str, landmark_name: &str, params: &GtParams) -> bool {
    let word: String = normalize(word, params.case_sensitive).split_whitespace().collect();
    if word.is_empty() {
        return false;
    }
    name_tokens(landmark_name, params.case_sensitive)
        .iter()
        .any(|t| similarity(&word, t) >= params.similarity_threshold)
}

/// Texts within `proximity_px` of the landmark's bounding box, in input order.
pub fn candidate_texts<'a>(
    landmark: &Landmark,
    texts: &'a [DetectedText],
    params: &GtParams,
) -> Vec<&'a DetectedText> {
    let lm_box = landmark.bbox();
    texts
        .iter()
        .filter(|t| boundary_distance(lm_box, t.bbox) <= params.proximity_px)
        .collect()
}

/// Assigns each text to at most one landmark: among the landmarks it is close
/// to and matches, the nearest wins, ties going to the smaller landmark id.
///
/// Texts belonging to other maps are ignored. Landmarks without any assigned
/// text do not appear in the result.
pub fn assign_texts<'a>(
    map: &MapRecord,
    texts: &'a [DetectedText],
    params: &GtParams,
) -> BTreeMap<String, Vec<&'a DetectedText>> {
    let boxes: Vec<_> = map.landmarks.iter().map(|l| (l, l.bbox())).collect();
    let mut out: BTreeMap<String, Vec<&DetectedText>> = BTreeMap::new();
    for text in texts.iter().filter(|t| t.map_id == map.id) {
        let best = boxes
            .iter()
            .filter_map(|(lm, b)| {
                let d = boundary_distance(*b, text.bbox);
                (d <= params.proximity_px && fuzzy_match(&text.text, &lm.name, params)).then_some((d, *lm))
            })
            .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)));
        if let Some((_, lm)) = best {
            out.entry(lm.id.clone()).or_default().push(text);
        }
    }
    out
}

/// Label box as the union of the assigned words, or `None` without words.
pub fn derive_label(landmark_id: &str, assigned: &[&DetectedText]) -> Option<GroundTruthLabel> {
    let boxes: Vec<_> = assigned.iter().map(|t| t.bbox).collect();
    let bbox = bbox_union(&boxes).ok()?;
    Some(GroundTruthLabel {
        landmark_id: landmark_id.to_string(),
        bbox,
        matched_words: assigned
            .iter()
            .map(|t| MatchedWord {
                text: t.text.clone(),
                bbox: t.bbox,
            })
            .collect(),
    })
}

/// Runs assignment and union for one map; labels are sorted by landmark id.
pub fn derive_map_labels(map: &MapRecord, texts: &[DetectedText], params: &GtParams) -> Vec<GroundTruthLabel> {
    assign_texts(map, texts, params)
        .iter()
        .filter_map(|(id, words)| derive_label(id, words))
        .collect()
}

/// Derives labels for every map, replacing any labels already present.
pub fn derive_dataset_labels(dataset: &Dataset, params: &GtParams) -> Vec<GroundTruthLabel> {
    dataset
        .maps
        .iter()
        .flat_map(|map| {
            let texts: Vec<DetectedText> = dataset.texts_for_map(&map.id).cloned().collect();
            derive_map_labels(map, &texts, params)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub maps_total: usize,
    pub maps_with_label: usize,
    pub landmarks_total: usize,
    pub landmarks_with_label: usize,
    pub map_fraction: f64,
    pub landmark_fraction: f64,
}

pub fn coverage(dataset: &Dataset) -> Result<Coverage, GtError> {
    if dataset.maps.is_empty() {
        return Err(GtError::UndefinedCoverage("dataset has no maps"));
    }
    let labeled = dataset.label_index();
    let landmarks_total = dataset.landmarks().count();
    if landmarks_total == 0 {
        return Err(GtError::UndefinedCoverage("dataset has no landmarks"));
    }
    let landmarks_with_label = dataset.landmarks().filter(|l| labeled.contains_key(l.id.as_str())).count();
    let maps_with_label = dataset
        .maps
        .iter()
        .filter(|m| m.landmarks.iter().any(|l| labeled.contains_key(l.id.as_str())))
        .count();
    Ok(Coverage {
        maps_total: dataset.maps.len(),
        maps_with_label,
        landmarks_total,
        landmarks_with_label,
        map_fraction: maps_with_label as f64 / dataset.maps.len() as f64,
        landmark_fraction: landmarks_with_label as f64 / landmarks_total as f64,
    })
}

impl Coverage {
    pub fn to_table(&self) -> String {
        format!(
            "{:<10} {:>8} {:>8} {:>9}\n{:<10} {:>8} {:>8} {:>9.4}\n{:<10} {:>8} {:>8} {:>9.4}\n",
            "scope",
            "labeled",
            "total",
            "fraction",
            "maps",
            self.maps_with_label,
            self.maps_total,
            self.map_fraction,
            "landmarks",
            self.landmarks_with_label,
            self.landmarks_total,
            self.landmark_fraction,
        )
    }
}
