//! Dataset splitting, RMSE against ground-truth centroids, and reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoordFormat, Dataset, LandmarkType, PlacementMethod, PlacementResult, Point};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("rmse of an empty set is undefined")]
    EmptyPairs,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("no scored results ({n_parse_failures} failed, {n_missing_gt} without ground truth)")]
    EmptyReport { n_parse_failures: usize, n_missing_gt: usize },
    #[error("result references unknown landmark `{0}`")]
    UnknownLandmark(String),
    #[error("duplicate result for landmark `{0}`")]
    DuplicateResult(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Landmark,
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub unit: SplitUnit,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 0.70,
            val: 0.10,
            test: 0.20,
            unit: SplitUnit::Landmark,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EvalError::InvalidRatios("ratios must be positive".into()));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidRatios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Apportions `n` items by `ratios` with the largest-remainder method. Ties
/// in the fractional part go to the earlier bucket.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // Absorb representation error such as 0.29 * 100 = 28.999999999999996.
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Remainders within 1e-9 are ties: 0.7 * 182 and 0.2 * 182 both have an
    // exact remainder of 0.4 but differ in the last bits.
    let frac: Vec<f64> = quotas.iter().zip(&counts).map(|(q, c)| ((q - *c as f64) * 1e9).round()).collect();
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Split {
    pub fn get(&self, name: &str) -> Option<&BTreeSet<String>> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Partitions the landmarks that have ground truth into train/val/test.
///
/// Items are sorted, shuffled with a seeded ChaCha8 generator, and cut by
/// largest-remainder counts. In map mode whole maps are allocated.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, EvalError> {
    spec.validate()?;
    let labeled: HashSet<&str> = dataset.labels.iter().map(|l| l.landmark_id.as_str()).collect();
    let ratios = [spec.train, spec.val, spec.test];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let groups: Vec<Vec<String>> = match spec.unit {
        SplitUnit::Landmark => {
            let mut ids: Vec<String> = dataset
                .landmarks()
                .filter(|l| labeled.contains(l.id.as_str()))
                .map(|l| l.id.clone())
                .collect();
            ids.sort();
            ids.into_iter().map(|id| vec![id]).collect()
        }
        SplitUnit::Map => {
            let mut maps: Vec<(&str, Vec<String>)> = dataset
                .maps
                .iter()
                .map(|m| {
                    let ids = m
                        .landmarks
                        .iter()
                        .filter(|l| labeled.contains(l.id.as_str()))
                        .map(|l| l.id.clone())
                        .collect::<Vec<_>>();
                    (m.id.as_str(), ids)
                })
                .filter(|(_, ids)| !ids.is_empty())
                .collect();
            maps.sort_by(|a, b| a.0.cmp(b.0));
            maps.into_iter().map(|(_, ids)| ids).collect()
        }
    };
    let mut groups = groups;
    groups.shuffle(&mut rng);
    let counts = largest_remainder(groups.len(), &ratios);

    let mut out = Split::default();
    let mut it = groups.into_iter();
    for (bucket, count) in [&mut out.train, &mut out.val, &mut out.test].into_iter().zip(counts) {
        for group in it.by_ref().take(count) {
            bucket.extend(group);
        }
    }
    Ok(out)
}

/// Root-mean-square Euclidean distance between predictions and truths.
pub fn rmse(pairs: &[(Point, Point)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let sum_sq: f64 = pairs
        .iter()
        .map(|(p, t)| {
            let (dx, dy) = (p.x - t.x, p.y - t.y);
            dx * dx + dy * dy
        })
        .sum();
    Ok((sum_sq / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub n: usize,
    pub rmse: f64,
}

/// Per-landmark scoring row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub landmark_id: String,
    pub truth_x: f64,
    pub truth_y: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub error_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_rmse: f64,
    pub n_total: usize,
    pub n_scored: usize,
    pub n_parse_failures: usize,
    pub n_missing_gt: usize,
    pub failure_rate: f64,
    pub by_type: BTreeMap<LandmarkType, GroupStat>,
    pub by_city: BTreeMap<String, GroupStat>,
    pub by_format: BTreeMap<CoordFormat, GroupStat>,
    pub by_method: BTreeMap<PlacementMethod, GroupStat>,
    #[serde(skip)]
    pub rows: Vec<ScoredRow>,
}

fn grouped<K: Ord + Clone>(items: impl Iterator<Item = (K, (Point, Point))>) -> BTreeMap<K, GroupStat> {
    let mut groups: BTreeMap<K, Vec<(Point, Point)>> = BTreeMap::new();
    for (k, pair) in items {
        groups.entry(k).or_default().push(pair);
    }
    groups
        .into_iter()
        .map(|(k, pairs)| {
            let stat = GroupStat {
                n: pairs.len(),
                rmse: rmse(&pairs).expect("groups are non-empty"),
            };
            (k, stat)
        })
        .collect()
}

/// Scores results against ground-truth centroids.
///
/// With `filter`, only results for those landmark ids count. Results without
/// ground truth and failed results are tallied but never scored.
pub fn report(
    dataset: &Dataset,
    results: &[PlacementResult],
    filter: Option<&BTreeSet<String>>,
) -> Result<EvalReport, EvalError> {
    let landmarks = dataset.landmark_index();
    let labels = dataset.label_index();
    let mut seen = HashSet::new();

    struct Scored<'a> {
        kind: LandmarkType,
        city: &'a str,
        format: Option<CoordFormat>,
        method: PlacementMethod,
        pair: (Point, Point),
    }
    let mut scored: Vec<Scored<'_>> = Vec::new();
    let mut rows = Vec::new();
    let (mut n_total, mut n_fail, mut n_missing) = (0, 0, 0);

    for r in results {
        if filter.is_some_and(|f| !f.contains(&r.landmark_id)) {
            continue;
        }
        let (map, lm) = landmarks
            .get(r.landmark_id.as_str())
            .ok_or_else(|| EvalError::UnknownLandmark(r.landmark_id.clone()))?;
        if !seen.insert(r.landmark_id.as_str()) {
            return Err(EvalError::DuplicateResult(r.landmark_id.clone()));
        }
        n_total += 1;
        let Some(label) = labels.get(r.landmark_id.as_str()) else {
            n_missing += 1;
            continue;
        };
        let Some(pred) = r.predicted else {
            n_fail += 1;
            continue;
        };
        let truth = label.centroid();
        rows.push(ScoredRow {
            landmark_id: r.landmark_id.clone(),
            truth_x: truth.x,
            truth_y: truth.y,
            pred_x: pred.x,
            pred_y: pred.y,
            error_px: pred.distance(&truth),
        });
        scored.push(Scored {
            kind: lm.kind,
            city: map.city.as_str(),
            format: r.coord_format,
            method: r.method,
            pair: (pred, truth),
        });
    }

    if scored.is_empty() {
        return Err(EvalError::EmptyReport {
            n_parse_failures: n_fail,
            n_missing_gt: n_missing,
        });
    }
    let pairs: Vec<(Point, Point)> = scored.iter().map(|s| s.pair).collect();
    Ok(EvalReport {
        overall_rmse: rmse(&pairs)?,
        n_total,
        n_scored: scored.len(),
        n_parse_failures: n_fail,
        n_missing_gt: n_missing,
        failure_rate: if n_total - n_missing == 0 {
            0.0
        } else {
            n_fail as f64 / (n_total - n_missing) as f64
        },
        by_type: grouped(scored.iter().map(|s| (s.kind, s.pair))),
        by_city: grouped(scored.iter().map(|s| (s.city.to_string(), s.pair))),
        by_format: grouped(scored.iter().filter_map(|s| s.format.map(|f| (f, s.pair)))),
        by_method: grouped(scored.iter().map(|s| (s.method, s.pair))),
        rows,
    })
}

impl EvalReport {
    /// Aligned text table; group rows follow the canonical type order.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>7} {:>10}", "group", "n", "rmse_px");
        let mut row = |name: String, g: &GroupStat| {
            let _ = writeln!(s, "{:<24} {:>7} {:>10.3}", name, g.n, g.rmse);
        };
        row(
            "overall".into(),
            &GroupStat {
                n: self.n_scored,
                rmse: self.overall_rmse,
            },
        );
        for (m, g) in &self.by_method {
            row(format!("method: {m}"), g);
        }
        for (f, g) in &self.by_format {
            row(format!("format: {f}"), g);
        }
        for (t, g) in &self.by_type {
            row(format!("type: {t}"), g);
        }
        for (c, g) in &self.by_city {
            row(format!("city: {c}"), g);
        }
        let _ = writeln!(
            s,
            "failures: {} of {} ({:.1}%), missing ground truth: {}",
            self.n_parse_failures,
            self.n_total - self.n_missing_gt,
            self.failure_rate * 100.0,
            self.n_missing_gt
        );
        s
    }

    /// `landmark_id,truth_x,truth_y,pred_x,pred_y,error_px` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark_id,truth_x,truth_y,pred_x,pred_y,error_px\n");
        for r in &self.rows {
            let id = if r.landmark_id.contains([',', '"', '\n']) {
                format!("\"{}\"", r.landmark_id.replace('"', "\"\""))
            } else {
                r.landmark_id.clone()
            };
            let _ = writeln!(s, "{id},{},{},{},{},{}", r.truth_x, r.truth_y, r.pred_x, r.pred_y, r.error_px);
        }
        s
    }
}

/// Side-by-side RMSE across several labeled reports: one row per report,
/// columns for overall and each landmark type.
pub fn comparison_table(reports: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let width = reports.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let _ = write!(s, "{:<width$} {:>9} {:>6}", "run", "overall", "fail%");
    for t in LandmarkType::ALL {
        let _ = write!(s, " {:>9}", t.title());
    }
    s.push('\n');
    for (label, r) in reports {
        let _ = write!(s, "{:<width$} {:>9.2} {:>6.1}", label, r.overall_rmse, r.failure_rate * 100.0);
        for t in LandmarkType::ALL {
            match r.by_type.get(&t) {
                Some(g) => {
                    let _ = write!(s, " {:>9.2}", g.rmse);
                }
                None => {
                    let _ = write!(s, " {:>9}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
