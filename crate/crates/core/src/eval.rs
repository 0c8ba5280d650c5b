//! Temporal IoU, interpolated average precision and mAP over IoU grids, following the
//! ActivityNet detection protocol.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Manifest;
use crate::inference::Proposal;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("degenerate segment [{0}, {1}]")]
    Degenerate(f64, f64),
    #[error("no ground-truth segments to evaluate against")]
    NoGroundTruth,
    #[error("classes not in the conjoint vocabulary: {0:?}")]
    UnknownClasses(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSegment {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: usize,
}

/// `|a ∩ b| / |a ∪ b|` of two `(start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64, EvalError> {
    for s in [a, b] {
        if !(s.1 > s.0) {
            return Err(EvalError::Degenerate(s.0, s.1));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Ranking used by evaluation: score descending, then earlier start, then video id, then
/// earlier end.
pub fn detection_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.t_end.total_cmp(&b.t_end))
}

/// Average precision of one class at one IoU threshold. `None` when there is no ground
/// truth for the class.
///
/// Detections are matched greedily in score order: each one takes the unmatched
/// ground truth in its video with the highest IoU, provided that IoU reaches
/// `iou_thr`. AP sums the interpolated precision at every true-positive rank and divides
/// by the ground-truth count.
pub fn average_precision(
    proposals: &[Proposal],
    gts: &[GroundTruthSegment],
    iou_thr: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<&Proposal> = proposals.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));

    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for p in order {
        let Some(cands) = by_video.get(p.video_id.as_str()) else {
            hits.push(false);
            continue;
        };
        let mut scored: Vec<(f64, usize)> = cands
            .iter()
            .map(|&gi| {
                let g = &gts[gi];
                (
                    tiou((p.t_start, p.t_end), (g.t_start, g.t_end)).unwrap_or(0.0),
                    gi,
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut hit = false;
        for (iou, gi) in scored {
            if iou < iou_thr {
                break;
            }
            if matched[gi] {
                continue;
            }
            matched[gi] = true;
            hit = true;
            break;
        }
        hits.push(hit);
    }
    Some(interpolated_ap(&hits, gts.len()))
}

/// AP from the hit sequence of a ranked list.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // envelope: precision at rank i becomes the max precision at any rank >= i
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            ap += precision[i];
        }
    }
    ap / num_gt as f64
}

/// IoU thresholds 0.3, 0.4, ..., 0.9.
pub fn thumos_grid() -> Vec<f64> {
    (3..=9).map(|i| i as f64 / 10.0).collect()
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn activitynet_grid() -> Vec<f64> {
    (10..=19).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold, in `[0, 1]`.
    pub map: Vec<f64>,
    /// Classes that had at least one ground truth.
    pub evaluated_classes: Vec<usize>,
    /// `per_class_ap[i][j]` is the AP of `evaluated_classes[j]` at `thresholds[i]`.
    pub per_class_ap: Vec<Vec<f64>>,
}

impl MapReport {
    /// Mean of the per-threshold mAP over thresholds in `[lo, hi]`.
    pub fn average(&self, lo: f64, hi: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .thresholds
            .iter()
            .zip(&self.map)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .map(|(_, m)| *m)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - thr).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    /// JSON object with per-threshold values and the two averages used for THUMOS-style
    /// reporting (percentages).
    pub fn to_json(&self) -> serde_json::Value {
        let mut per = serde_json::Map::new();
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            per.insert(format!("{:.2}", t), serde_json::json!(100.0 * m));
        }
        serde_json::json!({
            "map": per,
            "avg_0.5_0.9": self.average(0.5, 0.9).map(|v| 100.0 * v),
            "avg_0.3_0.9": self.average(0.3, 0.9).map(|v| 100.0 * v),
            "avg_0.3_0.7": self.average(0.3, 0.7).map(|v| 100.0 * v),
            "num_classes": self.evaluated_classes.len(),
        })
    }

    /// Aligned table: one column per threshold then `AVG 0.5:0.9` and `AVG 0.3:0.9`.
    pub fn to_table(&self, label: &str) -> String {
        let mut head = format!("{:<12}", "");
        let mut row = format!("{:<12}", label);
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = write!(head, "{:>7}", format!("{:.2}", t));
            let _ = write!(row, "{:>7.1}", 100.0 * m);
        }
        for (name, lo, hi) in [("0.5:0.9", 0.5, 0.9), ("0.3:0.9", 0.3, 0.9)] {
            let _ = write!(head, "{:>9}", name);
            match self.average(lo, hi) {
                Some(v) => {
                    let _ = write!(row, "{:>9.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(row, "{:>9}", "-");
                }
            }
        }
        format!("{:<12}{}\n{}\n{}\n", "", "mAP@IoU", head, row)
    }
}

/// Per-threshold mAP over every class that has ground truth.
pub fn map_report(
    proposals: &[Proposal],
    gts: &[GroundTruthSegment],
    iou_grid: &[f64],
) -> Result<MapReport, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let classes: Vec<usize> = classes.into_iter().collect();
    let mut per_class_ap = Vec::with_capacity(iou_grid.len());
    let mut map = Vec::with_capacity(iou_grid.len());
    for &thr in iou_grid {
        let aps: Vec<f64> = classes
            .iter()
            .map(|&c| {
                let p: Vec<Proposal> = proposals
                    .iter()
                    .filter(|p| p.class_id == c)
                    .cloned()
                    .collect();
                let g: Vec<GroundTruthSegment> =
                    gts.iter().filter(|g| g.class_id == c).cloned().collect();
                average_precision(&p, &g, thr).expect("class has ground truth")
            })
            .collect();
        map.push(aps.iter().sum::<f64>() / aps.len() as f64);
        per_class_ap.push(aps);
    }
    Ok(MapReport {
        thresholds: iou_grid.to_vec(),
        map,
        evaluated_classes: classes,
        per_class_ap,
    })
}

/// The five THUMOS14 class groups whose members share common phases.
pub const THUMOS14_CONJOINT_SETS: [&[&str]; 5] = [
    &["BaseballPitch", "CricketBowling"],
    &["HighJump", "LongJump"],
    &["HammerThrow", "Shotput", "ThrowDiscus"],
    &["JavelinThrow", "PoleVault"],
    &["CliffDiving", "Diving"],
];

pub const THUMOS14_CLASSES: [&str; 20] = [
    "BaseballPitch",
    "BasketballDunk",
    "Billiards",
    "CleanAndJerk",
    "CliffDiving",
    "CricketBowling",
    "CricketShot",
    "Diving",
    "FrisbeeCatch",
    "GolfSwing",
    "HammerThrow",
    "HighJump",
    "JavelinThrow",
    "LongJump",
    "PoleVault",
    "Shotput",
    "SoccerPenalty",
    "TennisSwing",
    "ThrowDiscus",
    "VolleyballSpiking",
];

/// Restricts a manifest to its conjoint classes.
///
/// Manifests that declare `conjoint_sets` use those groups; otherwise the class list must
/// use THUMOS14 names and the five THUMOS14 groups apply. Classes are re-indexed densely
/// in their original order. Returns the restricted manifest and, for each kept class, its
/// old index.
pub fn conjoint_subset_filter(manifest: &Manifest) -> Result<(Manifest, Vec<usize>), EvalError> {
    let conjoint: BTreeSet<String> = match &manifest.conjoint_sets {
        Some(sets) => sets.iter().flatten().cloned().collect(),
        None => {
            let unknown: Vec<String> = manifest
                .classes
                .iter()
                .filter(|c| !THUMOS14_CLASSES.contains(&c.as_str()))
                .cloned()
                .collect();
            if !unknown.is_empty() {
                return Err(EvalError::UnknownClasses(unknown));
            }
            THUMOS14_CONJOINT_SETS
                .iter()
                .flat_map(|s| s.iter().map(|c| c.to_string()))
                .collect()
        }
    };
    let keep: Vec<String> = manifest
        .classes
        .iter()
        .filter(|c| conjoint.contains(*c))
        .cloned()
        .collect();
    let old_index = keep
        .iter()
        .map(|k| manifest.classes.iter().position(|c| c == k).unwrap())
        .collect();
    Ok((manifest.restrict_classes(&keep), old_index))
}

/// Re-indexes proposals into a restricted class list, dropping those outside it.
pub fn remap_proposals(proposals: &[Proposal], old_index: &[usize]) -> Vec<Proposal> {
    proposals
        .iter()
        .filter_map(|p| {
            old_index
                .iter()
                .position(|&o| o == p.class_id)
                .map(|new| Proposal {
                    class_id: new,
                    ..p.clone()
                })
        })
        .collect()
}
