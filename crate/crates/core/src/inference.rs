//! From one video's model outputs to scored, class-labelled temporal proposals.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::eval::tiou;
use crate::model::ModelOutputs;
use crate::tensor::{Scalar, Tensor};

/// Frames per snippet used when converting snippet indices to seconds.
pub const SNIPPET_FRAMES: f64 = 16.0;
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub video_score_threshold: f64,
    pub actionness_thresholds: Vec<f64>,
    pub nms_iou: f64,
    pub oic_inflation: f64,
}

/// `start, start + step, ...` up to and including `end` (within rounding).
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            video_score_threshold: 0.2,
            actionness_thresholds: threshold_grid(0.05, 0.95, 0.06),
            nms_iou: 0.7,
            oic_inflation: 0.25,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), String> {
        let th = &self.actionness_thresholds;
        if th.is_empty() {
            return Err("actionness_thresholds is empty".into());
        }
        if th.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err("actionness thresholds must lie in (0, 1)".into());
        }
        if th.windows(2).any(|w| w[1] <= w[0]) {
            return Err("actionness thresholds must be strictly increasing".into());
        }
        if !(self.video_score_threshold > 0.0 && self.video_score_threshold < 1.0) {
            return Err("video_score_threshold must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err("nms_iou must lie in [0, 1]".into());
        }
        if !(self.oic_inflation >= 0.0) {
            return Err("oic_inflation must be >= 0".into());
        }
        Ok(())
    }
}

/// A localized action instance. `class_id` indexes the foreground class list (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
    pub class_id: usize,
}

/// Video-level class probabilities from top-k pooling and softmax over `C + 1` classes.
pub fn video_scores<S: Scalar>(s_cas: &Tensor<S>, k: usize) -> Vec<f64> {
    let (t, c) = s_cas.dims2().expect("rank-2 T-CAS");
    let k = k.clamp(1, t);
    let pooled: Vec<f64> = (0..c)
        .map(|j| {
            let mut col: Vec<f64> = s_cas.column(j).iter().map(|v| v.as_f64()).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            col[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let m = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = pooled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Foreground classes whose video-level score is at least `threshold`. The last column
/// of `s_final_supp` is background and is never returned.
pub fn select_classes<S: Scalar>(s_final_supp: &Tensor<S>, k: usize, threshold: f64) -> Vec<usize> {
    let p = video_scores(s_final_supp, k);
    select_from_scores(&p, threshold)
}

pub fn select_from_scores(p: &[f64], threshold: f64) -> Vec<usize> {
    let fg = p.len().saturating_sub(1);
    (0..fg).filter(|&j| p[j] >= threshold).collect()
}

/// Maximal runs of snippets with `a_ness >= theta`, pooled over all thresholds, as
/// inclusive `[start, end]` snippet indices.
pub fn generate_segments<S: Scalar>(a_ness: &[S], thresholds: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &theta in thresholds {
        let mut start = None;
        for (i, &a) in a_ness.iter().enumerate() {
            let keep = a.as_f64() >= theta;
            match (keep, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, a_ness.len() - 1));
        }
    }
    out
}

/// Outer-inner contrast: mean score inside the segment minus the mean over margins of
/// `max(1, ceil(inflation * len))` snippets on each side, clipped to the video.
pub fn score_proposal(scores: &[f64], segment: (usize, usize), inflation: f64) -> f64 {
    let (s, e) = segment;
    let len = e - s + 1;
    let inner = scores[s..=e].iter().sum::<f64>() / len as f64;
    let margin = ((inflation * len as f64).ceil() as usize).max(1);
    let left = s.saturating_sub(margin)..s;
    let right = (e + 1)..(e + 1 + margin).min(scores.len());
    let outer: Vec<f64> = scores[left].iter().chain(&scores[right]).copied().collect();
    let outer_mean = if outer.is_empty() {
        0.0
    } else {
        outer.iter().sum::<f64>() / outer.len() as f64
    };
    inner - outer_mean
}

fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.t_end.total_cmp(&b.t_end))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// Greedy NMS over same-class proposals: highest score first (ties by earlier start); a
/// proposal survives iff its IoU with every kept proposal is at most `iou_threshold`.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut order: Vec<&Proposal> = proposals.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Proposal> = Vec::new();
    for p in order {
        let clear = kept.iter().all(|k| {
            tiou((p.t_start, p.t_end), (k.t_start, k.t_end)).unwrap_or(0.0) <= iou_threshold
        });
        if clear {
            kept.push(p.clone());
        }
    }
    kept
}

/// Full localization for one video in eval mode.
///
/// Output is grouped by class (ascending) and sorted by score within each class.
pub fn localize<S: Scalar>(
    video_id: &str,
    out: &ModelOutputs<S>,
    k: usize,
    fps: f64,
    cfg: &InferenceConfig,
) -> Vec<Proposal> {
    let classes = select_classes(&out.s_final_supp, k, cfg.video_score_threshold);
    if classes.is_empty() {
        return Vec::new();
    }
    let a_ness = out.a_ness.data();
    let segments: BTreeSet<(usize, usize)> = generate_segments(a_ness, &cfg.actionness_thresholds)
        .into_iter()
        .collect();
    let snippet_seconds = SNIPPET_FRAMES / fps;
    let mut result = Vec::new();
    for c in classes {
        let scores: Vec<f64> = out
            .s_final_supp
            .column(c)
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let candidates: Vec<Proposal> = segments
            .iter()
            .filter_map(|&seg| {
                let psi = score_proposal(&scores, seg, cfg.oic_inflation);
                (psi > 0.0).then(|| Proposal {
                    video_id: video_id.to_string(),
                    t_start: seg.0 as f64 * snippet_seconds,
                    t_end: (seg.1 + 1) as f64 * snippet_seconds,
                    score: psi,
                    class_id: c,
                })
            })
            .collect();
        result.extend(nms(&candidates, cfg.nms_iou));
    }
    result
}

/// Line-oriented proposal record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub score: f64,
    pub label: String,
}

impl ProposalRecord {
    pub fn from_proposal(p: &Proposal, classes: &[String]) -> Self {
        ProposalRecord {
            video_id: p.video_id.clone(),
            t_start: p.t_start,
            t_end: p.t_end,
            score: p.score,
            label: classes[p.class_id].clone(),
        }
    }
}

pub fn write_jsonl<W: Write>(w: &mut W, records: &[ProposalRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<ProposalRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// CSV with header `video_id,t_start,t_end,score,label`.
pub fn write_csv<W: Write>(w: W, records: &[ProposalRecord]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()
}
