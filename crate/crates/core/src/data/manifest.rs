use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_features, DataError};
use crate::eval::GroundTruthSegment;
use crate::inference::DEFAULT_FPS;
use crate::Tensor;

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub t_start: f64,
    pub t_end: f64,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<SegmentEntry>,
}

/// Dataset index: class vocabulary plus one entry per video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
    /// Groups of classes that share a common phase. Optional; when absent the THUMOS14
    /// groups are assumed by the conjoint subset filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conjoint_sets: Option<Vec<Vec<String>>>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: String| Err(DataError::Manifest(s));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return bad(format!("duplicate class {:?}", c));
            }
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(&v.video_id) {
                return bad(format!("duplicate video id {:?}", v.video_id));
            }
            if !(v.fps > 0.0 && v.fps.is_finite()) {
                return bad(format!(
                    "video {:?}: fps must be positive, got {}",
                    v.video_id, v.fps
                ));
            }
            for l in v.labels.iter().chain(v.segments.iter().map(|s| &s.class)) {
                if !seen.contains(l) {
                    return bad(format!("video {:?}: unknown class {:?}", v.video_id, l));
                }
            }
            for s in &v.segments {
                if !(s.t_end > s.t_start) || !s.t_start.is_finite() || !s.t_end.is_finite() {
                    return bad(format!(
                        "video {:?}: bad segment [{}, {}]",
                        v.video_id, s.t_start, s.t_end
                    ));
                }
            }
        }
        if let Some(sets) = &self.conjoint_sets {
            for c in sets.iter().flatten() {
                if !seen.contains(c) {
                    return bad(format!("conjoint set names unknown class {:?}", c));
                }
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Keeps only the named classes (in manifest order) and drops videos left without a
    /// label.
    pub fn restrict_classes(&self, keep: &[String]) -> Manifest {
        let kept = |c: &String| keep.contains(c);
        let videos = self
            .videos
            .iter()
            .filter_map(|v| {
                let labels: Vec<String> = v.labels.iter().filter(|l| kept(l)).cloned().collect();
                (!labels.is_empty()).then(|| VideoEntry {
                    labels,
                    segments: v
                        .segments
                        .iter()
                        .filter(|s| kept(&s.class))
                        .cloned()
                        .collect(),
                    ..v.clone()
                })
            })
            .collect();
        let conjoint_sets = self.conjoint_sets.as_ref().map(|sets| {
            sets.iter()
                .map(|s| s.iter().filter(|c| kept(c)).cloned().collect::<Vec<_>>())
                .filter(|s| !s.is_empty())
                .collect()
        });
        Manifest {
            classes: self.classes.iter().filter(|c| kept(c)).cloned().collect(),
            videos,
            conjoint_sets,
        }
    }

    /// Ground-truth segments of every video, with class indices.
    pub fn ground_truth(&self) -> Vec<GroundTruthSegment> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.segments.iter().map(move |s| GroundTruthSegment {
                    video_id: v.video_id.clone(),
                    t_start: s.t_start,
                    t_end: s.t_end,
                    class_id: self.class_index(&s.class).expect("validated"),
                })
            })
            .collect()
    }
}

/// A loaded video: features plus label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub fps: f64,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// A manifest with every feature file loaded and checked.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
}

impl Dataset {
    /// Builds a dataset from in-memory features (one per manifest video, in order).
    pub fn from_parts(manifest: Manifest, features: Vec<Tensor<f32>>) -> Result<Self, DataError> {
        manifest.validate()?;
        if features.len() != manifest.videos.len() {
            return Err(DataError::Manifest(format!(
                "{} videos but {} feature matrices",
                manifest.videos.len(),
                features.len()
            )));
        }
        let mut width = None;
        let mut videos = Vec::with_capacity(features.len());
        for (v, x) in manifest.videos.iter().zip(features) {
            let f = x.shape().get(1).copied().unwrap_or(0);
            if *width.get_or_insert(f) != f {
                return Err(DataError::Manifest(format!(
                    "video {:?}: feature width {} differs from {}",
                    v.video_id,
                    f,
                    width.unwrap()
                )));
            }
            videos.push(Video {
                id: v.video_id.clone(),
                fps: v.fps,
                features: x,
                labels: v
                    .labels
                    .iter()
                    .map(|l| manifest.class_index(l).expect("validated"))
                    .collect(),
            });
        }
        Ok(Dataset { manifest, videos })
    }

    /// Loads the manifest and every feature file it lists.
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::load_with(manifest, base)
    }

    pub fn load_with(manifest: Manifest, base: &Path) -> Result<Self, DataError> {
        let features = manifest
            .videos
            .iter()
            .map(|v| load_features(&resolve(base, &v.feature_path)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(manifest, features)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.shape()[1])
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
