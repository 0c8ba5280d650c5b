//! Synthetic conjoint-action videos.
//!
//! Each conjoint set owns a common-phase prototype and each class a definite-phase
//! prototype. Each video's background prototype is a shared background vector plus a
//! per-video Gaussian offset. An action instance is a run of
//! common-phase snippets followed by a run of definite-phase snippets; its ground-truth
//! segment covers both.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, Manifest, SegmentEntry, VideoEntry};
use super::DataError;
use crate::inference::{DEFAULT_FPS, SNIPPET_FRAMES};
use crate::{derived_seed, seeded_rng, Tensor};

const MAX_PROTOTYPE_TRIES: usize = 1000;
const MAX_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub conjoint_sets: Vec<Vec<String>>,
    pub feature_dim: usize,
    pub snippets_per_video: usize,
    pub num_videos: usize,
    /// Size of the held-out split, which shares the training prototypes.
    pub test_videos: usize,
    /// Inclusive range of action instances per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive snippet-length ranges.
    pub common_len: (usize, usize),
    pub definite_len: (usize, usize),
    pub noise_std: f64,
    pub background_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            conjoint_sets: vec![
                vec!["set0_a".into(), "set0_b".into()],
                vec!["set1_a".into(), "set1_b".into()],
            ],
            feature_dim: 64,
            snippets_per_video: 60,
            num_videos: 200,
            test_videos: 50,
            actions_per_video: (1, 2),
            common_len: (3, 6),
            definite_len: (3, 6),
            noise_std: 0.1,
            background_std: 0.1,
            fps: DEFAULT_FPS,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn classes(&self) -> Vec<String> {
        self.conjoint_sets.iter().flatten().cloned().collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: String| Err(DataError::Config(s));
        if self.conjoint_sets.is_empty() || self.conjoint_sets.iter().any(|s| s.is_empty()) {
            return bad("conjoint sets must be non-empty".into());
        }
        let classes = self.classes();
        let mut sorted = classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != classes.len() {
            return bad("class names must be unique across conjoint sets".into());
        }
        if self.feature_dim < 2 {
            return bad(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            ));
        }
        if self.num_videos == 0 {
            return bad("num_videos must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("actions_per_video", self.actions_per_video),
            ("common_len", self.common_len),
            ("definite_len", self.definite_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{} range ({}, {}) must satisfy 1 <= lo <= hi",
                    name, lo, hi
                ));
            }
        }
        let longest = self.actions_per_video.1 * (self.common_len.1 + self.definite_len.1 + 1);
        if longest > self.snippets_per_video {
            return bad(format!(
                "{} snippets cannot hold {} instances of up to {} snippets",
                self.snippets_per_video,
                self.actions_per_video.1,
                self.common_len.1 + self.definite_len.1
            ));
        }
        if !(self.noise_std >= 0.0 && self.background_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A unit vector with `|cos| < 0.5` to each of `others`.
fn draw_prototype<R: Rng>(
    dim: usize,
    others: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<f64>, DataError> {
    for _ in 0..MAX_PROTOTYPE_TRIES {
        let v = random_unit(dim, rng);
        if others.iter().all(|o| cosine(&v, o).abs() < MAX_COSINE) {
            return Ok(v);
        }
    }
    Err(DataError::Config(format!(
        "could not draw {} separated prototypes in dimension {}; increase feature_dim",
        others.len() + 1,
        dim
    )))
}

/// Prototypes shared by all videos of one generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// One per conjoint set.
    pub common: Vec<Vec<f64>>,
    /// One per class, in class order.
    pub definite: Vec<Vec<f64>>,
    /// Shared background; each video shifts it by `N(0, background_std)` per dimension.
    pub background: Vec<f64>,
}

/// Snippet-level annotation of a generated video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnippetKind {
    Background,
    Common(usize),
    Definite(usize),
}

/// Generated dataset with the ground truth that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub prototypes: Prototypes,
    pub snippet_kinds: Vec<Vec<SnippetKind>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// The training split. Deterministic in `cfg` (including the seed).
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset, DataError> {
    synth_generate_split(cfg, Split::Train)
}

/// Prototypes come from `cfg.seed`; each split draws its videos from its own stream.
pub fn synth_generate_split(cfg: &SynthConfig, split: Split) -> Result<SynthDataset, DataError> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let dim = cfg.feature_dim;
    let classes = cfg.classes();
    let set_of: Vec<usize> = cfg
        .conjoint_sets
        .iter()
        .enumerate()
        .flat_map(|(s, members)| std::iter::repeat_n(s, members.len()))
        .collect();

    let mut drawn: Vec<Vec<f64>> = Vec::new();
    let mut common = Vec::new();
    for _ in &cfg.conjoint_sets {
        let p = draw_prototype(dim, &drawn, &mut rng)?;
        drawn.push(p.clone());
        common.push(p);
    }
    let mut definite = Vec::new();
    for _ in &classes {
        let p = draw_prototype(dim, &drawn, &mut rng)?;
        drawn.push(p.clone());
        definite.push(p);
    }
    let background = draw_prototype(dim, &drawn, &mut rng)?;

    let (num_videos, prefix, stream) = match split {
        Split::Train => (cfg.num_videos, "synth", 1),
        Split::Test => (cfg.test_videos, "synth_test", 2),
    };
    let mut rng = seeded_rng(derived_seed(cfg.seed, stream));
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated");
    let bg_shift = Normal::new(0.0, cfg.background_std).expect("validated");
    let t = cfg.snippets_per_video;
    let width = (num_videos.max(1) - 1).to_string().len();
    let seconds = SNIPPET_FRAMES / cfg.fps;

    let mut entries = Vec::with_capacity(num_videos);
    let mut features = Vec::with_capacity(num_videos);
    let mut kinds_all = Vec::with_capacity(num_videos);
    for vi in 0..num_videos {
        let class = rng.random_range(0..classes.len());
        let video_bg: Vec<f64> = background
            .iter()
            .map(|b| b + bg_shift.sample(&mut rng))
            .collect();
        let n_inst = rng.random_range(cfg.actions_per_video.0..=cfg.actions_per_video.1);
        let lens: Vec<(usize, usize)> = (0..n_inst)
            .map(|_| {
                (
                    rng.random_range(cfg.common_len.0..=cfg.common_len.1),
                    rng.random_range(cfg.definite_len.0..=cfg.definite_len.1),
                )
            })
            .collect();
        // Spread the free snippets over the n_inst + 1 gaps, keeping one snippet between
        // consecutive instances.
        let busy: usize = lens.iter().map(|(c, d)| c + d).sum::<usize>() + n_inst.saturating_sub(1);
        let slack = t - busy;
        let mut cuts: Vec<usize> = (0..n_inst).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();

        let mut kinds = vec![SnippetKind::Background; t];
        let mut segments = Vec::with_capacity(n_inst);
        let mut pos = 0;
        let mut prev_cut = 0;
        for (i, &(c_len, d_len)) in lens.iter().enumerate() {
            pos += cuts[i] - prev_cut + usize::from(i > 0);
            prev_cut = cuts[i];
            for k in &mut kinds[pos..pos + c_len] {
                *k = SnippetKind::Common(set_of[class]);
            }
            for k in &mut kinds[pos + c_len..pos + c_len + d_len] {
                *k = SnippetKind::Definite(class);
            }
            segments.push(SegmentEntry {
                t_start: pos as f64 * seconds,
                t_end: (pos + c_len + d_len) as f64 * seconds,
                class: classes[class].clone(),
            });
            pos += c_len + d_len;
        }

        let mut data = Vec::with_capacity(t * dim);
        for k in &kinds {
            let (proto, dist) = match *k {
                SnippetKind::Background => (&video_bg, &noise),
                SnippetKind::Common(s) => (&common[s], &noise),
                SnippetKind::Definite(c) => (&definite[c], &noise),
            };
            for &p in proto {
                data.push((p + dist.sample(&mut rng)) as f32);
            }
        }
        let id = format!("{}_{:0w$}", prefix, vi, w = width);
        entries.push(VideoEntry {
            feature_path: format!("features/{}.jcdf", id),
            video_id: id,
            fps: cfg.fps,
            labels: vec![classes[class].clone()],
            segments,
        });
        features.push(Tensor::matrix(t, dim, data).expect("sized"));
        kinds_all.push(kinds);
    }

    let manifest = Manifest {
        classes,
        videos: entries,
        conjoint_sets: Some(cfg.conjoint_sets.clone()),
    };
    Ok(SynthDataset {
        dataset: Dataset::from_parts(manifest, features)?,
        prototypes: Prototypes {
            common,
            definite,
            background,
        },
        snippet_kinds: kinds_all,
    })
}
