//! Fixtures and loop oracles shared by the integration tests.
#![allow(dead_code)]

use jcdnet::eval::GroundTruthSegment;
use jcdnet::inference::Proposal;
use jcdnet::model::{names, ModelConfig, Params};
use jcdnet::{seeded_rng, Tensor};
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn small_config(t: usize, f: usize, d: usize, c: usize, k: usize) -> ModelConfig {
    ModelConfig {
        feature_dim: f,
        hidden_dim: d,
        num_classes: c,
        snippets_per_video: t,
        conv_kernel: k,
        dropout_rate: 0.0,
        use_cad: true,
        use_tea: true,
    }
}

/// Initialized parameters with every bias and both residual gates randomized.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    let mut rng = seeded_rng(seed);
    let mut p = Params::<f64>::init(cfg, &mut rng);
    let names: Vec<String> = p.entries().iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let t = p.get_mut(&n).unwrap();
        if t.rank() <= 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    p
}

pub fn with_zero_gates(mut p: Params<f64>) -> Params<f64> {
    for n in [names::ALPHA, names::BETA] {
        if let Some(t) = p.get_mut(n) {
            t.data_mut()[0] = 0.0;
        }
    }
    p
}

/// Per-class weighted average of `x_a` rows, written as explicit loops.
pub fn m_def_oracle(s_coarse: &Tensor<f64>, x_a: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (t, c) = s_coarse.dims2().unwrap();
    let d = x_a.shape()[1];
    let mut out = vec![vec![0.0; d]; c];
    for (ci, row) in out.iter_mut().enumerate() {
        let mut mass = 0.0;
        for ti in 0..t {
            mass += s_coarse.at2(ti, ci);
        }
        for (di, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ti in 0..t {
                acc += s_coarse.at2(ti, ci) * x_a.at2(ti, di);
            }
            *cell = acc / mass;
        }
    }
    out
}

pub fn prop(video: &str, s: f64, e: f64, score: f64, class_id: usize) -> Proposal {
    Proposal {
        video_id: video.into(),
        t_start: s,
        t_end: e,
        score,
        class_id,
    }
}

pub fn gt(video: &str, s: f64, e: f64, class_id: usize) -> GroundTruthSegment {
    GroundTruthSegment {
        video_id: video.into(),
        t_start: s,
        t_end: e,
        class_id,
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Walks proposals in rank order; each takes the unmatched same-video ground truth of
/// highest overlap (lowest index on ties) if that overlap reaches the threshold. AP is
/// the sum over true positives of the best precision at that rank or any later rank,
/// divided by the number of ground truths.
pub fn oracle_ap(props: &[Proposal], gts: &[GroundTruthSegment], thr: f64) -> f64 {
    let mut ranked: Vec<&Proposal> = props.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.t_start.partial_cmp(&b.t_start).unwrap())
            .then(a.video_id.cmp(&b.video_id))
            .then(a.t_end.partial_cmp(&b.t_end).unwrap())
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for p in &ranked {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.video_id != p.video_id {
                continue;
            }
            let o = overlap((p.t_start, p.t_end), (g.t_start, g.t_end));
            if o >= thr && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    let precision_at = |i: usize| tp[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64;
    let mut total = 0.0;
    for i in 0..tp.len() {
        if tp[i] {
            total += (i..tp.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    total / gts.len() as f64
}

pub fn random_ap_instance(rng: &mut impl Rng) -> (Vec<Proposal>, Vec<GroundTruthSegment>) {
    let videos = ["a", "b"];
    let seg = |rng: &mut dyn rand::RngCore| {
        let s = rng.random_range(0..8) as f64;
        (s, s + rng.random_range(1..5) as f64)
    };
    let n_gt = rng.random_range(1..=3);
    let gts = (0..n_gt)
        .map(|_| {
            let (s, e) = seg(rng);
            gt(videos[rng.random_range(0..2)], s, e, 0)
        })
        .collect();
    let n_p = rng.random_range(0..=6);
    let props = (0..n_p)
        .map(|_| {
            let (s, e) = seg(rng);
            // coarse scores make ties common so the tie-break is exercised
            let score = rng.random_range(0..4) as f64 / 4.0;
            prop(videos[rng.random_range(0..2)], s, e, score, 0)
        })
        .collect();
    (props, gts)
}
