//! Training objectives.
//!
//! Every loss is built on a [`Graph`] so that one `backward` call differentiates the
//! whole batch objective.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::model::ForwardVars;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Coarse T-CAS term inside the suppressed loss.
    pub lambda0: f64,
    /// Temporal-branch term inside the unsuppressed MIL loss.
    pub lambda1: f64,
    /// Co-activity similarity.
    pub lambda2: f64,
    /// Action-ness L1 norm.
    pub lambda3: f64,
    /// Action-ness guidance.
    pub lambda4: f64,
    pub casl_margin: f64,
    /// `k = max(1, T / topk_divisor)`.
    pub topk_divisor: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 0.8,
            lambda1: 0.7,
            lambda2: 0.9,
            lambda3: 0.8,
            lambda4: 0.8,
            casl_margin: 0.5,
            topk_divisor: 8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ls = [
            self.lambda0,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
        ];
        if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(TensorError::arg(
                "loss_weights",
                "lambdas must be finite and >= 0",
            ));
        }
        if !(self.casl_margin.is_finite() && self.casl_margin >= 0.0) {
            return Err(TensorError::arg("loss_weights", "casl_margin must be >= 0"));
        }
        if self.topk_divisor == 0 {
            return Err(TensorError::arg(
                "loss_weights",
                "topk_divisor must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn topk(&self, t: usize) -> usize {
        (t / self.topk_divisor).max(1)
    }
}

/// Video-level multi-hot label over `C + 1` classes, background last.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLabel {
    y: Vec<f64>,
}

impl VideoLabel {
    /// Builds a label from foreground class indices.
    pub fn from_classes(classes: &[usize], num_classes: usize) -> Result<Self, TensorError> {
        if classes.is_empty() {
            return Err(TensorError::arg("video_label", "no foreground class"));
        }
        let mut y = vec![0.0; num_classes + 1];
        for &c in classes {
            if c >= num_classes {
                return Err(TensorError::arg(
                    "video_label",
                    format!("class {} out of range {}", c, num_classes),
                ));
            }
            y[c] = 1.0;
        }
        Ok(VideoLabel { y })
    }

    pub fn num_classes(&self) -> usize {
        self.y.len() - 1
    }

    /// Background bit forced to 0.
    pub fn fg(&self) -> Vec<f64> {
        let mut y = self.y.clone();
        *y.last_mut().unwrap() = 0.0;
        y
    }

    /// Background bit forced to 1.
    pub fn full(&self) -> Vec<f64> {
        let mut y = self.y.clone();
        *y.last_mut().unwrap() = 1.0;
        y
    }

    /// Foreground part only (length `C`).
    pub fn foreground_only(&self) -> Vec<f64> {
        self.y[..self.y.len() - 1].to_vec()
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.y[c] > 0.0)
            .collect()
    }
}

/// Top-k MIL cross-entropy: column top-k means, softmax over classes, then cross-entropy
/// against the normalised multi-hot target.
pub fn topk_mil_loss<S: Scalar>(
    g: &mut Graph<S>,
    s_cas: Var,
    y_target: &[f64],
    k: usize,
) -> Result<Var, TensorError> {
    let (_, c) = g.value(s_cas).dims2()?;
    if y_target.len() != c {
        return Err(TensorError::shape(
            "topk_mil_loss",
            format!("target length {} vs {} classes", y_target.len(), c),
        ));
    }
    let mass: f64 = y_target.iter().sum();
    if mass <= 0.0 {
        return Err(TensorError::arg(
            "topk_mil_loss",
            "target has no positive class",
        ));
    }
    let video_scores = g.topk_mean_cols(s_cas, k)?;
    let log_p = g.log_softmax(video_scores)?;
    let target = Tensor::vector(y_target.iter().map(|&v| S::lit(-v / mass)).collect());
    let weighted = g.mul_const(log_p, target)?;
    g.sum(weighted)
}

/// Top-k MIL on the suppressed final and coarse T-CAS with background target 0.
pub fn suppressed_loss<S: Scalar>(
    g: &mut Graph<S>,
    s_final_supp: Var,
    s_coarse_supp: Var,
    y_fg: &[f64],
    k: usize,
    lambda0: f64,
) -> Result<Var, TensorError> {
    let a = topk_mil_loss(g, s_final_supp, y_fg, k)?;
    let b = topk_mil_loss(g, s_coarse_supp, y_fg, k)?;
    let b = g.scale(b, S::lit(lambda0))?;
    g.add(a, b)
}

/// Top-k MIL on the final T-CAS (background target 1) plus the temporal branch T-CAS
/// over foreground classes.
pub fn unsuppressed_loss<S: Scalar>(
    g: &mut Graph<S>,
    s_final: Var,
    s_temp: Var,
    y_full: &[f64],
    y_fg: &[f64],
    k: usize,
    lambda1: f64,
) -> Result<Var, TensorError> {
    let a = topk_mil_loss(g, s_final, y_full, k)?;
    let c = g.shape(s_temp)[1];
    let b = topk_mil_loss(g, s_temp, &y_fg[..c], k)?;
    let b = g.scale(b, S::lit(lambda1))?;
    g.add(a, b)
}

const NORM_EPS: f64 = 1e-10;

/// `1 - u.v / (|u| |v|)` for equal-shaped tensors.
pub fn cosine_distance<S: Scalar>(g: &mut Graph<S>, u: Var, v: Var) -> Result<Var, TensorError> {
    let uv = g.mul(u, v)?;
    let dot = g.sum(uv)?;
    let uu = g.mul(u, u)?;
    let uu = g.sum(uu)?;
    let uu = g.affine(uu, S::one(), S::lit(NORM_EPS))?;
    let vv = g.mul(v, v)?;
    let vv = g.sum(vv)?;
    let vv = g.affine(vv, S::one(), S::lit(NORM_EPS))?;
    let nu = g.sqrt(uu)?;
    let nv = g.sqrt(vv)?;
    let denom = g.mul(nu, nv)?;
    let cos = g.div(dot, denom)?;
    g.affine(cos, -S::one(), S::one())
}

/// Ranking hinge between two videos' high- and low-attention features of one class.
pub fn casl_hinge<S: Scalar>(
    g: &mut Graph<S>,
    h_m: Var,
    l_m: Var,
    h_n: Var,
    l_n: Var,
    margin: f64,
) -> Result<Var, TensorError> {
    let d_hh = cosine_distance(g, h_m, h_n)?;
    let d_hl = cosine_distance(g, h_m, l_n)?;
    let d_lh = cosine_distance(g, l_m, h_n)?;
    let a = g.sub(d_hh, d_hl)?;
    let a = g.affine(a, S::one(), S::lit(margin))?;
    let a = g.relu(a)?;
    let b = g.sub(d_hh, d_lh)?;
    let b = g.affine(b, S::one(), S::lit(margin))?;
    let b = g.relu(b)?;
    let s = g.add(a, b)?;
    g.scale(s, S::lit(0.5))
}

/// High- and low-attention pooled features of class `j`, each `1 × D`.
pub fn attention_pooled<S: Scalar>(
    g: &mut Graph<S>,
    e_a: Var,
    s_coarse_supp: Var,
    j: usize,
) -> Result<(Var, Var), TensorError> {
    let t = g.shape(e_a)[0];
    let col = g.column(s_coarse_supp, j)?;
    let att = g.softmax(col, 0)?;
    let att_row = g.reshape(att, &[1, t])?;
    let high = g.matmul(att_row, e_a)?;
    let denom = (t.max(2) - 1) as f64;
    let inv = g.affine(att_row, S::lit(-1.0 / denom), S::lit(1.0 / denom))?;
    let low = g.matmul(inv, e_a)?;
    Ok((high, low))
}

/// Co-activity similarity loss between two videos, averaged over their shared classes.
/// Returns a constant zero when no class is shared.
pub fn casl_loss<S: Scalar>(
    g: &mut Graph<S>,
    e_a_m: Var,
    s_coarse_supp_m: Var,
    e_a_n: Var,
    s_coarse_supp_n: Var,
    shared_classes: &[usize],
    margin: f64,
) -> Result<Var, TensorError> {
    if shared_classes.is_empty() {
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    let mut terms = Vec::with_capacity(shared_classes.len());
    for &j in shared_classes {
        let (h_m, l_m) = attention_pooled(g, e_a_m, s_coarse_supp_m, j)?;
        let (h_n, l_n) = attention_pooled(g, e_a_n, s_coarse_supp_n, j)?;
        terms.push(casl_hinge(g, h_m, l_m, h_n, l_n, margin)?);
    }
    let sum = g.add_n(&terms)?;
    g.scale(sum, S::lit(1.0 / shared_classes.len() as f64))
}

/// Mean absolute action-ness.
pub fn norm_loss<S: Scalar>(g: &mut Graph<S>, a_ness: Var) -> Result<Var, TensorError> {
    let a = g.abs(a_ness)?;
    g.mean(a)
}

/// Mean of `|1 - a_ness[t] - P(background)[t]|`.
pub fn guide_loss<S: Scalar>(
    g: &mut Graph<S>,
    a_ness: Var,
    s_final: Var,
) -> Result<Var, TensorError> {
    let bg_index = g.shape(s_final)[1] - 1;
    let bg = g.column(s_final, bg_index)?;
    let s = g.add(a_ness, bg)?;
    let r = g.affine(s, -S::one(), S::one())?;
    let r = g.abs(r)?;
    g.mean(r)
}

/// Which terms of the total objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    /// Unsuppressed top-k MIL on the coarse T-CAS, used when the suppressed coarse term is
    /// off but the class-aware branch is still supervised.
    pub coarse_mil: bool,
    /// `lambda1` term on the temporal branch T-CAS.
    pub temporal_mil: bool,
    pub supp_final: bool,
    pub supp_coarse: bool,
    pub norm: bool,
    pub guide: bool,
    pub cas: bool,
}

impl LossSwitches {
    pub fn all() -> Self {
        LossSwitches {
            coarse_mil: false,
            temporal_mil: true,
            supp_final: true,
            supp_coarse: true,
            norm: true,
            guide: true,
            cas: true,
        }
    }
}

/// One video's forward pass and label inside a batch.
pub struct LossInput<'a> {
    pub vars: &'a ForwardVars,
    pub label: &'a VideoLabel,
}

/// Scalar values of each component, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mil: f64,
    pub l_supp: f64,
    pub l_cas: f64,
    pub l_norm: f64,
    pub l_guide: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the components with the given weights.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.l_mil
            + self.l_supp
            + w.lambda2 * self.l_cas
            + w.lambda3 * self.l_norm
            + w.lambda4 * self.l_guide
    }
}

fn batch_mean<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Result<Option<Var>, TensorError> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = g.add_n(terms)?;
    Ok(Some(g.scale(s, S::lit(1.0 / terms.len() as f64))?))
}

/// `L_MIL + L_supp + lambda2 L_cas + lambda3 L_norm + lambda4 L_guide` over a batch.
///
/// Per-video terms are averaged over `videos`; the co-activity term is averaged over
/// `pairs`, each given as `(index_m, index_n, shared classes)`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    videos: &[LossInput<'_>],
    pairs: &[(usize, usize, Vec<usize>)],
    w: &LossWeights,
    sw: &LossSwitches,
) -> Result<(Var, LossBreakdown), TensorError> {
    if videos.is_empty() {
        return Err(TensorError::arg("total_loss", "empty batch"));
    }
    let mut mil = Vec::new();
    let mut supp = Vec::new();
    let mut norm = Vec::new();
    let mut guide = Vec::new();
    for v in videos {
        let f = v.vars;
        let t = g.shape(f.s_final)[0];
        let k = w.topk(t);
        let y_full = v.label.full();
        let y_fg = v.label.fg();

        let mut m = match (sw.temporal_mil, f.tea) {
            (true, Some(tea)) => {
                unsuppressed_loss(g, f.s_final, tea.s_temp, &y_full, &y_fg, k, w.lambda1)?
            }
            _ => topk_mil_loss(g, f.s_final, &y_full, k)?,
        };
        if let (true, Some(cad)) = (sw.coarse_mil, f.cad) {
            let c = topk_mil_loss(g, cad.s_coarse, &y_full, k)?;
            let c = g.scale(c, S::lit(w.lambda0))?;
            m = g.add(m, c)?;
        }
        mil.push(m);

        let supp_term = match (sw.supp_final, sw.supp_coarse, f.s_coarse_supp) {
            (true, true, Some(sc)) => {
                Some(suppressed_loss(g, f.s_final_supp, sc, &y_fg, k, w.lambda0)?)
            }
            (true, _, _) => Some(topk_mil_loss(g, f.s_final_supp, &y_fg, k)?),
            (false, true, Some(sc)) => {
                let c = topk_mil_loss(g, sc, &y_fg, k)?;
                Some(g.scale(c, S::lit(w.lambda0))?)
            }
            _ => None,
        };
        supp.extend(supp_term);
        if sw.norm {
            norm.push(norm_loss(g, f.a_ness)?);
        }
        if sw.guide {
            guide.push(guide_loss(g, f.a_ness, f.s_final)?);
        }
    }

    let mut cas = Vec::new();
    if sw.cas {
        for (m, n, shared) in pairs {
            let (vm, vn) = (videos[*m].vars, videos[*n].vars);
            let (Some(sm), Some(sn)) = (vm.s_coarse_supp, vn.s_coarse_supp) else {
                return Err(TensorError::arg(
                    "total_loss",
                    "co-activity loss needs the class-aware branch",
                ));
            };
            cas.push(casl_loss(g, vm.e_a, sm, vn.e_a, sn, shared, w.casl_margin)?);
        }
    }

    let l_mil = batch_mean(g, &mil)?.expect("non-empty batch");
    let mut parts = vec![l_mil];
    let mut out = LossBreakdown {
        l_mil: g.value(l_mil).item().as_f64(),
        ..Default::default()
    };
    if let Some(v) = batch_mean(g, &supp)? {
        out.l_supp = g.value(v).item().as_f64();
        parts.push(v);
    }
    for (terms, lambda, slot) in [
        (&cas, w.lambda2, &mut out.l_cas),
        (&norm, w.lambda3, &mut out.l_norm),
        (&guide, w.lambda4, &mut out.l_guide),
    ] {
        if let Some(v) = batch_mean(g, terms)? {
            *slot = g.value(v).item().as_f64();
            parts.push(g.scale(v, S::lit(lambda))?);
        }
    }
    let total = g.add_n(&parts)?;
    out.total = g.value(total).item().as_f64();
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_with_topk(v: &[f64], t: usize) -> Tensor<f64> {
        // constant columns so any k gives exactly v
        let c = v.len();
        let data = (0..t).flat_map(|_| v.iter().copied()).collect();
        Tensor::matrix(t, c, data).unwrap()
    }

    #[test]
    fn analytic_two_class_loss() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(scores_with_topk(&[3f64.ln(), 0.0], 4));
        let l = topk_mil_loss(&mut g, s, &[1.0, 0.0], 2).unwrap();
        assert!((g.value(l).item() - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_give_log_classes() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(scores_with_topk(&[0.4, 0.4, 0.4, 0.4], 3));
        let l = topk_mil_loss(&mut g, s, &[0.0, 1.0, 0.0, 0.0], 1).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_target_rejected() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(scores_with_topk(&[0.1, 0.2], 2));
        assert!(topk_mil_loss(&mut g, s, &[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn casl_separated_and_degenerate() {
        let mut g = Graph::<f64>::new();
        let e1 = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let e2 = g.constant(Tensor::from_rows(&[&[0.0, 1.0]]));
        let l = casl_hinge(&mut g, e1, e2, e1, e2, 0.5).unwrap();
        assert!(g.value(l).item().abs() < 1e-9);
        let l = casl_hinge(&mut g, e1, e1, e1, e1, 0.5).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn casl_without_shared_class_is_zero() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::zeros(&[3, 2]));
        let s = g.constant(Tensor::zeros(&[3, 3]));
        let l = casl_loss(&mut g, e, s, e, s, &[], 0.5).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn norm_and_guide_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![0.2, 0.4]));
        let l = norm_loss(&mut g, a).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-12);

        let a = g.constant(Tensor::vector(vec![0.3]));
        let s = g.constant(Tensor::from_rows(&[&[0.3, 0.7]]));
        let l = guide_loss(&mut g, a, s).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let a = g.constant(Tensor::vector(vec![1.0 - 1e-9]));
        let s = g.constant(Tensor::from_rows(&[&[0.0, 1.0]]));
        let l = guide_loss(&mut g, a, s).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn label_variants() {
        let y = VideoLabel::from_classes(&[0, 2], 3).unwrap();
        assert_eq!(y.fg(), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(y.full(), vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(y.foreground_only(), vec![1.0, 0.0, 1.0]);
        assert!(VideoLabel::from_classes(&[], 3).is_err());
        assert!(VideoLabel::from_classes(&[3], 3).is_err());
    }

    #[test]
    fn topk_divisor_convention() {
        let w = LossWeights::default();
        assert_eq!(w.topk(500), 62);
        assert_eq!(w.topk(60), 7);
        assert_eq!(w.topk(5), 1);
    }
}
