//! The network: a class-aware branch that pools coarse definite-phase features from the
//! coarse T-CAS, a temporal attention branch that produces action-ness, a fusion
//! classifier, and action-ness based background suppression.
//!
//! All sequences are stored time-major (`T × channels`).

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input snippet feature width (RGB and flow concatenated).
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Number of foreground classes; the background class is appended as index `C`.
    pub num_classes: usize,
    pub snippets_per_video: usize,
    pub conv_kernel: usize,
    pub dropout_rate: f64,
    /// Class-aware branch (coarse T-CAS and definite-phase pooling).
    pub use_cad: bool,
    /// Temporal attention branch (action-ness).
    pub use_tea: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 2048,
            hidden_dim: 1024,
            num_classes: 20,
            snippets_per_video: 500,
            conv_kernel: 3,
            dropout_rate: 0.7,
            use_cad: true,
            use_tea: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_classes", self.num_classes),
            ("snippets_per_video", self.snippets_per_video),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(TensorError::arg(
                    "model_config",
                    format!("{name} must be positive"),
                ));
            }
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(TensorError::arg(
                "model_config",
                format!("conv_kernel {} must be odd", self.conv_kernel),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TensorError::arg(
                "model_config",
                format!("dropout_rate {} outside [0, 1)", self.dropout_rate),
            ));
        }
        Ok(())
    }

    /// Foreground classes plus background.
    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background_index(&self) -> usize {
        self.num_classes
    }
}

pub mod names {
    pub const EMBED_A_W: &str = "cad.embed.w";
    pub const EMBED_A_B: &str = "cad.embed.b";
    pub const COARSE_W: &str = "cad.coarse.w";
    pub const COARSE_B: &str = "cad.coarse.b";
    pub const ALPHA: &str = "cad.alpha";
    pub const EMBED_E_W: &str = "tea.embed.w";
    pub const EMBED_E_B: &str = "tea.embed.b";
    pub const QUERY_W: &str = "tea.query.w";
    pub const QUERY_B: &str = "tea.query.b";
    pub const KEY_W: &str = "tea.key.w";
    pub const KEY_B: &str = "tea.key.b";
    pub const VALUE_W: &str = "tea.value.w";
    pub const VALUE_B: &str = "tea.value.b";
    pub const BETA: &str = "tea.beta";
    pub const TEMP_W: &str = "tea.cls.w";
    pub const TEMP_B: &str = "tea.cls.b";
    pub const CLS_W: &str = "fuse.cls.w";
    pub const CLS_B: &str = "fuse.cls.b";
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S = f32> {
    entries: Vec<(String, Tensor<S>)>,
}

/// `(name, shape)` of every parameter the config needs, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    use names::*;
    let (f, d, c1, k) = (
        cfg.feature_dim,
        cfg.hidden_dim,
        cfg.num_outputs(),
        cfg.conv_kernel,
    );
    let mut out = vec![(EMBED_A_W, vec![k, f, d]), (EMBED_A_B, vec![d])];
    if cfg.use_cad {
        out.extend([
            (COARSE_W, vec![k, f, c1]),
            (COARSE_B, vec![c1]),
            (ALPHA, vec![]),
        ]);
    }
    if cfg.use_tea {
        out.extend([
            (EMBED_E_W, vec![k, f, d]),
            (EMBED_E_B, vec![d]),
            (QUERY_W, vec![1, d, d]),
            (QUERY_B, vec![d]),
            (KEY_W, vec![1, d, d]),
            (KEY_B, vec![d]),
            (VALUE_W, vec![1, d, d]),
            (VALUE_B, vec![d]),
            (BETA, vec![]),
            (TEMP_W, vec![1, d, cfg.num_classes]),
            (TEMP_B, vec![cfg.num_classes]),
        ]);
    }
    let fused = if cfg.use_tea { 2 * d } else { d };
    out.extend([(CLS_W, vec![1, fused, c1]), (CLS_B, vec![c1])]);
    out
}

impl<S: Scalar> Params<S> {
    /// Conv kernels drawn from `U(-1/sqrt(K*Cin), 1/sqrt(K*Cin))`; biases and the residual
    /// gates start at zero.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let entries = param_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 3 {
                    let bound = 1.0 / ((shape[0] * shape[1]) as f64).sqrt();
                    let dist = Uniform::new(-bound, bound).expect("finite bound");
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
                    Tensor::new(shape, data).expect("layout shape")
                } else {
                    Tensor::zeros(&shape)
                };
                (name.to_string(), t)
            })
            .collect();
        Params { entries }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Self {
        Params { entries }
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<(), TensorError> {
        let layout = param_layout(cfg);
        if layout.len() != self.entries.len() {
            return Err(TensorError::shape(
                "params",
                format!(
                    "expected {} tensors, found {}",
                    layout.len(),
                    self.entries.len()
                ),
            ));
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(&self.entries) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(TensorError::shape(
                    "params",
                    format!(
                        "expected {name} {:?}, found {have_name} {:?}",
                        shape,
                        t.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, ts: Vec<Tensor<S>>) {
        for ((_, slot), t) in self.entries.iter_mut().zip(ts) {
            *slot = t;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Records every tensor on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter handles on one graph.
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    /// Handles for parameters already recorded on a graph, in layout order.
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| TensorError::arg("params", format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    fn conv(
        &self,
        g: &mut Graph<impl Scalar>,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var, TensorError> {
        g.conv1d(x, self.var(w)?, self.var(b)?)
    }
}

pub enum Mode<'a, R> {
    Train(&'a mut R),
    Eval,
}

/// Class-aware branch outputs.
#[derive(Clone, Copy, Debug)]
pub struct CadVars {
    pub s_coarse: Var,
    pub x_a: Var,
    pub m_def: Var,
    pub e_a: Var,
}

/// Temporal attention branch outputs.
#[derive(Clone, Copy, Debug)]
pub struct TeaVars {
    pub x_e: Var,
    pub m_e: Var,
    pub e_e: Var,
    pub s_temp: Var,
    pub a_ness: Var,
}

/// Handles to every intermediate of one forward pass. Branch fields are `None` when the
/// branch is disabled in the config.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub x_a: Var,
    pub e_a: Var,
    pub cad: Option<CadVars>,
    pub tea: Option<TeaVars>,
    pub s_final: Var,
    /// Action-ness. Without the attention branch this is `1 - P(background)` from the
    /// final T-CAS.
    pub a_ness: Var,
    pub s_coarse_supp: Option<Var>,
    pub s_final_supp: Var,
}

/// Coarse definite-phase features: per class, the T-CAS weighted average of task features.
pub fn definite_phase_features<S: Scalar>(
    g: &mut Graph<S>,
    s_coarse: Var,
    x_a: Var,
) -> Result<Var, TensorError> {
    let st = g.transpose(s_coarse)?;
    let weighted = g.matmul(st, x_a)?;
    let mass = g.sum_axis(s_coarse, 0)?;
    let inv = g.recip(mass)?;
    g.mul_rows(weighted, inv)
}

pub fn cad_forward<S: Scalar>(g: &mut Graph<S>, x: Var, p: &Bound) -> Result<CadVars, TensorError> {
    use names::*;
    if g.shape(x).first() == Some(&0) {
        return Err(TensorError::arg("cad_forward", "empty snippet sequence"));
    }
    let logits = p.conv(g, x, COARSE_W, COARSE_B)?;
    let s_coarse = g.softmax(logits, 1)?;
    let pre = p.conv(g, x, EMBED_A_W, EMBED_A_B)?;
    let x_a = g.relu(pre)?;
    let m_def = definite_phase_features(g, s_coarse, x_a)?;
    let global = g.matmul(s_coarse, m_def)?;
    let gated = g.scale_by(global, p.var(ALPHA)?)?;
    let e_a = g.add(gated, x_a)?;
    Ok(CadVars {
        s_coarse,
        x_a,
        m_def,
        e_a,
    })
}

pub fn tea_forward<S: Scalar>(g: &mut Graph<S>, x: Var, p: &Bound) -> Result<TeaVars, TensorError> {
    use names::*;
    let pre = p.conv(g, x, EMBED_E_W, EMBED_E_B)?;
    let x_e = g.relu(pre)?;
    let q = p.conv(g, x_e, QUERY_W, QUERY_B)?;
    let k = p.conv(g, x_e, KEY_W, KEY_B)?;
    let v = p.conv(g, x_e, VALUE_W, VALUE_B)?;
    // logits[ti, tj] = q[ti] . k[tj]; each column tj is normalised over ti
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let m_e = g.softmax(logits, 0)?;
    // attended[tj] = sum_ti m_e[ti, tj] * v[ti]
    let mt = g.transpose(m_e)?;
    let attended = g.matmul(mt, v)?;
    let gated = g.scale_by(attended, p.var(BETA)?)?;
    let e_e = g.add(gated, x_e)?;
    let s_temp = p.conv(g, e_e, TEMP_W, TEMP_B)?;
    let pooled = g.mean_axis(s_temp, 1)?;
    let a_ness = g.sigmoid(pooled)?;
    Ok(TeaVars {
        x_e,
        m_e,
        e_e,
        s_temp,
        a_ness,
    })
}

/// Concatenates the branch features and classifies each snippet into `C + 1` probabilities.
pub fn fuse_and_classify<S: Scalar>(
    g: &mut Graph<S>,
    e_a: Var,
    e_e: Option<Var>,
    p: &Bound,
) -> Result<Var, TensorError> {
    let fused = match e_e {
        Some(e_e) => {
            if g.shape(e_a) != g.shape(e_e) {
                return Err(TensorError::shape(
                    "fuse_and_classify",
                    format!("{:?} vs {:?}", g.shape(e_a), g.shape(e_e)),
                ));
            }
            g.concat_cols(e_a, e_e)?
        }
        None => e_a,
    };
    let logits = p.conv(g, fused, names::CLS_W, names::CLS_B)?;
    g.softmax(logits, 1)
}

/// Scales every snippet's class scores by its action-ness.
pub fn suppress<S: Scalar>(g: &mut Graph<S>, s: Var, a_ness: Var) -> Result<Var, TensorError> {
    g.mul_rows(s, a_ness)
}

pub fn forward<S: Scalar, R: Rng>(
    g: &mut Graph<S>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    mode: Mode<'_, R>,
) -> Result<ForwardVars, TensorError> {
    let (t, f) = g
        .value(x)
        .dims2()
        .map_err(|_| TensorError::shape("forward", format!("input {:?}", g.shape(x))))?;
    if f != cfg.feature_dim {
        return Err(TensorError::shape(
            "forward",
            format!("feature width {} but model expects {}", f, cfg.feature_dim),
        ));
    }
    if t == 0 {
        return Err(TensorError::arg("forward", "empty snippet sequence"));
    }
    let x = match mode {
        Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
            let keep = 1.0 - cfg.dropout_rate;
            let dist = Bernoulli::new(keep).expect("keep probability in (0, 1]");
            let scale = S::lit(1.0 / keep);
            let mask = (0..t * f)
                .map(|_| if dist.sample(rng) { scale } else { S::zero() })
                .collect();
            g.mul_const(x, Tensor::matrix(t, f, mask)?)?
        }
        _ => x,
    };

    let cad = if cfg.use_cad {
        Some(cad_forward(g, x, p)?)
    } else {
        None
    };
    let (x_a, e_a) = match cad {
        Some(c) => (c.x_a, c.e_a),
        None => {
            let pre = p.conv(g, x, names::EMBED_A_W, names::EMBED_A_B)?;
            let x_a = g.relu(pre)?;
            (x_a, x_a)
        }
    };
    let tea = if cfg.use_tea {
        Some(tea_forward(g, x, p)?)
    } else {
        None
    };
    let s_final = fuse_and_classify(g, e_a, tea.map(|t| t.e_e), p)?;
    let a_ness = match tea {
        Some(t) => t.a_ness,
        None => {
            let bg = g.column(s_final, cfg.background_index())?;
            g.affine(bg, -S::one(), S::one())?
        }
    };
    let s_coarse_supp = match cad {
        Some(c) => Some(suppress(g, c.s_coarse, a_ness)?),
        None => None,
    };
    let s_final_supp = suppress(g, s_final, a_ness)?;
    Ok(ForwardVars {
        x_a,
        e_a,
        cad,
        tea,
        s_final,
        a_ness,
        s_coarse_supp,
        s_final_supp,
    })
}

/// Plain-tensor snapshot of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<S = f32> {
    pub s_coarse: Option<Tensor<S>>,
    pub x_a: Tensor<S>,
    pub m_def: Option<Tensor<S>>,
    pub e_a: Tensor<S>,
    pub x_e: Option<Tensor<S>>,
    pub m_e: Option<Tensor<S>>,
    pub e_e: Option<Tensor<S>>,
    pub s_temp: Option<Tensor<S>>,
    pub a_ness: Tensor<S>,
    pub s_final: Tensor<S>,
    pub s_coarse_supp: Option<Tensor<S>>,
    pub s_final_supp: Tensor<S>,
}

impl ForwardVars {
    pub fn snapshot<S: Scalar>(&self, g: &Graph<S>) -> ModelOutputs<S> {
        let v = |x: Var| g.value(x).clone();
        ModelOutputs {
            s_coarse: self.cad.map(|c| v(c.s_coarse)),
            x_a: v(self.x_a),
            m_def: self.cad.map(|c| v(c.m_def)),
            e_a: v(self.e_a),
            x_e: self.tea.map(|t| v(t.x_e)),
            m_e: self.tea.map(|t| v(t.m_e)),
            e_e: self.tea.map(|t| v(t.e_e)),
            s_temp: self.tea.map(|t| v(t.s_temp)),
            a_ness: v(self.a_ness),
            s_final: v(self.s_final),
            s_coarse_supp: self.s_coarse_supp.map(v),
            s_final_supp: v(self.s_final_supp),
        }
    }
}

/// Eval-mode forward pass on a feature matrix, returning plain tensors.
pub fn infer<S: Scalar>(
    x: &Tensor<S>,
    cfg: &ModelConfig,
    params: &Params<S>,
) -> Result<ModelOutputs<S>, TensorError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = forward::<S, rand_xoshiro::Xoshiro256StarStar>(&mut g, xv, cfg, &p, Mode::Eval)?;
    Ok(out.snapshot(&g))
}
