//! Central finite-difference checking of tape gradients.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::losses::{
    casl_hinge, casl_loss, cosine_distance, guide_loss, norm_loss, suppressed_loss, topk_mil_loss,
    total_loss, unsuppressed_loss, LossInput, LossSwitches, LossWeights, VideoLabel,
};
use crate::model::{
    forward, names, param_layout, suppress, Bound, ForwardVars, Mode, ModelConfig, Params,
};
use crate::tensor::{Tensor, TensorError};
use crate::{seeded_rng, SeededRng};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink (top-k tie, hinge, relu at zero), left out of the max.
    pub excluded: usize,
}

/// Relative slope disagreement above which a coordinate counts as a kink.
const KINK_TOL: f64 = 1e-3;

/// Compares tape gradients of `f` with central differences `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// `f` receives a fresh graph and the parameter handles, and returns the scalar loss.
/// A coordinate whose forward and backward one-sided slopes disagree by more than a
/// small relative margin is treated as non-differentiable and excluded.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_with(f, params, eps, None)
}

/// Variant of [`grad_check`] that corrupts one op's backward rule; used to prove the
/// checker notices broken gradients.
#[doc(hidden)]
pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    fault: Option<&'static str>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_grad_fault(op);
    }
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let f0 = g.value(loss).item();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
    };
    for pi in 0..work.len() {
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let fwd = (fp - f0) / eps;
            let bwd = (f0 - fm) / eps;
            if (fwd - bwd).abs() > KINK_TOL * (1.0f64).max(fwd.abs()).max(bwd.abs()) {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Tolerance for ops and compositions that are smooth everywhere.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Tolerance for compositions containing top-k selection or hinges, checked off kinks.
pub const KINKED_TOL: f64 = 1e-3;
const SUITE_EPS: f64 = 1e-5;

/// One line of the suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: Result<GradCheckReport, TensorError>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.max_rel_err < self.tolerance && r.checked > 0)
    }
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    params: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let p = g.mul_const(y, w)?;
    g.sum(p)
}

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

/// Values with magnitude in `[0.2, 1]`, away from the relu/abs kink.
fn off_kink(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| {
        if v < 0.0 {
            v * 0.8 - 0.2
        } else {
            v * 0.8 + 0.2
        }
    })
}

fn prob_rows(g: &mut Graph<f64>, logits: Var) -> Result<Var, TensorError> {
    g.softmax(logits, 1)
}

fn op(name: &'static str, params: Vec<Tensor<f64>>, f: CaseFn) -> Case {
    Case {
        name,
        tolerance: SMOOTH_TOL,
        params,
        f,
    }
}

fn kinked(name: &'static str, params: Vec<Tensor<f64>>, f: CaseFn) -> Case {
    Case {
        name,
        tolerance: KINKED_TOL,
        params,
        f,
    }
}

/// Tiny model used by the module- and loss-level cases: `T = 6`, input width 4, `D = 5`,
/// `C = 2`.
fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        hidden_dim: 5,
        num_classes: 2,
        snippets_per_video: 6,
        conv_kernel: 3,
        dropout_rate: 0.0,
        use_cad: true,
        use_tea: true,
    }
}

fn model_params(cfg: &ModelConfig, rng: &mut SeededRng) -> Vec<Tensor<f64>> {
    let mut p: Params<f64> = Params::init(cfg, rng);
    for name in [names::ALPHA, names::BETA] {
        if let Some(t) = p.get_mut(name) {
            *t = Tensor::scalar(rng.random_range(0.3..0.9));
        }
    }
    p.tensors()
}

fn bind_model(cfg: &ModelConfig, v: &[Var]) -> Bound {
    Bound::from_vars(
        param_layout(cfg)
            .into_iter()
            .zip(v)
            .map(|((n, _), &var)| (n.to_string(), var))
            .collect(),
    )
}

fn model_forward(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    v: &[Var],
    x: &Tensor<f64>,
) -> Result<ForwardVars, TensorError> {
    let p = bind_model(cfg, v);
    let xv = g.constant(x.clone());
    forward::<f64, SeededRng>(g, xv, cfg, &p, Mode::Eval)
}

fn cases(rng: &mut SeededRng) -> Vec<Case> {
    let mut out = vec![
        op(
            "matmul",
            vec![random(rng, &[3, 4]), random(rng, &[4, 2])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "transpose",
            vec![random(rng, &[2, 3])],
            Box::new(|g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "add",
            vec![random(rng, &[2, 3]), random(rng, &[2, 3])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "add_n",
            vec![random(rng, &[4]), random(rng, &[4])],
            Box::new(|g, v| {
                let y = g.add_n(&[v[0], v[1], v[0]])?;
                let y = g.mul(y, v[1])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "sub",
            vec![random(rng, &[4]), random(rng, &[4])],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "mul",
            vec![random(rng, &[5]), random(rng, &[5])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "div",
            vec![random(rng, &[4]), random(rng, &[4])],
            Box::new(|g, v| {
                let sq = g.mul(v[1], v[1])?;
                let d = g.affine(sq, 1.0, 0.5)?;
                let y = g.div(v[0], d)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "scale_by",
            vec![random(rng, &[2, 3]), random(rng, &[])],
            Box::new(|g, v| {
                let y = g.scale_by(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "affine",
            vec![random(rng, &[4])],
            Box::new(|g, v| {
                let y = g.affine(v[0], -1.7, 0.4)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "mul_const",
            vec![random(rng, &[2, 2])],
            Box::new(|g, v| {
                let c = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25])?;
                let y = g.mul_const(v[0], c)?;
                let y = g.mul(y, v[0])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "mul_rows",
            vec![random(rng, &[3, 2]), random(rng, &[3])],
            Box::new(|g, v| {
                let y = g.mul_rows(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "relu",
            vec![off_kink(rng, &[6])],
            Box::new(|g, v| {
                let y = g.relu(v[0])?;
                let y = g.mul(y, v[0])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "sigmoid",
            vec![random(rng, &[5])],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "abs",
            vec![off_kink(rng, &[6])],
            Box::new(|g, v| {
                let y = g.abs(v[0])?;
                let y = g.mul(y, v[0])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "sqrt",
            vec![random(rng, &[4])],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let p = g.affine(sq, 1.0, 0.2)?;
                let y = g.sqrt(p)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "recip",
            vec![random(rng, &[4])],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let p = g.affine(sq, 1.0, 0.3)?;
                let y = g.recip(p)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "softmax_axis0",
            vec![random(rng, &[4, 3])],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 0)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "softmax_axis1",
            vec![random(rng, &[4, 3])],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "softmax_vector",
            vec![random(rng, &[5])],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 0)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "log_softmax",
            vec![random(rng, &[5])],
            Box::new(|g, v| {
                let y = g.log_softmax(v[0])?;
                weighted_sum(g, y)
            }),
        ),
        kinked(
            "topk_mean",
            vec![random(rng, &[6])],
            Box::new(|g, v| {
                let y = g.topk_mean(v[0], 2)?;
                let z = g.mul(y, y)?;
                g.add(z, y)
            }),
        ),
        kinked(
            "topk_mean_cols",
            vec![random(rng, &[6, 3])],
            Box::new(|g, v| {
                let y = g.topk_mean_cols(v[0], 2)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "conv1d",
            vec![
                random(rng, &[6, 3]),
                random(rng, &[3, 3, 2]),
                random(rng, &[2]),
            ],
            Box::new(|g, v| {
                let y = g.conv1d(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "conv1d_pointwise",
            vec![
                random(rng, &[5, 3]),
                random(rng, &[1, 3, 4]),
                random(rng, &[4]),
            ],
            Box::new(|g, v| {
                let y = g.conv1d(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "concat_cols",
            vec![random(rng, &[3, 2]), random(rng, &[3, 1])],
            Box::new(|g, v| {
                let c = g.concat_cols(v[0], v[1])?;
                let y = g.mul(c, c)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "column",
            vec![random(rng, &[3, 3])],
            Box::new(|g, v| {
                let a = g.column(v[0], 2)?;
                let b = g.column(v[0], 0)?;
                let y = g.mul(a, b)?;
                weighted_sum(g, y)
            }),
        ),
        op(
            "sum",
            vec![random(rng, &[2, 3])],
            Box::new(|g, v| {
                let s = g.sum(v[0])?;
                g.mul(s, s)
            }),
        ),
        op(
            "mean",
            vec![random(rng, &[2, 3])],
            Box::new(|g, v| {
                let s = g.mean(v[0])?;
                g.mul(s, s)
            }),
        ),
        op(
            "sum_axis",
            vec![random(rng, &[3, 4])],
            Box::new(|g, v| {
                let a = g.sum_axis(v[0], 0)?;
                let b = g.sum_axis(v[0], 1)?;
                let a = weighted_sum(g, a)?;
                let b = weighted_sum(g, b)?;
                g.mul(a, b)
            }),
        ),
        op(
            "mean_axis",
            vec![random(rng, &[3, 4])],
            Box::new(|g, v| {
                let a = g.mean_axis(v[0], 0)?;
                let b = g.mean_axis(v[0], 1)?;
                let a = weighted_sum(g, a)?;
                let b = weighted_sum(g, b)?;
                g.mul(a, b)
            }),
        ),
        op(
            "reshape",
            vec![random(rng, &[2, 3])],
            Box::new(|g, v| {
                let r = g.reshape(v[0], &[3, 2])?;
                let y = g.matmul(v[0], r)?;
                weighted_sum(g, y)
            }),
        ),
    ];

    let cfg = tiny_model();
    let t = cfg.snippets_per_video;
    let c1 = cfg.num_outputs();
    let x = off_kink(rng, &[t, cfg.feature_dim]);
    let x2 = off_kink(rng, &[t, cfg.feature_dim]);
    let y_full = [0.5, 0.0, 0.5];
    let y_fg = [1.0, 0.0, 0.0];

    let (m, xm) = (cfg.clone(), x.clone());
    out.push(kinked(
        "cad_forward",
        model_params(&cfg, rng),
        Box::new(move |g, v| {
            let f = model_forward(g, &m, v, &xm)?;
            let cad = f.cad.expect("branch enabled");
            let a = weighted_sum(g, cad.e_a)?;
            let b = weighted_sum(g, cad.m_def)?;
            g.add(a, b)
        }),
    ));
    let (m, xm) = (cfg.clone(), x.clone());
    out.push(kinked(
        "tea_forward",
        model_params(&cfg, rng),
        Box::new(move |g, v| {
            let f = model_forward(g, &m, v, &xm)?;
            let tea = f.tea.expect("branch enabled");
            let a = weighted_sum(g, tea.e_e)?;
            let b = weighted_sum(g, tea.a_ness)?;
            g.add(a, b)
        }),
    ));
    let (m, xm) = (cfg.clone(), x.clone());
    out.push(kinked(
        "model_forward",
        model_params(&cfg, rng),
        Box::new(move |g, v| {
            let f = model_forward(g, &m, v, &xm)?;
            let a = weighted_sum(g, f.s_final_supp)?;
            let b = weighted_sum(g, f.s_coarse_supp.expect("branch enabled"))?;
            g.add(a, b)
        }),
    ));

    out.push(kinked(
        "topk_mil_loss",
        vec![random(rng, &[t, c1])],
        Box::new(move |g, v| {
            let s = prob_rows(g, v[0])?;
            topk_mil_loss(g, s, &y_full, 2)
        }),
    ));
    out.push(kinked(
        "suppressed_loss",
        vec![
            random(rng, &[t, c1]),
            random(rng, &[t, c1]),
            random(rng, &[t]),
        ],
        Box::new(move |g, v| {
            let a = g.sigmoid(v[2])?;
            let s = prob_rows(g, v[0])?;
            let sc = prob_rows(g, v[1])?;
            let s = suppress(g, s, a)?;
            let sc = suppress(g, sc, a)?;
            suppressed_loss(g, s, sc, &y_fg, 2, 0.8)
        }),
    ));
    out.push(kinked(
        "unsuppressed_loss",
        vec![random(rng, &[t, c1]), random(rng, &[t, c1 - 1])],
        Box::new(move |g, v| {
            let s = prob_rows(g, v[0])?;
            unsuppressed_loss(g, s, v[1], &y_full, &y_fg, 2, 0.7)
        }),
    ));
    out.push(op(
        "cosine_distance",
        vec![random(rng, &[1, 5]), random(rng, &[1, 5])],
        Box::new(|g, v| cosine_distance(g, v[0], v[1])),
    ));
    out.push(kinked(
        "casl_hinge",
        vec![
            random(rng, &[1, 5]),
            random(rng, &[1, 5]),
            random(rng, &[1, 5]),
            random(rng, &[1, 5]),
        ],
        Box::new(|g, v| casl_hinge(g, v[0], v[1], v[2], v[3], 2.0)),
    ));
    out.push(kinked(
        "casl_loss",
        vec![
            random(rng, &[t, 5]),
            random(rng, &[t, c1]),
            random(rng, &[t, 5]),
            random(rng, &[t, c1]),
        ],
        Box::new(|g, v| {
            let sm = prob_rows(g, v[1])?;
            let sn = prob_rows(g, v[3])?;
            casl_loss(g, v[0], sm, v[2], sn, &[0, 1], 2.0)
        }),
    ));
    out.push(kinked(
        "norm_loss",
        vec![random(rng, &[t])],
        Box::new(|g, v| {
            let a = g.sigmoid(v[0])?;
            norm_loss(g, a)
        }),
    ));
    out.push(kinked(
        "guide_loss",
        vec![random(rng, &[t]), random(rng, &[t, c1])],
        Box::new(|g, v| {
            let a = g.sigmoid(v[0])?;
            let s = prob_rows(g, v[1])?;
            guide_loss(g, a, s)
        }),
    ));
    let m = cfg.clone();
    let labels = [
        VideoLabel::from_classes(&[0], cfg.num_classes).expect("label"),
        VideoLabel::from_classes(&[0, 1], cfg.num_classes).expect("label"),
    ];
    out.push(kinked(
        "total_loss",
        model_params(&cfg, rng),
        Box::new(move |g, v| {
            let fa = model_forward(g, &m, v, &x)?;
            let fb = model_forward(g, &m, v, &x2)?;
            let inputs = [
                LossInput {
                    vars: &fa,
                    label: &labels[0],
                },
                LossInput {
                    vars: &fb,
                    label: &labels[1],
                },
            ];
            let w = LossWeights {
                topk_divisor: 3,
                ..LossWeights::default()
            };
            let (l, _) = total_loss(g, &inputs, &[(0, 1, vec![0])], &w, &LossSwitches::all())?;
            Ok(l)
        }),
    ));
    out
}

/// Names of every suite case, in run order.
pub fn suite_case_names() -> Vec<&'static str> {
    cases(&mut seeded_rng(0)).iter().map(|c| c.name).collect()
}

/// Checks every op, module and loss at tiny dimensions in `f64`. With `fault`, the named
/// op's backward rule is corrupted in every case.
pub fn run_suite(seed: u64, fault: Option<&'static str>) -> Vec<SuiteResult> {
    let mut rng = seeded_rng(seed);
    cases(&mut rng)
        .into_iter()
        .map(|c| SuiteResult {
            name: c.name,
            tolerance: c.tolerance,
            report: grad_check_with(&c.f, &c.params, SUITE_EPS, fault),
        })
        .collect()
}
