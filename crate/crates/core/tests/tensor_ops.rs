use jcdnet::gradcheck::grad_check;
use jcdnet::{Graph, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn rand_tensor(rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at2(i, p) * b.at2(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (t, cin) = x.dims2().unwrap();
    let (kw, cout) = (w.shape()[0], w.shape()[2]);
    let pad = (kw / 2) as isize;
    let mut out = vec![0.0; t * cout];
    for ti in 0..t {
        for co in 0..cout {
            let mut s = b.data()[co];
            for k in 0..kw {
                let src = ti as isize + k as isize - pad;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for ci in 0..cin {
                    s += x.at2(src as usize, ci) * w.data()[(k * cin + ci) * cout + co];
                }
            }
            out[ti * cout + co] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_selector() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sel = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
    let col = g.constant(Tensor::from_rows(&[&[5.0], &[7.0]]));
    let p = g.matmul(sel, col).unwrap();
    assert_eq!(g.value(p).data(), &[5.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(11);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(p).data(), naive_matmul(&a, &b).as_slice());
    }
}

#[test]
fn matmul_shape_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-12);

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
}

#[test]
fn topk_mean_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![4.0, 1.0, 3.0, 2.0]));
    let m = g.topk_mean(x, 2).unwrap();
    assert_eq!(g.value(m).item(), 3.5);
    let full = g.topk_mean(x, 4).unwrap();
    assert_eq!(g.value(full).item(), 2.5);
    assert!(matches!(
        g.topk_mean(x, 0),
        Err(TensorError::Argument { .. })
    ));
    assert!(matches!(
        g.topk_mean(x, 5),
        Err(TensorError::Argument { .. })
    ));

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![2.0, 2.0, 1.0]));
    let m = g.topk_mean(x, 1).unwrap();
    assert_eq!(g.value(m).item(), 2.0);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]));
    let w = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let x = g.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]));
    let w = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

    let w_even = g.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(matches!(
        g.conv1d(x, w_even, b),
        Err(TensorError::Argument { .. })
    ));
}

#[test]
fn conv1d_matches_nested_loops() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    for kw in [1, 3, 5] {
        let x = rand_tensor(&mut rng, &[7, 3]);
        let w = rand_tensor(&mut rng, &[kw, 3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut g = Graph::<f64>::new();
        let (vx, vw, vb) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv1d(vx, vw, vb).unwrap();
        let oracle = naive_conv(&x, &w, &b);
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "K={kw}: {diff}");
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::scalar(3.0));
    let l = g.mul(w, w).unwrap();
    assert_eq!(g.backward(l).unwrap().get(w).unwrap().item(), 6.0);

    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::scalar(2.0));
    let b = g.param(Tensor::scalar(5.0));
    let l = g.mul(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(a).unwrap().item(), 5.0);
    assert_eq!(grads.get(b).unwrap().item(), 2.0);

    // fan-out: d(x + x)/dx = 2
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.25));
    let l = g.add(x, x).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().item(), 2.0);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::Argument { .. })));
}

#[test]
fn non_finite_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(
        g.recip(x),
        Err(TensorError::NonFinite { op: "recip" })
    ));
}

type OpCase = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    // fixed non-uniform weights so that sum-preserving ops still have non-trivial gradients
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    let p = g.mul_const(y, w)?;
    g.sum(p)
}

/// Every differentiable op composed with a fixed weighted sum, checked on small random inputs.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpCase)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("transpose", vec![vec![2, 3]], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y)
        }),
        ("mul_div", vec![vec![4], vec![4]], |g, v| {
            let sq = g.mul(v[1], v[1])?;
            let d = g.affine(sq, 1.0, 0.5)?;
            let y = g.div(v[0], d)?;
            weighted_sum(g, y)
        }),
        ("sub_add_n", vec![vec![3], vec![3]], |g, v| {
            let s = g.sub(v[0], v[1])?;
            let y = g.add_n(&[s, v[0], s])?;
            weighted_sum(g, y)
        }),
        ("scale_by", vec![vec![2, 3], vec![]], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul_rows", vec![vec![3, 2], vec![3]], |g, v| {
            let y = g.mul_rows(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![vec![5]], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        ("sqrt_recip", vec![vec![4]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let p = g.affine(sq, 1.0, 0.2)?;
            let r = g.sqrt(p)?;
            let y = g.recip(r)?;
            weighted_sum(g, y)
        }),
        ("softmax_axis0", vec![vec![4, 3]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y)
        }),
        ("softmax_axis1", vec![vec![4, 3]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y)
        }),
        ("log_softmax", vec![vec![5]], |g, v| {
            let y = g.log_softmax(v[0])?;
            weighted_sum(g, y)
        }),
        (
            "conv1d",
            vec![vec![5, 3], vec![3, 3, 2], vec![2]],
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            },
        ),
        ("concat_column", vec![vec![3, 2], vec![3, 1]], |g, v| {
            let c = g.concat_cols(v[0], v[1])?;
            let y = g.column(c, 2)?;
            let z = g.column(c, 0)?;
            let y = g.mul(y, z)?;
            weighted_sum(g, y)
        }),
        ("sum_mean_axis", vec![vec![3, 4]], |g, v| {
            let a = g.sum_axis(v[0], 0)?;
            let b = g.mean_axis(v[0], 1)?;
            let a = weighted_sum(g, a)?;
            let b = weighted_sum(g, b)?;
            let ab = g.mul(a, b)?;
            let m = g.mean(v[0])?;
            g.add(ab, m)
        }),
        ("reshape", vec![vec![2, 3]], |g, v| {
            let r = g.reshape(v[0], &[3, 2])?;
            let y = g.matmul(v[0], r)?;
            weighted_sum(g, y)
        }),
        ("topk_mean_cols", vec![vec![6, 3]], |g, v| {
            let y = g.topk_mean_cols(v[0], 2)?;
            weighted_sum(g, y)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2024);
    for (name, shapes, f) in op_cases() {
        for _ in 0..5 {
            let params: Vec<Tensor<f64>> =
                shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = grad_check(f, &params, 1e-5).unwrap();
            assert!(r.max_rel_err < 1e-5, "{name}: {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_lanes_sum_to_one(
        vals in proptest::collection::vec(-50.0f32..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let sums = g.sum_axis(s, axis).unwrap();
        for &v in g.value(sums).data() {
            prop_assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_and_abs_grad_check_off_kink(vals in proptest::collection::vec(0.05f64..2.0, 4), signs in proptest::collection::vec(any::<bool>(), 4)) {
        let data: Vec<f64> = vals.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let p = vec![Tensor::vector(data)];
        let r = grad_check(|g, v| {
            let a = g.relu(v[0])?;
            let b = g.abs(v[0])?;
            let y = g.mul(a, b)?;
            let z = g.add(y, b)?;
            g.sum(z)
        }, &p, 1e-5).unwrap();
        prop_assert!(r.max_rel_err < 1e-5);
    }
}
