mod common;

use common::{m_def_oracle, random_params, random_tensor, small_config, with_zero_gates};
use jcdnet::model::{infer, names, ModelOutputs};
use jcdnet::{seeded_rng, Tensor};
use rand::seq::SliceRandom;

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).iter().sum()).collect()
}

fn check_invariants(o: &ModelOutputs<f64>) {
    for s in row_sums(o.s_coarse.as_ref().unwrap())
        .into_iter()
        .chain(row_sums(&o.s_final))
    {
        assert!((s - 1.0).abs() <= 1e-5);
    }
    let m_e = o.m_e.as_ref().unwrap();
    let t = m_e.shape()[0];
    for j in 0..t {
        let col: f64 = (0..t).map(|i| m_e.at2(i, j)).sum();
        assert!((col - 1.0).abs() <= 1e-5);
    }
    assert!(o.a_ness.data().iter().all(|&a| a > 0.0 && a < 1.0));
    for (supp, base) in [
        (
            o.s_coarse_supp.as_ref().unwrap(),
            o.s_coarse.as_ref().unwrap(),
        ),
        (&o.s_final_supp, &o.s_final),
    ] {
        let (r, c) = base.dims2().unwrap();
        for ti in 0..r {
            for ci in 0..c {
                assert_eq!(supp.at2(ti, ci), o.a_ness.data()[ti] * base.at2(ti, ci));
            }
        }
    }
}

#[test]
fn invariants_hold_on_random_inputs() {
    let mut rng = seeded_rng(21);
    for i in 0..30 {
        let cfg = small_config(7, 5, 4, 3, 3);
        let p = random_params(&cfg, i);
        let x = random_tensor(&mut rng, &[7, 5], -2.0, 2.0);
        check_invariants(&infer(&x, &cfg, &p).unwrap());
    }
}

#[test]
fn zero_gates_are_identities_on_random_inputs() {
    let mut rng = seeded_rng(22);
    for i in 0..30 {
        let cfg = small_config(6, 4, 5, 2, 3);
        let p = with_zero_gates(random_params(&cfg, i));
        let x = random_tensor(&mut rng, &[6, 4], -2.0, 2.0);
        let o = infer(&x, &cfg, &p).unwrap();
        assert_eq!(o.e_a, o.x_a);
        assert_eq!(o.e_e.unwrap(), o.x_e.unwrap());
    }
}

#[test]
fn definite_features_match_loop_oracle_and_stay_in_bounds() {
    let mut rng = seeded_rng(23);
    for i in 0..30 {
        let cfg = small_config(5, 3, 4, 2, 3);
        let p = random_params(&cfg, 100 + i);
        let x = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let o = infer(&x, &cfg, &p).unwrap();
        let m = o.m_def.as_ref().unwrap();
        let oracle = m_def_oracle(o.s_coarse.as_ref().unwrap(), &o.x_a);
        for (ci, row) in oracle.iter().enumerate() {
            for (di, &v) in row.iter().enumerate() {
                assert!((m.at2(ci, di) - v).abs() < 1e-6);
                let col = o.x_a.column(di);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(m.at2(ci, di) >= lo - 1e-12 && m.at2(ci, di) <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn pointwise_model_is_permutation_equivariant() {
    // with unit kernels every op except attention and pooling is per-snippet
    let cfg = small_config(6, 4, 3, 2, 1);
    let p = random_params(&cfg, 5);
    let mut rng = seeded_rng(6);
    let x = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let rows: Vec<f64> = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let xp = Tensor::matrix(6, 4, rows).unwrap();
    let (a, b) = (infer(&x, &cfg, &p).unwrap(), infer(&xp, &cfg, &p).unwrap());
    let close = |u: f64, v: f64| (u - v).abs() < 1e-10;
    for (new, &old) in perm.iter().enumerate() {
        assert!(close(a.a_ness.data()[old], b.a_ness.data()[new]));
        for c in 0..3 {
            assert!(close(a.s_final.at2(old, c), b.s_final.at2(new, c)));
        }
        for (new2, &old2) in perm.iter().enumerate() {
            let (ma, mb) = (a.m_e.as_ref().unwrap(), b.m_e.as_ref().unwrap());
            assert!(close(ma.at2(old, old2), mb.at2(new, new2)));
        }
    }
    assert!(a.m_def.unwrap().max_abs_diff(&b.m_def.unwrap()) < 1e-10);
}

#[test]
fn zero_attention_weights_give_uniform_map() {
    let cfg = small_config(5, 3, 4, 2, 3);
    let mut p = random_params(&cfg, 8);
    for n in [names::QUERY_W, names::QUERY_B] {
        for v in p.get_mut(n).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let x = random_tensor(&mut seeded_rng(9), &[5, 3], -1.0, 1.0);
    let o = infer(&x, &cfg, &p).unwrap();
    assert!(o
        .m_e
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn zero_temporal_scores_give_half_actionness() {
    let cfg = small_config(5, 3, 4, 2, 3);
    let mut p = random_params(&cfg, 10);
    for n in [names::TEMP_W, names::TEMP_B] {
        for v in p.get_mut(n).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let x = random_tensor(&mut seeded_rng(11), &[5, 3], -1.0, 1.0);
    let o = infer(&x, &cfg, &p).unwrap();
    assert!(o.a_ness.data().iter().all(|&a| a == 0.5));
}

#[test]
fn eval_forward_is_deterministic() {
    let cfg = small_config(8, 4, 3, 2, 3);
    let p = random_params(&cfg, 12);
    let x = random_tensor(&mut seeded_rng(13), &[8, 4], -1.0, 1.0);
    assert_eq!(infer(&x, &cfg, &p).unwrap(), infer(&x, &cfg, &p).unwrap());
}

#[test]
fn branch_flags_change_layout_and_outputs() {
    let mut cfg = small_config(6, 4, 3, 2, 3);
    cfg.use_tea = false;
    let p = random_params(&cfg, 14);
    assert!(p.get(names::BETA).is_none());
    let x = random_tensor(&mut seeded_rng(15), &[6, 4], -1.0, 1.0);
    let o = infer(&x, &cfg, &p).unwrap();
    assert!(o.m_e.is_none() && o.s_coarse.is_some());
    for t in 0..6 {
        assert!((o.a_ness.data()[t] - (1.0 - o.s_final.at2(t, 2))).abs() < 1e-15);
    }
    cfg.use_cad = false;
    let p = random_params(&cfg, 16);
    let o = infer(&x, &cfg, &p).unwrap();
    assert!(o.s_coarse.is_none() && o.s_coarse_supp.is_none());
    assert_eq!(o.e_a, o.x_a);
}
