//! Raw slice kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Same-padded temporal cross-correlation.
///
/// `x` is `t×cin`, `w` is `kw×cin×cout`, `b` is `cout`; output is `t×cout`.
pub(crate) fn conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    t: usize,
    cin: usize,
    cout: usize,
    kw: usize,
) -> Vec<S> {
    let pad = kw / 2;
    let mut out = Vec::with_capacity(t * cout);
    for _ in 0..t {
        out.extend_from_slice(b);
    }
    for ti in 0..t {
        let orow = &mut out[ti * cout..(ti + 1) * cout];
        for k in 0..kw {
            let src = ti + k;
            if src < pad || src - pad >= t {
                continue;
            }
            let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
            let wk = &w[k * cin * cout..(k + 1) * cin * cout];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == S::zero() {
                    continue;
                }
                let wrow = &wk[ci * cout..(ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

/// Accumulates gradients of [`conv1d_forward`] given the upstream gradient `g` (`t×cout`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    g: &[S],
    t: usize,
    cin: usize,
    cout: usize,
    kw: usize,
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let pad = kw / 2;
    if let Some(gb) = gb {
        for ti in 0..t {
            for (acc, &gv) in gb.iter_mut().zip(&g[ti * cout..(ti + 1) * cout]) {
                *acc += gv;
            }
        }
    }
    if let Some(gw) = gw {
        for ti in 0..t {
            let grow = &g[ti * cout..(ti + 1) * cout];
            for k in 0..kw {
                let src = ti + k;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
                let gwk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    for (acc, &gv) in gwk[ci * cout..(ci + 1) * cout].iter_mut().zip(grow) {
                        *acc += xv * gv;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for ti in 0..t {
            let grow = &g[ti * cout..(ti + 1) * cout];
            for k in 0..kw {
                let src = ti + k;
                if src < pad || src - pad >= t {
                    continue;
                }
                let wk = &w[k * cin * cout..(k + 1) * cin * cout];
                let gxrow = &mut gx[(src - pad) * cin..(src - pad + 1) * cin];
                for (ci, acc) in gxrow.iter_mut().enumerate() {
                    let wrow = &wk[ci * cout..(ci + 1) * cout];
                    let mut s = S::zero();
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        s += wv * gv;
                    }
                    *acc += s;
                }
            }
        }
    }
}

/// Indices of the `k` largest entries, ties broken by lowest index.
pub(crate) fn topk_indices<S: Scalar>(x: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}
