//! Dense primitives and their vector-Jacobian products.
//!
//! Every reduction runs in ascending index order, so identical inputs give
//! bit-identical outputs. The leak and cache checks rely on this.

use std::cell::Cell;

use super::matrix::{BoolMask, Matrix, Scalar};
use crate::error::{Error, Result};

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

fn add_flops(n: usize) {
    FLOPS.with(|f| f.set(f.get() + n as u64));
}

/// Runs `f` and returns its result together with the multiply-adds executed
/// by matrix products and attention on the current thread.
pub fn count_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = FLOPS.with(Cell::get);
    let out = f();
    let after = FLOPS.with(Cell::get);
    (out, after - before)
}

/// `A · B`, accumulated in ascending `p` for every output element.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    add_flops(m * k * n);
    Ok(c)
}

/// `A · Bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            c[(i, j)] = dot(a.row(i), b.row(j));
        }
    }
    add_flops(a.rows() * a.cols() * b.rows());
    Ok(c)
}

/// `Aᵀ · B`.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let crow = c.row_mut(i);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    add_flops(k * m * n);
    Ok(c)
}

/// Gradients of `C = A · B` given `dC`.
pub fn matmul_vjp<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(Error::shape(
            "matmul_vjp",
            format!(
                "cotangent {:?} for {:?} x {:?}",
                dc.shape(),
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn check_vec_len(op: &'static str, what: &str, len: usize, want: usize) -> Result<()> {
    if len != want {
        return Err(Error::shape(
            op,
            format!("{what} has length {len}, expected {want}"),
        ));
    }
    Ok(())
}

struct RowStats<T> {
    mean: T,
    inv_std: T,
}

fn row_stats<T: Scalar>(x: &[T], eps: T) -> RowStats<T> {
    let n = T::from_usize(x.len()).expect("usize to float");
    let mean = x.iter().fold(T::zero(), |acc, &v| acc + v) / n;
    let var = x
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / n;
    RowStats {
        mean,
        inv_std: T::one() / (var + eps).sqrt(),
    }
}

/// Per-row layer normalization with biased variance.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::shape("layer_norm", "feature dimension is 0"));
    }
    check_vec_len("layer_norm", "gain", gain.len(), d)?;
    check_vec_len("layer_norm", "bias", bias.len(), d)?;
    if eps <= T::zero() {
        return Err(Error::shape("layer_norm", "eps must be positive"));
    }
    let mut y = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let RowStats { mean, inv_std } = row_stats(xr, eps);
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = gain[c] * ((xr[c] - mean) * inv_std) + bias[c];
        }
    }
    Ok(y)
}

pub struct LayerNormGrads<T> {
    pub dx: Matrix<T>,
    pub dgain: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn layer_norm_vjp<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    eps: T,
    dy: &Matrix<T>,
) -> Result<LayerNormGrads<T>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::shape("layer_norm_vjp", "feature dimension is 0"));
    }
    if dy.shape() != x.shape() {
        return Err(Error::shape("layer_norm_vjp", "cotangent shape"));
    }
    check_vec_len("layer_norm_vjp", "gain", gain.len(), d)?;
    let n = T::from_usize(d).expect("usize to float");
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let RowStats { mean, inv_std } = row_stats(xr, eps);
        for c in 0..d {
            xhat[c] = (xr[c] - mean) * inv_std;
            dxhat[c] = dyr[c] * gain[c];
            dgain[c] = dgain[c] + dyr[c] * xhat[c];
            dbias[c] = dbias[c] + dyr[c];
        }
        let mean_dxhat = dxhat.iter().fold(T::zero(), |a, &v| a + v) / n;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(&xhat)
            .fold(T::zero(), |a, (&g, &h)| a + g * h)
            / n;
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    Ok(LayerNormGrads { dx, dgain, dbias })
}

/// Row-wise softmax restricted to allowed entries. Disallowed entries are
/// exactly zero; a row without allowed entries is an error.
pub fn masked_softmax<T: Scalar>(scores: &Matrix<T>, mask: &BoolMask) -> Result<Matrix<T>> {
    if (mask.rows(), mask.cols()) != scores.shape() {
        return Err(Error::shape(
            "masked_softmax",
            format!(
                "mask {}x{} for scores {:?}",
                mask.rows(),
                mask.cols(),
                scores.shape()
            ),
        ));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        softmax_row(scores.row(r), mask.row(r), out.row_mut(r))
            .map_err(|_| Error::DegenerateRow { row: r })?;
    }
    Ok(out)
}

fn softmax_row<T: Scalar>(s: &[T], allowed: &[bool], out: &mut [T]) -> std::result::Result<(), ()> {
    let mut max = None::<T>;
    for (&v, &a) in s.iter().zip(allowed) {
        if a {
            max = Some(max.map_or(v, |m: T| m.max(v)));
        }
    }
    let max = max.ok_or(())?;
    let mut sum = T::zero();
    for ((o, &v), &a) in out.iter_mut().zip(s).zip(allowed) {
        if a {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        } else {
            *o = T::zero();
        }
    }
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o = *o / sum;
        }
    }
    Ok(())
}

/// Gradient of the scores given the softmax output `p` and `dp`.
pub fn masked_softmax_vjp<T: Scalar>(p: &Matrix<T>, dp: &Matrix<T>) -> Result<Matrix<T>> {
    if p.shape() != dp.shape() {
        return Err(Error::shape("masked_softmax_vjp", "cotangent shape"));
    }
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dpr = dp.row(r);
        let inner = pr.iter().zip(dpr).fold(T::zero(), |a, (&x, &y)| a + x * y);
        for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
            *out = pr[c] * (dpr[c] - inner);
        }
    }
    Ok(ds)
}

fn check_mha_shapes<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BoolMask,
    w_out: &Matrix<T>,
    heads: usize,
) -> Result<usize> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if (mask.rows(), mask.cols()) != (q.rows(), k.rows()) {
        return Err(Error::shape(
            "multi_head_attention",
            format!(
                "mask {}x{} for {}x{}",
                mask.rows(),
                mask.cols(),
                q.rows(),
                k.rows()
            ),
        ));
    }
    if w_out.shape() != (d, d) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("w_out {:?}, expected {d}x{d}", w_out.shape()),
        ));
    }
    Ok(d / heads)
}

/// Attention probabilities of one head, rows = queries, cols = keys.
fn head_probs<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    mask: &BoolMask,
    cols: std::ops::Range<usize>,
    scale: T,
) -> Result<Matrix<T>> {
    let mut scores = Matrix::zeros(q.rows(), k.rows());
    let mut work = 0;
    for i in 0..q.rows() {
        let qi = &q.row(i)[cols.clone()];
        for j in mask.allowed_in_row(i) {
            scores[(i, j)] = dot(qi, &k.row(j)[cols.clone()]) * scale;
            work += cols.len();
        }
    }
    add_flops(work);
    masked_softmax(&scores, mask)
}

/// Weighted value sum `P · V_h` over allowed keys, written into `ctx` columns.
fn head_context<T: Scalar>(
    probs: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BoolMask,
    cols: std::ops::Range<usize>,
    ctx: &mut Matrix<T>,
) {
    let mut work = 0;
    for i in 0..probs.rows() {
        for j in mask.allowed_in_row(i) {
            let p = probs[(i, j)];
            let vj = &v.row(j)[cols.clone()];
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for (o, &vv) in out.iter_mut().zip(vj) {
                *o = *o + p * vv;
            }
            work += cols.len();
        }
    }
    add_flops(work);
}

pub struct AttentionOutput<T> {
    pub output: Matrix<T>,
    /// Per-head probabilities (queries x keys).
    pub probs: Vec<Matrix<T>>,
    /// Concatenated head contexts before the output projection.
    pub context: Matrix<T>,
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`,
/// followed by the output projection. Only allowed query/key pairs are
/// evaluated.
pub fn multi_head_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BoolMask,
    w_out: &Matrix<T>,
    heads: usize,
) -> Result<Matrix<T>> {
    Ok(multi_head_attention_full(q, k, v, mask, w_out, heads)?.output)
}

pub fn multi_head_attention_full<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BoolMask,
    w_out: &Matrix<T>,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let dh = check_mha_shapes(q, k, v, mask, w_out, heads)?;
    let scale = T::one() / T::from_usize(dh).expect("usize to float").sqrt();
    let mut context = Matrix::zeros(q.rows(), q.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = head_probs(q, k, mask, cols.clone(), scale)?;
        head_context(&p, v, mask, cols, &mut context);
        probs.push(p);
    }
    let output = matmul(&context, w_out)?;
    Ok(AttentionOutput {
        output,
        probs,
        context,
    })
}

pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
    pub dw_out: Matrix<T>,
}

pub fn multi_head_attention_vjp<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BoolMask,
    w_out: &Matrix<T>,
    heads: usize,
    dout: &Matrix<T>,
) -> Result<AttentionGrads<T>> {
    let dh = check_mha_shapes(q, k, v, mask, w_out, heads)?;
    if dout.shape() != q.shape() {
        return Err(Error::shape("multi_head_attention_vjp", "cotangent shape"));
    }
    let fwd = multi_head_attention_full(q, k, v, mask, w_out, heads)?;
    let (dctx, dw_out) = matmul_vjp(&fwd.context, w_out, dout)?;
    let scale = T::one() / T::from_usize(dh).expect("usize to float").sqrt();
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for (h, p) in fwd.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let mut dp = Matrix::zeros(p.rows(), p.cols());
        for i in 0..p.rows() {
            let dci = &dctx.row(i)[cols.clone()];
            for j in mask.allowed_in_row(i) {
                dp[(i, j)] = dot(dci, &v.row(j)[cols.clone()]);
                let pij = p[(i, j)];
                for (dvv, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *dvv = *dvv + pij * g;
                }
            }
        }
        let ds = masked_softmax_vjp(p, &dp)?;
        for i in 0..p.rows() {
            for j in mask.allowed_in_row(i) {
                let g = ds[(i, j)] * scale;
                for c in cols.clone() {
                    dq[(i, c)] = dq[(i, c)] + g * k[(j, c)];
                    dk[(j, c)] = dk[(j, c)] + g * q[(i, c)];
                }
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv, dw_out })
}

fn add_bias<T: Scalar>(x: &mut Matrix<T>, bias: &[T]) {
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn check_ffn_shapes<T: Scalar>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    b1: &[T],
    w2: &Matrix<T>,
    b2: &[T],
) -> Result<()> {
    let d = x.cols();
    let f = w1.cols();
    if w1.rows() != d || w2.shape() != (f, d) || b1.len() != f || b2.len() != d {
        return Err(Error::shape(
            "ffn_apply",
            format!(
                "x {:?}, w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                x.shape(),
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            ),
        ));
    }
    Ok(())
}

/// `relu(X·W1 + b1)·W2 + b2`.
pub fn ffn_apply<T: Scalar>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    b1: &[T],
    w2: &Matrix<T>,
    b2: &[T],
) -> Result<Matrix<T>> {
    check_ffn_shapes(x, w1, b1, w2, b2)?;
    let mut h = matmul(x, w1)?;
    add_bias(&mut h, b1);
    let h = h.map(|v| v.max(T::zero()));
    let mut y = matmul(&h, w2)?;
    add_bias(&mut y, b2);
    Ok(y)
}

pub struct FfnGrads<T> {
    pub dx: Matrix<T>,
    pub dw1: Matrix<T>,
    pub db1: Vec<T>,
    pub dw2: Matrix<T>,
    pub db2: Vec<T>,
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for r in m.row_iter() {
        for (o, &v) in out.iter_mut().zip(r) {
            *o = *o + v;
        }
    }
    out
}

pub fn ffn_vjp<T: Scalar>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    b1: &[T],
    w2: &Matrix<T>,
    b2: &[T],
    dy: &Matrix<T>,
) -> Result<FfnGrads<T>> {
    check_ffn_shapes(x, w1, b1, w2, b2)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("ffn_vjp", "cotangent shape"));
    }
    let mut pre = matmul(x, w1)?;
    add_bias(&mut pre, b1);
    let act = pre.map(|v| v.max(T::zero()));
    let db2 = column_sums(dy);
    let (dact, dw2) = matmul_vjp(&act, w2, dy)?;
    let mut dpre = dact;
    for (g, &p) in dpre.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    let db1 = column_sums(&dpre);
    let (dx, dw1) = matmul_vjp(x, w1, &dpre)?;
    Ok(FfnGrads {
        dx,
        dw1,
        db1,
        dw2,
        db2,
    })
}

/// Arithmetic mean of the rows.
pub fn mean_rows<T: Scalar>(x: &Matrix<T>) -> Result<Vec<T>> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("mean of zero rows".into()));
    }
    let n = T::from_usize(x.rows()).expect("usize to float");
    Ok(column_sums(x).into_iter().map(|s| s / n).collect())
}

/// Gradient of [`mean_rows`]: every row receives `dmean / rows`.
pub fn mean_rows_vjp<T: Scalar>(rows: usize, dmean: &[T]) -> Matrix<T> {
    let n = T::from_usize(rows.max(1)).expect("usize to float");
    Matrix::from_fn(rows, dmean.len(), |_, c| dmean[c] / n)
}
