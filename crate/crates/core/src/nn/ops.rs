//! Forward and backward kernels. Each backward takes whatever the forward
//! needs to keep and returns gradients with respect to every input.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, MatRef, Scalar, Tensor};

pub fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

// ---------------------------------------------------------------- linear

/// `x[N×D] · weight[D×D'] + bias[D']`.
pub fn linear<F: Scalar>(x: &Tensor<F>, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (n, d) = (x.rows(), x.cols());
    if weight.shape().len() != 2 || weight.rows() != d {
        return Err(Error::Dimension(format!("linear: input width {d}, weight {:?}", weight.shape())));
    }
    let dout = weight.cols();
    let mut y = Tensor::zeros(&[n, dout]);
    if let Some(b) = bias {
        if b.numel() != dout {
            return Err(Error::Dimension(format!("linear: bias {:?} for width {dout}", b.shape())));
        }
        for i in 0..n {
            y.row_mut(i).copy_from_slice(b.data());
        }
    }
    gemm(n, d, dout, F::one(), MatRef::rm(x.data(), d), MatRef::rm(weight.data(), dout), F::one(), y.data_mut(), dout);
    Ok(y)
}

/// `dx = dy · Wᵀ`.
pub fn linear_backward_input<F: Scalar>(weight: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (d, dout) = (weight.rows(), weight.cols());
    let n = dy.rows();
    let mut dx = Tensor::zeros(&[n, d]);
    gemm(n, dout, d, F::one(), MatRef::rm(dy.data(), dout), MatRef::rm_t(weight.data(), dout), F::zero(), dx.data_mut(), d);
    dx
}

/// Accumulates `xᵀ · dy` into `dw` and the column sums of `dy` into `db`.
pub fn linear_backward_params<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>, dw: &mut Tensor<F>, db: Option<&mut Tensor<F>>) {
    let (n, d) = (x.rows(), x.cols());
    let dout = dy.cols();
    gemm(d, n, dout, F::one(), MatRef::rm_t(x.data(), d), MatRef::rm(dy.data(), dout), F::one(), dw.data_mut(), dout);
    if let Some(db) = db {
        let g = db.data_mut();
        for i in 0..n {
            for (gj, &v) in g.iter_mut().zip(dy.row(i)) {
                *gj += v;
            }
        }
    }
}

// ---------------------------------------------------------------- conv2d

fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> (Vec<F>, usize, usize) {
    let (ho, wo) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
    let mut cols = vec![F::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<F> {
    let mut x = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_dims<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (xs, ks) = (x.shape(), kernels.shape());
    if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
        return Err(Error::Dimension(format!("conv2d: input {xs:?}, kernels {ks:?}")));
    }
    if stride == 0 || ks[2] == 0 {
        return Err(Error::Dimension("conv2d: stride and kernel size must be >= 1".into()));
    }
    Ok((xs[0], xs[1], xs[2], ks[0], ks[2]))
}

/// Zero-padded 2-D cross-correlation. `x` is `C×H×W`, `kernels` is
/// `C'×C×k×k`, the result is `C'×H'×W'` with `H' = (H+2p-k)/s + 1`.
pub fn conv2d<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>, bias: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let (c, h, w, cout, k) = conv_dims(x, kernels, stride)?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Dimension(format!("conv2d: {h}x{w} input with padding {pad} is smaller than kernel {k}")));
    }
    if bias.numel() != cout {
        return Err(Error::Dimension(format!("conv2d: bias {:?} for {cout} channels", bias.shape())));
    }
    let (cols, ho, wo) = im2col(x.data(), c, h, w, k, stride, pad);
    let mut y = Tensor::zeros(&[cout, ho, wo]);
    for (co, &b) in bias.data().iter().enumerate() {
        y.data_mut()[co * ho * wo..(co + 1) * ho * wo].fill(b);
    }
    let ckk = c * k * k;
    gemm(cout, ckk, ho * wo, F::one(), MatRef::rm(kernels.data(), ckk), MatRef::rm(&cols, ho * wo), F::one(), y.data_mut(), ho * wo);
    Ok(y)
}

pub struct Conv2dGrads<F> {
    pub dx: Tensor<F>,
    pub dkernels: Tensor<F>,
    pub dbias: Tensor<F>,
}

pub fn conv2d_backward<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>, dy: &Tensor<F>, stride: usize, pad: usize) -> Result<Conv2dGrads<F>> {
    let (c, h, w, cout, k) = conv_dims(x, kernels, stride)?;
    let (cols, ho, wo) = im2col(x.data(), c, h, w, k, stride, pad);
    dy.expect_shape(&[cout, ho, wo], "conv2d_backward dy")?;
    let ckk = c * k * k;
    let mut dkernels = Tensor::zeros(kernels.shape());
    gemm(cout, ho * wo, ckk, F::one(), MatRef::rm(dy.data(), ho * wo), MatRef::rm_t(&cols, ho * wo), F::zero(), dkernels.data_mut(), ckk);
    let mut dcols = vec![F::zero(); ckk * ho * wo];
    gemm(ckk, cout, ho * wo, F::one(), MatRef::rm_t(kernels.data(), ckk), MatRef::rm(dy.data(), ho * wo), F::zero(), &mut dcols, ho * wo);
    let dx = Tensor::from_vec(&[c, h, w], col2im(&dcols, c, h, w, k, stride, pad, ho, wo))?;
    let dbias = Tensor::from_vec(&[cout], (0..cout).map(|co| dy.data()[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum()).collect())?;
    Ok(Conv2dGrads { dx, dkernels, dbias })
}

// ---------------------------------------------------------------- bilinear

/// Source index and weight pair for align-corners resampling of `src` samples
/// onto `dst` samples.
fn align_corner_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 2);
            (lo, lo + 1, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear resampling of a `G×G×D` grid to `g×g×D`.
pub fn bilinear_resize<F: Scalar>(grid: &Tensor<F>, g: usize) -> Result<Tensor<F>> {
    let s = grid.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::Dimension(format!("bilinear_resize expects a square G×G×D grid, got {s:?}")));
    }
    let (big_g, d) = (s[0], s[2]);
    if big_g < 2 {
        return Err(Error::DegenerateGrid(big_g));
    }
    if g < 2 {
        return Err(Error::DegenerateGrid(g));
    }
    if big_g == g {
        return Ok(grid.clone());
    }
    let taps = align_corner_taps(big_g, g);
    let src = grid.data();
    let mut out = Tensor::zeros(&[g, g, d]);
    let o = out.data_mut();
    for (i, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (j, &(x0, x1, fx)) in taps.iter().enumerate() {
            let w = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let dst = &mut o[(i * g + j) * d..(i * g + j + 1) * d];
            for (yy, xx, wt) in w {
                if wt == 0.0 {
                    continue;
                }
                let wt = F::lit(wt);
                let row = &src[(yy * big_g + xx) * d..(yy * big_g + xx + 1) * d];
                for (a, &b) in dst.iter_mut().zip(row) {
                    *a += wt * b;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: maps a `g×g×D` gradient back to `G×G×D`.
pub fn bilinear_resize_backward<F: Scalar>(dy: &Tensor<F>, big_g: usize) -> Result<Tensor<F>> {
    let s = dy.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::Dimension(format!("bilinear_resize_backward: {s:?}")));
    }
    let (g, d) = (s[0], s[2]);
    if big_g == g {
        return Ok(dy.clone());
    }
    let taps = align_corner_taps(big_g, g);
    let mut out = Tensor::zeros(&[big_g, big_g, d]);
    let o = out.data_mut();
    let src = dy.data();
    for (i, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (j, &(x0, x1, fx)) in taps.iter().enumerate() {
            let row = &src[(i * g + j) * d..(i * g + j + 1) * d];
            for (yy, xx, wt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wt == 0.0 {
                    continue;
                }
                let wt = F::lit(wt);
                let dst = &mut o[(yy * big_g + xx) * d..(yy * big_g + xx + 1) * d];
                for (a, &b) in dst.iter_mut().zip(row) {
                    *a += wt * b;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- layer norm

pub struct LayerNormCache<F> {
    pub xhat: Tensor<F>,
    pub rstd: Vec<F>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> (Tensor<F>, LayerNormCache<F>) {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[n, d]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = F::one() / F::lit(d as f64);
    let eps = F::lit(LN_EPS);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx` and accumulates into `dgamma`/`dbeta` when given.
pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
    mut dgamma: Option<&mut Tensor<F>>,
    mut dbeta: Option<&mut Tensor<F>>,
) -> Tensor<F> {
    let (n, d) = (dy.rows(), dy.cols());
    let inv_d = F::one() / F::lit(d as f64);
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        if let Some(dg) = dgamma.as_deref_mut() {
            for ((g, &a), &b) in dg.data_mut().iter_mut().zip(dyr).zip(xh) {
                *g += a * b;
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for (g, &a) in db.data_mut().iter_mut().zip(dyr) {
                *g += a;
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * gamma.data()[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

// ---------------------------------------------------------------- gelu

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let inner = c * (x + a * x * x * x);
    // tanh through one exp; libm tanh is several times slower.
    let t = F::one() - F::lit(2.0) / ((inner + inner).exp() + F::one());
    let y = half * x * (F::one() + t);
    let dinner = c * (F::one() + F::lit(3.0) * a * x * x);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
    (y, dy)
}

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| gelu_parts(v).0)
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *g *= gelu_parts(v).1;
    }
    dx
}

// ---------------------------------------------------------------- softmax

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    for i in 0..y.rows() {
        softmax_in_place(y.row_mut(i));
    }
    y
}

// ---------------------------------------------------------------- attention

/// Attention probabilities kept for the backward pass, one `M×N` block per
/// head.
pub struct AttentionCache<F> {
    pub probs: Vec<F>,
}

/// Multi-head scaled dot-product attention. `q` is `M×D`, `k` and `v` are
/// `N×D`. With `causal_offset = Some(o)`, query `i` sees keys `0..=o+i`.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    causal_offset: Option<usize>,
) -> Result<(Tensor<F>, AttentionCache<F>)> {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != n || heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!(
            "attention: q {:?}, k {:?}, v {:?}, heads {heads}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dh = d / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut probs = vec![F::zero(); heads * m * n];
    let mut out = Tensor::zeros(&[m, d]);
    for h in 0..heads {
        let p = &mut probs[h * m * n..(h + 1) * m * n];
        gemm(
            m,
            dh,
            n,
            scale,
            MatRef::strided(&q.data()[h * dh..], d, 1),
            MatRef::strided(&k.data()[h * dh..], 1, d),
            F::zero(),
            p,
            n,
        );
        for i in 0..m {
            let row = &mut p[i * n..(i + 1) * n];
            if let Some(off) = causal_offset {
                for s in row.iter_mut().skip(off + i + 1) {
                    *s = F::neg_infinity();
                }
            }
            softmax_in_place(row);
        }
        gemm(
            m,
            n,
            dh,
            F::one(),
            MatRef::rm(p, n),
            MatRef::strided(&v.data()[h * dh..], d, 1),
            F::zero(),
            &mut out.data_mut()[h * dh..],
            d,
        );
    }
    Ok((out, AttentionCache { probs }))
}

pub struct AttentionGrads<F> {
    pub dq: Tensor<F>,
    pub dk: Tensor<F>,
    pub dv: Tensor<F>,
}

pub fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    cache: &AttentionCache<F>,
    dout: &Tensor<F>,
) -> AttentionGrads<F> {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    let dh = d / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[m, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    let mut dp = vec![F::zero(); m * n];
    for h in 0..heads {
        let p = &cache.probs[h * m * n..(h + 1) * m * n];
        let dout_h = MatRef::strided(&dout.data()[h * dh..], d, 1);
        // dP = dO · Vᵀ
        gemm(m, dh, n, F::one(), dout_h, MatRef::strided(&v.data()[h * dh..], 1, d), F::zero(), &mut dp, n);
        // dV = Pᵀ · dO
        gemm(n, m, dh, F::one(), MatRef::rm_t(p, n), dout_h, F::zero(), &mut dv.data_mut()[h * dh..], d);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..m {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot);
            }
        }
        gemm(m, n, dh, scale, MatRef::rm(&dp, n), MatRef::strided(&k.data()[h * dh..], d, 1), F::zero(), &mut dq.data_mut()[h * dh..], d);
        gemm(n, m, dh, scale, MatRef::rm_t(&dp, n), MatRef::strided(&q.data()[h * dh..], d, 1), F::zero(), &mut dk.data_mut()[h * dh..], d);
    }
    AttentionGrads { dq, dk, dv }
}

// ---------------------------------------------------------------- cross entropy

fn check_ce<F: Scalar>(logits: &Tensor<F>, targets: &[u32], mask: &[bool]) -> Result<usize> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!("cross_entropy: {n} rows, {} targets, {} mask", targets.len(), mask.len())));
    }
    if let Some(t) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= v) {
        return Err(Error::Dimension(format!("cross_entropy: target {} outside vocab {v}", t.0)));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(count)
}

/// Mean negative log-likelihood of `targets` over positions where `mask` is set.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u32], mask: &[bool]) -> Result<F> {
    let count = check_ce(logits, targets, mask)?;
    let mut total = F::zero();
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&x| (x - m).exp()).sum::<F>().ln() + m;
        total += lse - row[targets[i] as usize];
    }
    Ok(total / F::lit(count as f64))
}

pub fn cross_entropy_backward<F: Scalar>(logits: &Tensor<F>, targets: &[u32], mask: &[bool]) -> Result<Tensor<F>> {
    let count = check_ce(logits, targets, mask)?;
    let inv = F::one() / F::lit(count as f64);
    let mut d = Tensor::zeros(logits.shape());
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let row = d.row_mut(i);
        row.copy_from_slice(logits.row(i));
        softmax_in_place(row);
        row[targets[i] as usize] -= F::one();
        for g in row.iter_mut() {
            *g *= inv;
        }
    }
    Ok(d)
}
