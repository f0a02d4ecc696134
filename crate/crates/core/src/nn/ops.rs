//! Forward and backward kernels for the operations the model uses.
//!
//! Every kernel is plain sequential loops so results are bitwise
//! reproducible.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv_out_size(input: usize, kernel: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad - kernel) / spec.stride + 1
}

/// Output columns `ox` whose input column `ox*stride + k - pad` lies in `[0, n)`.
fn valid_range(n_in: usize, n_out: usize, k: usize, spec: ConvSpec) -> (usize, usize) {
    let s = spec.stride as isize;
    let off = k as isize - spec.pad as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= n_in - 1
    let hi_num = n_in as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let hi = hi.min(n_out as isize - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (batch, cin, h, wd) = x.dims4();
    let (cout, cin_g, kh, kw) = w.dims4();
    assert_eq!(cin_g * spec.groups, cin, "conv input channels");
    assert_eq!(cout % spec.groups, 0, "conv output channels");
    let cout_g = cout / spec.groups;
    let oh = conv_out_size(h, kh, spec);
    let ow = conv_out_size(wd, kw, spec);
    let mut out = Tensor::zeros(&[batch, cout, oh, ow]);
    let s = spec.stride;
    for bi in 0..batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let obase = (bi * cout + oc) * oh * ow;
            if let Some(b) = b {
                out.data[obase..obase + oh * ow].fill(b.data[oc]);
            }
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let ibase = (bi * cin + ic) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, spec);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(wd, ow, kx, spec);
                        let wv = w.data[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - spec.pad;
                            let orow = obase + oy * ow;
                            let irow = ibase + iy * wd;
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - spec.pad;
                                out.data[orow + ox] += wv * x.data[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    spec: ConvSpec,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (batch, cin, h, wd) = x.dims4();
    let (cout, cin_g, kh, kw) = w.dims4();
    let cout_g = cout / spec.groups;
    let (_, _, oh, ow) = dout.dims4();
    let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[cout]);
    let s = spec.stride;
    for bi in 0..batch {
        for oc in 0..cout {
            let g = oc / cout_g;
            let obase = (bi * cout + oc) * oh * ow;
            db.data[oc] += dout.data[obase..obase + oh * ow].iter().sum::<f64>();
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let ibase = (bi * cin + ic) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, oh, ky, spec);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(wd, ow, kx, spec);
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = w.data[widx];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - spec.pad;
                            let orow = obase + oy * ow;
                            let irow = ibase + iy * wd;
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - spec.pad;
                                let d = dout.data[orow + ox];
                                acc += d * x.data[irow + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx.data[irow + ix] += wv * d;
                                }
                            }
                        }
                        dw.data[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source taps for bilinear resampling with half-pixel centres
/// (`align_corners = false`).
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `h x w` planes.
pub fn resize_planes(data: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = (1.0 - rx.frac) * r0[rx.i0] + rx.frac * r0[rx.i1];
                let bot = (1.0 - rx.frac) * r1[rx.i0] + rx.frac * r1[rx.i1];
                dst[oy * ow + ox] = (1.0 - ry.frac) * top + ry.frac * bot;
            }
        }
    }
    out
}

pub fn resize_planes_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = (1.0 - ry.frac) * v;
                let bot = ry.frac * v;
                d[ry.i0 * w + rx.i0] += (1.0 - rx.frac) * top;
                d[ry.i0 * w + rx.i1] += rx.frac * top;
                d[ry.i1 * w + rx.i0] += (1.0 - rx.frac) * bot;
                d[ry.i1 * w + rx.i1] += rx.frac * bot;
            }
        }
    }
    dx
}

/// Nearest-neighbour source index with half-pixel centres.
pub fn nearest_index(o: usize, n_in: usize, n_out: usize) -> usize {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize;
    src.min(n_in - 1)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `[b, c, h, w] -> [b, h*w, c]`
pub fn to_tokens(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let n = h * w;
    let mut out = Tensor::zeros(&[b, n, c]);
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..n {
                out.data[(bi * n + p) * c + ci] = x.data[(bi * c + ci) * n + p];
            }
        }
    }
    out
}

/// `[b, h*w, c] -> [b, c, h, w]`
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, n, c) = x.dims3();
    assert_eq!(n, h * w, "token count");
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..n {
                out.data[(bi * c + ci) * n + p] = x.data[(bi * n + p) * c + ci];
            }
        }
    }
    out
}

/// Layer normalization over the last axis. Returns the output plus the
/// normalized input and per-row inverse std for the backward pass.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = *x.shape.last().unwrap();
    let rows = x.numel() / c;
    let mut out = Tensor::zeros(&x.shape);
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            xhat[r * c + j] = xh;
            out.data[r * c + j] = gamma.data[j] * xh + beta.data[j];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm_backward(
    dout: &Tensor,
    gamma: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let c = *dout.shape.last().unwrap();
    let rows = dout.numel() / c;
    let mut dx = Tensor::zeros(&dout.shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let g = &dout.data[r * c..(r + 1) * c];
        let xh = &xhat[r * c..(r + 1) * c];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..c {
            dgamma.data[j] += g[j] * xh[j];
            dbeta.data[j] += g[j];
            dxhat[j] = g[j] * gamma.data[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xh[j];
        }
        let k = inv_std[r] / c as f64;
        for j in 0..c {
            dx.data[r * c + j] = k * (c as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y = x W^T + b` over the last axis; `W` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let cin = *x.shape.last().unwrap();
    let cout = w.shape[0];
    assert_eq!(w.shape[1], cin, "linear input width");
    let rows = x.numel() / cin;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = cout;
    let mut out = Tensor::zeros(&shape);
    for r in 0..rows {
        let xr = &x.data[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let wr = &w.data[o * cin..(o + 1) * cin];
            out.data[r * cout + o] = b.data[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor, need_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let cin = *x.shape.last().unwrap();
    let cout = w.shape[0];
    let rows = x.numel() / cin;
    let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[cout]);
    for r in 0..rows {
        let xr = &x.data[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let g = dout.data[r * cout + o];
            db.data[o] += g;
            let wr = &w.data[o * cin..(o + 1) * cin];
            let dwr = &mut dw.data[o * cin..(o + 1) * cin];
            for i in 0..cin {
                dwr[i] += g * xr[i];
            }
            if let Some(dx) = dx.as_mut() {
                let dxr = &mut dx.data[r * cin..(r + 1) * cin];
                for i in 0..cin {
                    dxr[i] += g * wr[i];
                }
            }
        }
    }
    (dx, dw, db)
}

/// Multi-head scaled dot-product attention. `q` is `[b, n, c]`, `k` and `v`
/// are `[b, m, c]`; heads split `c` into contiguous blocks. Returns the
/// output and the attention probabilities `[b, heads, n, m]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let (b, n, c) = q.dims3();
    let (_, m, _) = k.dims3();
    assert_eq!(c % heads, 0, "channels must split evenly across heads");
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[b, n, c]);
    let mut probs = vec![0.0; b * heads * n * m];
    for bi in 0..b {
        for hd in 0..heads {
            let off = hd * d;
            for i in 0..n {
                let qi = &q.data[(bi * n + i) * c + off..(bi * n + i) * c + off + d];
                let prow = &mut probs[((bi * heads + hd) * n + i) * m..((bi * heads + hd) * n + i + 1) * m];
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    let kj = &k.data[(bi * m + j) * c + off..(bi * m + j) * c + off + d];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for p in prow.iter_mut() {
                    *p = (*p - max).exp();
                    total += *p;
                }
                for p in prow.iter_mut() {
                    *p /= total;
                }
                let orow = &mut out.data[(bi * n + i) * c + off..(bi * n + i) * c + off + d];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v.data[(bi * m + j) * c + off..(bi * m + j) * c + off + d];
                    for t in 0..d {
                        orow[t] += p * vj[t];
                    }
                }
            }
        }
    }
    (out, probs)
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    dout: &Tensor,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let (b, n, c) = q.dims3();
    let (_, m, _) = k.dims3();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Tensor::zeros(&q.shape);
    let mut dk = Tensor::zeros(&k.shape);
    let mut dv = Tensor::zeros(&v.shape);
    let mut dp = vec![0.0; m];
    for bi in 0..b {
        for hd in 0..heads {
            let off = hd * d;
            for i in 0..n {
                let prow = &probs[((bi * heads + hd) * n + i) * m..((bi * heads + hd) * n + i + 1) * m];
                let go = &dout.data[(bi * n + i) * c + off..(bi * n + i) * c + off + d];
                let mut dot = 0.0;
                for j in 0..m {
                    let vrow = (bi * m + j) * c + off;
                    let mut s = 0.0;
                    for t in 0..d {
                        s += go[t] * v.data[vrow + t];
                        dv.data[vrow + t] += prow[j] * go[t];
                    }
                    dp[j] = s;
                    dot += s * prow[j];
                }
                let qrow = (bi * n + i) * c + off;
                for j in 0..m {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (bi * m + j) * c + off;
                    for t in 0..d {
                        dq.data[qrow + t] += ds * k.data[krow + t];
                        dk.data[krow + t] += ds * q.data[qrow + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(x, 0) - x*y + ln(1 + e^-|x|)`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Gradient of [`bce_with_logits`] with respect to each logit.
pub fn bce_with_logits_grad(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| (sigmoid(x) - y) / n)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bounds_scan() {
        for n_in in 1..9 {
            for k in 1..4 {
                for stride in 1..3 {
                    for pad in 0..2 {
                        let spec = ConvSpec { stride, pad, groups: 1 };
                        if n_in + 2 * pad < k {
                            continue;
                        }
                        let n_out = conv_out_size(n_in, k, spec);
                        for kk in 0..k {
                            let expect: Vec<usize> = (0..n_out)
                                .filter(|&o| {
                                    let i = (o * stride + kk) as isize - pad as isize;
                                    i >= 0 && (i as usize) < n_in
                                })
                                .collect();
                            let (lo, hi) = valid_range(n_in, n_out, kk, spec);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1x1x3x3 input, 2x1x2x2 kernel, stride 1, pad 0
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = Tensor::new(vec![2, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
        let b = Tensor::new(vec![2], vec![0.0, 1.0]);
        let y = conv2d(&x, &w, Some(&b), ConvSpec { stride: 1, pad: 0, groups: 1 });
        assert_eq!(y.shape, vec![1, 2, 2, 2]);
        assert_eq!(&y.data[..4], &[6.0, 8.0, 12.0, 14.0]);
        assert_eq!(&y.data[4..], &[7.0, 9.0, 13.0, 15.0]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let data: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        assert_eq!(resize_planes(&data, 2, 3, 5, 3, 5), data);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let q = Tensor::new(vec![1, 3, 4], (0..12).map(|i| i as f64 * 0.1).collect());
        let k = Tensor::new(vec![1, 2, 4], (0..8).map(|i| (i as f64).cos()).collect());
        let (_, p) = attention(&q, &k, &k, 2);
        for row in p.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
