//! Numerical kernels for the layer graph. Convolutions use "same" zero
//! padding with stride 1 and run as im2col followed by a single GEMM.

use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the declared dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output range `[lo, hi)` along an axis of length `len` for kernel tap `t` with padding `pad`.
#[inline]
fn tap_range(len: usize, t: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (len + pad).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

fn im2col(x: &[f32], cin: usize, dims: [usize; 3], k: [usize; 3], cols: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * p..(c + 1) * p];
        for a in 0..k[0] {
            let (z0, z1) = tap_range(d, a, pad[0]);
            for b in 0..k[1] {
                let (y0, y1) = tap_range(h, b, pad[1]);
                for e in 0..k[2] {
                    let (x0, x1) = tap_range(w, e, pad[2]);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    for z in z0..z1 {
                        let sz = z + a - pad[0];
                        for y in y0..y1 {
                            let sy = y + b - pad[1];
                            let o = (z * h + y) * w;
                            let s = (sz * h + sy) * w + e;
                            dst[o + x0..o + x1].copy_from_slice(&plane[s + x0 - pad[2]..s + x1 - pad[2]]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f32], cin: usize, dims: [usize; 3], k: [usize; 3], dx: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut dx[c * p..(c + 1) * p];
        for a in 0..k[0] {
            let (z0, z1) = tap_range(d, a, pad[0]);
            for b in 0..k[1] {
                let (y0, y1) = tap_range(h, b, pad[1]);
                for e in 0..k[2] {
                    let (x0, x1) = tap_range(w, e, pad[2]);
                    let src = &cols[row * p..(row + 1) * p];
                    for z in z0..z1 {
                        let sz = z + a - pad[0];
                        for y in y0..y1 {
                            let sy = y + b - pad[1];
                            let o = (z * h + y) * w;
                            let s = (sz * h + sy) * w + e + x0 - pad[2];
                            let dst = &mut plane[s..s + (x1 - x0)];
                            for (v, g) in dst.iter_mut().zip(&src[o + x0..o + x1]) {
                                *v += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_pointwise(k: [usize; 3]) -> bool {
    k == [1, 1, 1]
}

/// Convolution with weights `(cout, cin, kd, kh, kw)` and bias `(cout)`.
pub fn conv_forward(x: &Tensor, weight: &[f32], bias: &[f32], cout: usize, k: [usize; 3]) -> Tensor {
    let [n, cin, d, h, w] = x.shape();
    let p = d * h * w;
    let kk = cin * k.iter().product::<usize>();
    let mut out = Tensor::zeros([n, cout, d, h, w]);
    let mut cols = if is_pointwise(k) { Vec::new() } else { vec![0.0; kk * p] };
    for s in 0..n {
        let y = out.sample_mut(s);
        for (o, &b) in bias.iter().enumerate() {
            y[o * p..(o + 1) * p].fill(b);
        }
        let src = if is_pointwise(k) {
            x.sample(s)
        } else {
            im2col(x.sample(s), cin, [d, h, w], k, &mut cols);
            &cols
        };
        gemm(cout, kk, p, weight, false, src, false, 1.0, y);
    }
    out
}

/// Gradients of a convolution. `dx` is skipped when `need_dx` is false.
pub fn conv_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    k: [usize; 3],
    need_dx: bool,
) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
    let [n, cin, d, h, w] = x.shape();
    let cout = dy.channels();
    let p = d * h * w;
    let kk = cin * k.iter().product::<usize>();
    let mut dw = vec![0.0f32; cout * kk];
    let mut db = vec![0.0f32; cout];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let pointwise = is_pointwise(k);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![0.0; kk * p] };
    for s in 0..n {
        let g = dy.sample(s);
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += g[o * p..(o + 1) * p].iter().sum::<f32>();
        }
        let src = if pointwise {
            x.sample(s)
        } else {
            im2col(x.sample(s), cin, [d, h, w], k, &mut cols);
            &cols
        };
        gemm(cout, p, kk, g, false, src, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                gemm(kk, cout, p, weight, true, g, false, 0.0, dx.sample_mut(s));
            } else {
                gemm(kk, cout, p, weight, true, g, false, 0.0, &mut dcols);
                col2im(&dcols, cin, [d, h, w], k, dx.sample_mut(s));
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel batch statistics `(mean, biased variance)`.
pub fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [n, c, ..] = x.shape();
    let p = x.spatial_len();
    let m = (n * p) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x.channel(b, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0f64;
        for b in 0..n {
            q += x.channel(b, ch).iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (q / m) as f32;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn bn_apply(x: &Tensor, mean: &[f32], var: &[f32], gamma: &[f32], beta: &[f32]) -> Tensor {
    let [n, c, ..] = x.shape();
    let p = x.spatial_len();
    let mut out = x.clone();
    let data = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let scale = gamma[ch] * inv;
            let shift = beta[ch] - mean[ch] * scale;
            let start = (b * c + ch) * p;
            for v in &mut data[start..start + p] {
                *v = *v * scale + shift;
            }
        }
    }
    out
}

/// Batch-norm backward through batch statistics. Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(x: &Tensor, dy: &Tensor, mean: &[f32], var: &[f32], gamma: &[f32]) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, ..] = x.shape();
    let p = x.spatial_len();
    let m = (n * p) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            for (&g, &v) in dy.channel(b, ch).iter().zip(x.channel(b, ch)) {
                sg += g as f64;
                sgx += (g * (v - mean[ch]) * inv) as f64;
            }
        }
        dbeta[ch] = sg as f32;
        dgamma[ch] = sgx as f32;
        let k = gamma[ch] * inv / m;
        let out = dx.data_mut();
        for b in 0..n {
            let start = (b * c + ch) * p;
            let xs = x.channel(b, ch);
            let gs = dy.channel(b, ch);
            for i in 0..p {
                let xhat = (xs[i] - mean[ch]) * inv;
                out[start + i] = k * (m * gs[i] - sg as f32 - xhat * sgx as f32);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Element-wise maximum. Returns the output and, per element, the index of
/// the winning input (first one on ties).
pub fn maxout(inputs: &[&Tensor]) -> (Tensor, Vec<u8>) {
    let mut out = inputs[0].clone();
    let mut arg = vec![0u8; out.data().len()];
    for (i, t) in inputs.iter().enumerate().skip(1) {
        for ((o, a), &v) in out.data_mut().iter_mut().zip(arg.iter_mut()).zip(t.data()) {
            if v > *o {
                *o = v;
                *a = i as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxout_backward(dy: &Tensor, arg: &[u8], which: usize) -> Tensor {
    let mut dx = dy.clone();
    for (g, &a) in dx.data_mut().iter_mut().zip(arg) {
        if a as usize != which {
            *g = 0.0;
        }
    }
    dx
}

pub fn concat(inputs: &[&Tensor]) -> Tensor {
    let [n, _, d, h, w] = inputs[0].shape();
    let c: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * d * h * w);
    for s in 0..n {
        for t in inputs {
            data.extend_from_slice(t.sample(s));
        }
    }
    Tensor::from_vec([n, c, d, h, w], data).expect("concat shape")
}

/// Splits a concatenated gradient back into per-input channel groups.
pub fn concat_backward(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let [n, _, d, h, w] = dy.shape();
    let p = d * h * w;
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&c| Vec::with_capacity(n * c * p)).collect();
    for s in 0..n {
        let g = dy.sample(s);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[off..off + c * p]);
            off += c * p;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(v, &c)| Tensor::from_vec([n, c, d, h, w], v).expect("split shape"))
        .collect()
}

/// 2x2 in-plane max-pool. Indices are flat positions within each input channel plane.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, d, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, d, ho, wo]);
    let mut idx = vec![0u32; out.data().len()];
    let po = d * ho * wo;
    for b in 0..n {
        for ch in 0..c {
            let plane = x.channel(b, ch);
            let base = (b * c + ch) * po;
            for z in 0..d {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut bi = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (z * h + 2 * y + dy) * w + 2 * xo + dx;
                                if plane[i] > best {
                                    best = plane[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = base + (z * ho + y) * wo + xo;
                        out.data_mut()[o] = best;
                        idx[o] = bi as u32;
                    }
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], input_shape: [usize; 5]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, ..] = input_shape;
    let pi: usize = input_shape[2..].iter().product();
    let po = dy.spatial_len();
    let out = dx.data_mut();
    for plane in 0..n * c {
        for j in 0..po {
            out[plane * pi + idx[plane * po + j] as usize] += dy.data()[plane * po + j];
        }
    }
    dx
}

/// Places each value at its stored argmax position on a zero map of `output_shape`.
pub fn unpool2(x: &Tensor, idx: &[u32], output_shape: [usize; 5]) -> Tensor {
    let mut out = Tensor::zeros(output_shape);
    let [n, c, ..] = output_shape;
    let po: usize = output_shape[2..].iter().product();
    let pi = x.spatial_len();
    let data = out.data_mut();
    for plane in 0..n * c {
        for j in 0..pi {
            data[plane * po + idx[plane * pi + j] as usize] = x.data()[plane * pi + j];
        }
    }
    out
}

pub fn unpool2_backward(dy: &Tensor, idx: &[u32], input_shape: [usize; 5]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, ..] = input_shape;
    let pi: usize = input_shape[2..].iter().product();
    let po = dy.spatial_len();
    let out = dx.data_mut();
    for plane in 0..n * c {
        for j in 0..pi {
            out[plane * pi + j] = dy.data()[plane * po + idx[plane * pi + j] as usize];
        }
    }
    dx
}

/// Softmax across channels at every spatial location.
pub fn softmax(x: &Tensor) -> Tensor {
    let [n, c, ..] = x.shape();
    let p = x.spatial_len();
    let mut out = x.clone();
    let data = out.data_mut();
    for b in 0..n {
        let base = b * c * p;
        for i in 0..p {
            let mut mx = f32::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(data[base + ch * p + i]);
            }
            let mut sum = 0.0f32;
            for ch in 0..c {
                let e = (data[base + ch * p + i] - mx).exp();
                data[base + ch * p + i] = e;
                sum += e;
            }
            for ch in 0..c {
                data[base + ch * p + i] /= sum;
            }
        }
    }
    out
}
