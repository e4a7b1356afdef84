//! Raw NCHW kernels behind the graph operators. Batch items are processed in
//! parallel; every reduction across the batch is summed in item order so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Conv2dDims {
    fn pad(&self) -> usize {
        self.k / 2
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Lay out the receptive fields of one `C x H x W` image as a
/// `(C*k*k) x (H*W)` matrix, zero outside the image.
fn im2col<T: Real>(x: &[T], d: &Conv2dDims, cols: &mut [T]) {
    let (h, w, k, p) = (d.h, d.w, d.k, d.pad() as isize);
    let hw = d.hw();
    for c in 0..d.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &Conv2dDims, dx_img: &mut [T]) {
    let (h, w, k, p) = (d.h, d.w, d.k, d.pad() as isize);
    let hw = d.hw();
    for c in 0..d.c_in {
        let plane = &mut dx_img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    for (o, &g) in dst[s0..s0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *o += g;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with "same" zero padding (odd `k`).
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, d: &Conv2dDims) -> Vec<T> {
    let hw = d.hw();
    let in_per = d.c_in * hw;
    let out_per = d.c_out * hw;
    let rows = d.col_rows();
    let mut out = vec![T::zero(); d.n * out_per];
    out.par_chunks_mut(out_per).enumerate().for_each(|(i, y)| {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let owned;
        let cols: &[T] = if d.k == 1 {
            xi
        } else {
            let mut buf = vec![T::zero(); rows * hw];
            im2col(xi, d, &mut buf);
            owned = buf;
            &owned
        };
        if let Some(b) = bias {
            for (co, plane) in y.chunks_mut(hw).enumerate() {
                plane.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            d.c_out,
            rows,
            hw,
            T::one(),
            weight,
            (rows as isize, 1),
            cols,
            (hw as isize, 1),
            beta,
            y,
            (hw as isize, 1),
        );
    });
    out
}

pub struct Conv2dGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &Conv2dDims,
    need_input: bool,
) -> Conv2dGrads<T> {
    let hw = d.hw();
    let in_per = d.c_in * hw;
    let out_per = d.c_out * hw;
    let rows = d.col_rows();
    let per_item: Vec<(Vec<T>, Option<Vec<T>>)> = (0..d.n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * in_per..(i + 1) * in_per];
            let dyi = &dy[i * out_per..(i + 1) * out_per];
            let owned;
            let cols: &[T] = if d.k == 1 {
                xi
            } else {
                let mut buf = vec![T::zero(); rows * hw];
                im2col(xi, d, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![T::zero(); d.c_out * rows];
            // dW = dY (c_out x hw) * cols^T (hw x rows)
            T::gemm(
                d.c_out,
                hw,
                rows,
                T::one(),
                dyi,
                (hw as isize, 1),
                cols,
                (1, hw as isize),
                T::zero(),
                &mut dw,
                (rows as isize, 1),
            );
            let dx = need_input.then(|| {
                let mut dcols = vec![T::zero(); rows * hw];
                // dcols = W^T (rows x c_out) * dY (c_out x hw)
                T::gemm(
                    rows,
                    d.c_out,
                    hw,
                    T::one(),
                    weight,
                    (1, rows as isize),
                    dyi,
                    (hw as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (hw as isize, 1),
                );
                if d.k == 1 {
                    dcols
                } else {
                    let mut dxi = vec![T::zero(); in_per];
                    col2im(&dcols, d, &mut dxi);
                    dxi
                }
            });
            (dw, dx)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); d.c_out * rows];
    let mut bias_grad = vec![T::zero(); d.c_out];
    let mut input_grad = need_input.then(|| Vec::with_capacity(d.n * in_per));
    for (i, (dw, dx)) in per_item.into_iter().enumerate() {
        for (a, b) in weight_grad.iter_mut().zip(dw) {
            *a += b;
        }
        let dyi = &dy[i * out_per..(i + 1) * out_per];
        for (co, plane) in dyi.chunks(hw).enumerate() {
            bias_grad[co] += plane.iter().copied().sum::<T>();
        }
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    Conv2dGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled values and, per output, the
/// flat index of the winning input element (first maximum in scan order).
pub fn max_pool2_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, o) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *o = row[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * ow + 2 * x;
                dst[y * w + x] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for i in 0..n {
            for &val in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Softmax over the channel axis of an NCHW buffer.
pub fn softmax_channels<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[base + ch * hw + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - mx).exp();
                out[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / z;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax: `p * (g - sum_c g p)`.
pub fn softmax_channels_backward<T: Real>(p: &[T], g: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p.len()];
    for i in 0..n {
        let base = i * c * hw;
        for px in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let k = base + ch * hw + px;
                dot += g[k] * p[k];
            }
            for ch in 0..c {
                let k = base + ch * hw + px;
                out[k] = p[k] * (g[k] - dot);
            }
        }
    }
    out
}
