//! HierarchicalMix: transform-invariant pseudo labels for superclass-only
//! samples, foreground-box mixup with a subclass-labelled sample, and the
//! blended target the mixed image is trained against.

use crate::data::{HierarchySpec, LabelMap};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.4;
pub const ALPHA_MIN: f64 = 0.5;
pub const ALPHA_MAX: f64 = 1.0;

/// Optional flips followed by `rot90_k` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SpatialTransform {
    pub rot90_k: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Index `0..16` of this combination: `k + 4*flip_h + 8*flip_v`.
    pub fn index(&self) -> usize {
        self.rot90_k as usize + 4 * self.flip_h as usize + 8 * self.flip_v as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            rot90_k: (i % 4) as u8,
            flip_h: (i / 4) % 2 == 1,
            flip_v: (i / 8) % 2 == 1,
        }
    }

    /// Where source pixel `(y, x)` of an `h x w` plane lands, and the output
    /// plane size.
    fn forward_index(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let mut x = if self.flip_h { w - 1 - x } else { x };
        let mut y = if self.flip_v { h - 1 - y } else { y };
        let (mut h, mut w) = (h, w);
        for _ in 0..self.rot90_k % 4 {
            // counter-clockwise quarter turn
            (y, x) = (w - 1 - x, y);
            (h, w) = (w, h);
        }
        (y, x, h, w)
    }

    fn remap<T: Copy + Default>(&self, data: &[T], shape: &[usize], inverse: bool) -> Result<(Vec<T>, Vec<usize>)> {
        let r = shape.len();
        if r < 2 {
            return Err(invalid("spatial_transform", format!("need spatial dims, got {shape:?}")));
        }
        let (ih, iw) = (shape[r - 2], shape[r - 1]);
        let odd = self.rot90_k % 2 == 1;
        // (h, w) is the untransformed plane, (th, tw) the transformed one.
        let (h, w, th, tw) = match (inverse, odd) {
            (_, false) => (ih, iw, ih, iw),
            (false, true) => (ih, iw, iw, ih),
            (true, true) => (iw, ih, ih, iw),
        };
        let planes: usize = shape[..r - 2].iter().product();
        let mut out = vec![T::default(); data.len()];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let (ty, tx, _, _) = self.forward_index(y, x, h, w);
                    if inverse {
                        out[base + y * w + x] = data[base + ty * tw + tx];
                    } else {
                        out[base + ty * tw + tx] = data[base + y * w + x];
                    }
                }
            }
        }
        let mut new_shape = shape.to_vec();
        let (oh, ow) = if inverse { (h, w) } else { (th, tw) };
        new_shape[r - 2] = oh;
        new_shape[r - 1] = ow;
        Ok((out, new_shape))
    }

    /// Apply to the trailing two (spatial) axes.
    pub fn apply(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (data, shape) = self.remap(t.data(), t.shape(), false)?;
        Tensor::new(shape, data)
    }

    /// Undo [`SpatialTransform::apply`].
    pub fn invert(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (data, shape) = self.remap(t.data(), t.shape(), true)?;
        Tensor::new(shape, data)
    }
}

/// Uniform over the 16 (rotation, flip, flip) combinations.
pub fn sample_transform(rng: &mut Rng) -> SpatialTransform {
    SpatialTransform::from_index(rng.below(16))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub z_pse: LabelMap,
    /// Row-major `h x w`.
    pub valid: Vec<bool>,
    pub tau_used: f64,
}

impl PseudoLabel {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn argmax_at(probs: &[f32], k: usize, hw: usize, p: usize) -> usize {
    let mut best = 0;
    for c in 1..k {
        if probs[c * hw + p] > probs[best * hw + p] {
            best = c;
        }
    }
    best
}

/// Pixel `i` gets label `a = argmax probs_a[:, i]` when the aligned second
/// prediction has the same argmax, both maxima reach `tau`, and `a` lies in
/// the superclass `y[i]`. Other pixels are marked invalid with label 0.
pub fn make_pseudo_label(
    probs_a: &Tensor<f32>,
    probs_b_aligned: &Tensor<f32>,
    y: &LabelMap,
    tau: f64,
    hierarchy: &HierarchySpec,
) -> Result<PseudoLabel> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("make_pseudo_label", format!("tau {tau} outside [0, 1]")));
    }
    let shape = probs_a.shape();
    let k = hierarchy.num_sub();
    if shape != probs_b_aligned.shape() || shape != [k, y.height(), y.width()] {
        return Err(Error::Shape {
            op: "make_pseudo_label",
            left: shape.to_vec(),
            right: probs_b_aligned.shape().to_vec(),
        });
    }
    let hw = y.height() * y.width();
    let (pa, pb) = (probs_a.data(), probs_b_aligned.data());
    let mut z = LabelMap::zeros(y.height(), y.width());
    let mut valid = vec![false; hw];
    for p in 0..hw {
        let a = argmax_at(pa, k, hw, p);
        let b = argmax_at(pb, k, hw, p);
        let ok = a == b
            && pa[a * hw + p] as f64 >= tau
            && pb[b * hw + p] as f64 >= tau
            && hierarchy.parent(a) == y.data()[p] as usize;
        if ok {
            valid[p] = true;
            z.data_mut()[p] = a as u8;
        }
    }
    Ok(PseudoLabel {
        z_pse: z,
        valid,
        tau_used: tau,
    })
}

/// Confidence threshold decaying linearly from 1 at iteration 0 to 0.4 at
/// `total`.
pub fn tau_schedule(iter: usize, total: usize) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(invalid("tau_schedule", format!("iteration {iter} outside [0, {total}]")));
    }
    if iter == total {
        return Ok(TAU_END);
    }
    Ok(TAU_START - (TAU_START - TAU_END) * iter as f64 / total as f64)
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Tight bounding box of non-background pixels.
pub fn foreground_bbox(y: &LabelMap) -> Option<Rect> {
    let (h, w) = y.dims();
    let (mut t, mut l, mut b, mut r) = (usize::MAX, usize::MAX, 0, 0);
    for yy in 0..h {
        for xx in 0..w {
            if y.get(yy, xx) != 0 {
                t = t.min(yy);
                l = l.min(xx);
                b = b.max(yy);
                r = r.max(xx);
            }
        }
    }
    (t != usize::MAX).then(|| Rect {
        top: t,
        left: l,
        height: b - t + 1,
        width: r - l + 1,
    })
}

/// Source coordinate for output index `dst` when resampling `src_len`
/// samples to `dst_len` (pixel centres aligned).
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resize of the `src` window of a `C x H x W` image to `out_h x out_w`.
fn resize_bilinear(img: &Tensor<f32>, src: Rect, out_h: usize, out_w: usize) -> Vec<f32> {
    let (c, w) = (img.shape()[0], img.shape()[2]);
    let plane = img.shape()[1] * w;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let d = &img.data()[ch * plane..(ch + 1) * plane];
        let at = |yy: usize, xx: usize| d[(src.top + yy) * w + src.left + xx];
        for oy in 0..out_h {
            let sy = source_coord(oy, src.height, out_h).clamp(0.0, (src.height - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(src.height - 1);
            let fy = (sy - y0 as f64) as f32;
            for ox in 0..out_w {
                let sx = source_coord(ox, src.width, out_w).clamp(0.0, (src.width - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(src.width - 1);
                let fx = (sx - x0 as f64) as f32;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Nearest-neighbour resize of the `src` window of a label map.
fn resize_nearest(m: &LabelMap, src: Rect, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * src.height as f64 / out_h as f64) as usize).min(src.height - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * src.width as f64 / out_w as f64) as usize).min(src.width - 1);
            out.push(m.get(src.top + sy, src.left + sx));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub x_mix: Tensor<f32>,
    /// Resized fine labels inside `mix_bbox`, background elsewhere.
    pub z_full: LabelMap,
    pub mix_bbox: Rect,
    pub alpha: f64,
}

/// Paste the foreground box of the fine sample, resized to the foreground box
/// of `y`, over `x` with weight `alpha`.
pub fn mix_images(
    x: &Tensor<f32>,
    y: &LabelMap,
    x_fine: &Tensor<f32>,
    y_fine: &LabelMap,
    z_fine: &LabelMap,
    alpha: f64,
) -> Result<MixResult> {
    if !(ALPHA_MIN..=ALPHA_MAX).contains(&alpha) {
        return Err(invalid("mix_images", format!("alpha {alpha} outside [0.5, 1]")));
    }
    let (h, w) = y.dims();
    let c = x.shape()[0];
    if x.shape() != [c, h, w] || x_fine.rank() != 3 || x_fine.shape()[0] != c {
        return Err(Error::Shape {
            op: "mix_images",
            left: x.shape().to_vec(),
            right: x_fine.shape().to_vec(),
        });
    }
    if (x_fine.shape()[1], x_fine.shape()[2]) != y_fine.dims() || z_fine.dims() != y_fine.dims() {
        return Err(invalid("mix_images", "fine image and label maps disagree on size"));
    }
    let target = foreground_bbox(y).ok_or_else(|| invalid("mix_images", "superclass map has no foreground"))?;
    let source = foreground_bbox(y_fine).ok_or_else(|| invalid("mix_images", "fine sample has no foreground"))?;

    let patch = resize_bilinear(x_fine, source, target.height, target.width);
    let labels = resize_nearest(z_fine, source, target.height, target.width);
    let a = alpha as f32;
    let mut x_mix = x.clone();
    let mut z_full = LabelMap::zeros(h, w);
    let ph = target.height * target.width;
    for ch in 0..c {
        for dy in 0..target.height {
            for dx in 0..target.width {
                let (yy, xx) = (target.top + dy, target.left + dx);
                let k = ch * h * w + yy * w + xx;
                let v = &mut x_mix.data_mut()[k];
                *v = a * patch[ch * ph + dy * target.width + dx] + (1.0 - a) * *v;
            }
        }
    }
    for dy in 0..target.height {
        for dx in 0..target.width {
            z_full.set(target.top + dy, target.left + dx, labels[dy * target.width + dx]);
        }
    }
    Ok(MixResult {
        x_mix,
        z_full,
        mix_bbox: target,
        alpha,
    })
}

/// Soft `K x H x W` target: `alpha * onehot(z_full) + (1 - alpha) *
/// onehot(z_pse)` where the pseudo label is valid, `onehot(z_full)` elsewhere.
/// The weight mask is all ones.
pub fn mixed_target(z_full: &LabelMap, pseudo: &PseudoLabel, alpha: f64, classes: usize) -> Result<(Tensor<f32>, Vec<f32>)> {
    if z_full.dims() != pseudo.z_pse.dims() || pseudo.valid.len() != z_full.data().len() {
        return Err(invalid("mixed_target", "label maps disagree on size"));
    }
    let (h, w) = z_full.dims();
    let hw = h * w;
    let a = alpha as f32;
    let mut t = Tensor::zeros(&[classes, h, w]);
    for p in 0..hw {
        let zf = z_full.data()[p] as usize;
        if pseudo.valid[p] {
            let zp = pseudo.z_pse.data()[p] as usize;
            t.data_mut()[zf * hw + p] += a;
            t.data_mut()[zp * hw + p] += 1.0 - a;
        } else {
            t.data_mut()[zf * hw + p] = 1.0;
        }
    }
    Ok((t, vec![1.0; hw]))
}
