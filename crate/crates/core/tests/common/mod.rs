//! Independent reference implementations used as test oracles, and
//! finite-difference helpers. Everything here is deliberately written as
//! plain scalar loops, without reusing library internals.
#![allow(dead_code)]

pub mod checks;

use subseg_core::data::{HierarchySpec, LabelMap};
use subseg_core::graph::Gradients;
use subseg_core::{Graph, ParamStore, Real, Rng, Tensor, Var};

pub fn rand_tensor<T: Real>(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(lo, hi)))
}

pub fn rand_labels(h: usize, w: usize, classes: usize, rng: &mut Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.below(classes) as u8).collect()).unwrap()
}

/// Subclass map whose parent map is `y` (random children per pixel).
pub fn rand_children(y: &LabelMap, hier: &HierarchySpec, rng: &mut Rng) -> LabelMap {
    let data = y
        .data()
        .iter()
        .map(|&s| {
            let kids: Vec<usize> = hier.children(s as usize).collect();
            kids[rng.below(kids.len())] as u8
        })
        .collect();
    LabelMap::new(y.height(), y.width(), data).unwrap()
}

// ---------------------------------------------------------------- losses

fn softmax_at(logits: &[f64], n: usize, k: usize, hw: usize, i: usize, p: usize) -> Vec<f64> {
    let _ = n;
    let z: Vec<f64> = (0..k).map(|c| logits[(i * k + c) * hw + p]).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// CE + soft Dice on `N x K x H x W` logits and soft targets, per-pixel
/// weights over `N x H x W`.
pub fn ce_dice_oracle(shape: [usize; 4], logits: &[f64], target: &[f64], weights: Option<&[f64]>) -> f64 {
    let [n, k, h, w] = shape;
    let hw = h * w;
    let (mut ce, mut wsum) = (0.0, 0.0);
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for i in 0..n {
        for p in 0..hw {
            let wt = weights.map_or(1.0, |ws| ws[i * hw + p]);
            if wt <= 0.0 {
                continue;
            }
            let prob = softmax_at(logits, n, k, hw, i, p);
            wsum += wt;
            for c in 0..k {
                let t = target[(i * k + c) * hw + p];
                ce -= wt * t * prob[c].ln();
                inter[c] += wt * prob[c] * t;
                psum[c] += wt * prob[c];
                tsum[c] += wt * t;
            }
        }
    }
    let eps = 1e-5;
    let dice: f64 = (0..k).map(|c| (2.0 * inter[c] + eps) / (psum[c] + tsum[c] + eps)).sum::<f64>() / k as f64;
    ce / wsum + 1.0 - dice
}

/// Mean over pixels of `-log(1 - q + 1e-7)`, `q` = mass off the superclass.
pub fn nl_oracle(shape: [usize; 4], logits: &[f64], y: &[LabelMap], hier: &HierarchySpec) -> f64 {
    let [n, k, h, w] = shape;
    let hw = h * w;
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let prob = softmax_at(logits, n, k, hw, i, p);
            let q: f64 = (0..k).filter(|&j| hier.parent(j) != y[i].data()[p] as usize).map(|j| prob[j]).sum();
            total -= (1.0 - q + 1e-7).ln();
        }
    }
    total / (n * hw) as f64
}

// ----------------------------------------------------------- pseudo labels

/// Three-clause rule, one pixel at a time. Argmax ties go to the lowest
/// class index.
pub fn pseudo_oracle(
    pa: &Tensor<f32>,
    pb: &Tensor<f32>,
    y: &LabelMap,
    tau: f64,
    hier: &HierarchySpec,
) -> (Vec<u8>, Vec<bool>) {
    let k = pa.shape()[0];
    let (h, w) = y.dims();
    let mut z = vec![0u8; h * w];
    let mut valid = vec![false; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let at = |t: &Tensor<f32>, c: usize| t.data()[c * h * w + yy * w + xx];
            let mut a = 0;
            let mut b = 0;
            for c in 0..k {
                if at(pa, c) > at(pa, a) {
                    a = c;
                }
                if at(pb, c) > at(pb, b) {
                    b = c;
                }
            }
            let agree = a == b;
            let confident = at(pa, a) as f64 >= tau && at(pb, b) as f64 >= tau;
            let consistent = hier.parent(a) == y.get(yy, xx) as usize;
            if agree && confident && consistent {
                valid[yy * w + xx] = true;
                z[yy * w + xx] = a as u8;
            }
        }
    }
    (z, valid)
}

// -------------------------------------------------------------- resampling

/// Tight foreground box `(top, left, height, width)`.
pub fn bbox_oracle(m: &LabelMap) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = m.dims();
    let rows: Vec<usize> = (0..h).filter(|&r| (0..w).any(|c| m.get(r, c) != 0)).collect();
    let cols: Vec<usize> = (0..w).filter(|&c| (0..h).any(|r| m.get(r, c) != 0)).collect();
    let (&t, &b) = (rows.first()?, rows.last()?);
    let (&l, &r) = (cols.first()?, cols.last()?);
    Some((t, l, b - t + 1, r - l + 1))
}

/// Tent-kernel weights of the `src` samples for output `o` (half-pixel
/// centres, clamped at the edges).
fn tent_weights(o: usize, src: usize, dst: usize) -> Vec<f64> {
    let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    (0..src).map(|j| (1.0 - (s - j as f64).abs()).max(0.0)).collect()
}

/// Bilinear resize of a window of one `H x W` plane.
pub fn bilinear_oracle(plane: &[f32], w: usize, win: (usize, usize, usize, usize), oh: usize, ow: usize) -> Vec<f64> {
    let (t, l, sh, sw) = win;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let wy = tent_weights(oy, sh, oh);
        for ox in 0..ow {
            let wx = tent_weights(ox, sw, ow);
            let mut acc = 0.0;
            for (j, a) in wy.iter().enumerate() {
                for (i, b) in wx.iter().enumerate() {
                    acc += a * b * plane[(t + j) * w + l + i] as f64;
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Nearest-neighbour source index in exact integer arithmetic.
pub fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    ((2 * o + 1) * src / (2 * dst)).min(src - 1)
}

// ----------------------------------------------------------------- metrics

pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn boundary_oracle(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize];
    let mut out = vec![];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs HD95 (pooled directed distances, nearest rank).
pub fn hd95_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let (ba, bb) = (boundary_oracle(a, h, w), boundary_oracle(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                let d2 = to.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap();
                (d2 as f64).sqrt()
            })
            .collect()
    };
    let mut all = directed(&ba, &bb);
    all.extend(directed(&bb, &ba));
    all.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let n = all.len();
    let mut rank = (95 * n + 99) / 100;
    rank = rank.max(1);
    Some(all[rank - 1])
}

// ------------------------------------------------------ finite differences

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst relative error between analytic input gradients and central
/// differences for `L = sum(op(inputs) * R)` with a fixed random `R`.
pub fn op_gradcheck(
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    op: &dyn Fn(&mut Graph<f64>, &[Var]) -> subseg_core::Result<Var>,
) -> f64 {
    op_gradcheck_first(inputs.len(), inputs, step, floor, op)
}

/// Like [`op_gradcheck`] but only the first `checked` inputs are perturbed.
pub fn op_gradcheck_first(
    checked: usize,
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    op: &dyn Fn(&mut Graph<f64>, &[Var]) -> subseg_core::Result<Var>,
) -> f64 {
    let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
    let eval = |xs: &[Tensor<f64>], grad: bool| -> (f64, Option<Gradients<f64>>, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = op(&mut g, &vars).expect("op");
        let shape = g.value(out).shape().to_vec();
        let r = weights
            .borrow_mut()
            .get_or_insert_with(|| rand_tensor(&shape, &mut Rng::new(99), -1.0, 1.0))
            .clone();
        let rv = g.input(r);
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod).unwrap();
        let val = g.value(loss).data()[0];
        let grads = grad.then(|| g.backward(loss).unwrap());
        (val, grads, vars)
    };
    let (_, grads, vars) = eval(inputs, true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (t, v) in inputs.iter().enumerate().take(checked) {
        let analytic = grads.wrt(vars[t]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[t].shape()));
        for i in 0..inputs[t].len() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[i] -= step;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            let _ = v;
            worst = worst.max(rel_err(analytic.data()[i], num, floor));
        }
    }
    worst
}

/// Parameters, momentum buffers and running statistics agree bit for bit.
pub fn bit_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    let bits = |s: &ParamStore<f32>| {
        let mut v: Vec<u32> = Vec::new();
        for p in s.params() {
            v.extend(p.value.data().iter().chain(p.momentum.data()).map(|x| x.to_bits()));
        }
        for (_, b) in s.buffers() {
            v.extend(b.data().iter().map(|x| x.to_bits()));
        }
        v
    };
    bits(a) == bits(b)
}
