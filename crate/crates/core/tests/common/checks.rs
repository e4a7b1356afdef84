//! Check suites shared by the focused test files and the acceptance target.
//! Each returns measurements; callers decide pass/fail.
#![allow(dead_code)]

use subseg_core::data::{HierarchySpec, LabelMap};
use subseg_core::graph::BnMode;
use subseg_core::hiermix::{make_pseudo_label, mix_images, mixed_target, tau_schedule, PseudoLabel};
use subseg_core::metrics::{dice_score, hd95, Mask};
use subseg_core::segnet::{ce_dice_loss, negative_learning_loss, supervised_losses, ModelConfig, SegNet};
use subseg_core::tensor::Real;
use subseg_core::{Graph, ParamStore, Rng, Tensor, Var};

use super::*;

pub const OP_STEP: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
/// Below this magnitude gradients are compared absolutely.
pub const OP_FLOOR: f64 = 1e-2;
pub const E2E_STEP: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-2;
pub const E2E_FLOOR: f64 = 1e-2;
pub const E2E_COORDS: usize = 20;

fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.bernoulli() {
            m
        } else {
            -m
        }
    })
}

/// Values spaced 0.01 apart in random order: no ties within a finite
/// difference step.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let perm = rng.sample_without_replacement(n, n);
    Tensor::new(shape.to_vec(), perm.iter().map(|&p| p as f64 * 0.01 - 0.3).collect()).unwrap()
}

fn soft_target(n: usize, k: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, k, h, w]);
    let hw = h * w;
    for i in 0..n {
        for p in 0..hw {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..k {
                t.data_mut()[(i * k + c) * hw + p] = raw[c] / s;
            }
        }
    }
    t
}

/// Worst relative gradient error of every operator, in f64.
pub fn per_op_gradients() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(2024);
    let r = &mut rng;
    let mut out = Vec::new();
    let x = rand_tensor::<f64>(&[2, 3, 5, 4], r, -1.0, 1.0);
    let w = rand_tensor::<f64>(&[4, 3, 3, 3], r, -0.5, 0.5);
    let b = rand_tensor::<f64>(&[4], r, -0.5, 0.5);
    out.push((
        "conv2d",
        op_gradcheck(&[x.clone(), w.clone(), b], OP_STEP, OP_FLOOR, &|g, v| g.conv2d(v[0], v[1], Some(v[2]))),
    ));
    let w1 = rand_tensor::<f64>(&[2, 3, 1, 1], r, -0.5, 0.5);
    out.push((
        "conv2d_1x1_nobias",
        op_gradcheck(&[x.clone(), w1], OP_STEP, OP_FLOOR, &|g, v| g.conv2d(v[0], v[1], None)),
    ));
    out.push((
        "relu",
        op_gradcheck(&[away_from_zero(&[2, 2, 3, 3], r)], OP_STEP, OP_FLOOR, &|g, v| g.relu(v[0])),
    ));
    out.push((
        "max_pool2",
        op_gradcheck(&[distinct(&[2, 2, 4, 6], r)], OP_STEP, OP_FLOOR, &|g, v| g.max_pool2(v[0])),
    ));
    out.push((
        "upsample2",
        op_gradcheck(&[rand_tensor(&[1, 2, 3, 2], r, -1.0, 1.0)], OP_STEP, OP_FLOOR, &|g, v| g.upsample2(v[0])),
    ));
    let a = rand_tensor::<f64>(&[2, 2, 3, 3], r, -1.0, 1.0);
    let c = rand_tensor::<f64>(&[2, 3, 3, 3], r, -1.0, 1.0);
    out.push((
        "concat",
        op_gradcheck(&[a.clone(), c], OP_STEP, OP_FLOOR, &|g, v| g.concat(&[v[0], v[1]])),
    ));
    let gamma = rand_tensor::<f64>(&[3], r, 0.5, 1.5);
    let beta = rand_tensor::<f64>(&[3], r, -0.5, 0.5);
    let bn_x = rand_tensor::<f64>(&[2, 3, 3, 3], r, -1.0, 2.0);
    for (name, mode) in [
        ("batch_norm_train", BnMode::Train { update_running: true }),
        ("batch_norm_eval", BnMode::Eval),
    ] {
        out.push((
            name,
            op_gradcheck(&[bn_x.clone(), gamma.clone(), beta.clone()], OP_STEP, OP_FLOOR, &|g, v| {
                let mut rm = Tensor::from_fn(&[3], |i| 0.1 * i as f64);
                let mut rv = Tensor::from_fn(&[3], |i| 0.5 + 0.25 * i as f64);
                g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, mode)
            }),
        ));
    }
    out.push((
        "softmax",
        op_gradcheck(&[rand_tensor(&[2, 4, 2, 3], r, -2.0, 2.0)], OP_STEP, OP_FLOOR, &|g, v| g.softmax(v[0])),
    ));
    let a2 = rand_tensor::<f64>(&[2, 2, 3, 3], r, -1.0, 1.0);
    out.push(("add", op_gradcheck(&[a.clone(), a2.clone()], OP_STEP, OP_FLOOR, &|g, v| g.add(v[0], v[1]))));
    out.push(("mul", op_gradcheck(&[a.clone(), a2], OP_STEP, OP_FLOOR, &|g, v| g.mul(v[0], v[1]))));
    out.push(("scale", op_gradcheck(&[a.clone()], OP_STEP, OP_FLOOR, &|g, v| g.scale(v[0], -1.7))));
    out.push((
        "crop",
        op_gradcheck(&[x.clone()], OP_STEP, OP_FLOOR, &|g, v| g.crop(v[0], 1, 1, 3, 2)),
    ));
    out.push(("sum", op_gradcheck(&[a.clone()], OP_STEP, OP_FLOOR, &|g, v| g.sum(v[0]))));
    out.push(("mean", op_gradcheck(&[a.clone()], OP_STEP, OP_FLOOR, &|g, v| g.mean(v[0]))));
    out.push((
        "detach",
        {
            // The detached factor acts as a constant; it gets no gradient.
            let b = rand_tensor::<f64>(a.shape(), r, -1.0, 1.0);
            let op = |g: &mut Graph<f64>, v: &[Var]| {
                let d = g.detach(v[1]);
                g.mul(v[0], d)
            };
            let mut g = Graph::new();
            let (x, y) = (g.input_with_grad(a.clone()), g.input_with_grad(b.clone()));
            let out = op(&mut g, &[x, y]).unwrap();
            let s = g.sum(out).unwrap();
            let grads = g.backward(s).unwrap();
            let leaked = grads.wrt(y).map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            op_gradcheck_first(1, &[a.clone(), b], OP_STEP, OP_FLOOR, &op).max(leaked)
        },
    ));

    let target = soft_target(2, 4, 3, 3, r);
    let logits = rand_tensor::<f64>(&[2, 4, 3, 3], r, -2.0, 2.0);
    let weights: Vec<f64> = (0..18).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 + (i % 3) as f64 }).collect();
    out.push((
        "ce_dice_loss",
        op_gradcheck(&[logits.clone()], OP_STEP, OP_FLOOR, &|g, v| ce_dice_loss(g, v[0], &target, Some(&weights))),
    ));
    let hier = HierarchySpec::two_level(3).unwrap();
    let ys = [rand_labels(3, 3, 2, r), rand_labels(3, 3, 2, r)];
    out.push((
        "negative_learning_loss",
        op_gradcheck(&[logits], OP_STEP, OP_FLOOR, &|g, v| {
            negative_learning_loss(g, v[0], &[&ys[0], &ys[1]], &hier)
        }),
    ));
    out
}

/// Small prior-concatenation + separate-normalization model.
pub fn small_model(pc: bool, sn: bool, seed: u64) -> (SegNet, ParamStore<f32>) {
    let mut cfg = ModelConfig::new(HierarchySpec::two_level(3).unwrap());
    cfg.enable_pc = pc;
    cfg.enable_sn = sn;
    cfg.base_channels = 4;
    cfg.depth = 2;
    let mut store = ParamStore::new();
    let net = SegNet::new(cfg, &mut store, &mut Rng::new(seed)).unwrap();
    (net, store)
}

/// Outcome of the sampled end-to-end check.
#[derive(Debug, Clone, Copy)]
pub struct E2eCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU or max-pool switch lies within
    /// the step.
    pub skipped: usize,
}

/// `L_c + L_f` of the PC+SN model on a fixed batch. Analytic parameter
/// gradients come from the f32 model; the reference is a central difference
/// of the same loss evaluated in f64 on the same weights. The prior is
/// detached, so the differenced function holds it at its unperturbed value.
pub fn end_to_end_gradient(seed: u64) -> E2eCheck {
    end_to_end_with(seed, E2E_STEP)
}

pub fn end_to_end_with(seed: u64, step: f64) -> E2eCheck {
    let (net, store32) = small_model(true, true, seed);
    let store: ParamStore<f64> = store32.cast();
    let hier = net.config().hierarchy.clone();
    let mut rng = Rng::new(seed + 1);
    let x32 = rand_tensor::<f32>(&[2, 1, 8, 8], &mut rng, 0.0, 1.0);
    let zs: Vec<LabelMap> = (0..2).map(|_| rand_labels(8, 8, 4, &mut rng)).collect();
    let ys: Vec<LabelMap> = zs.iter().map(|z| hier.collapse(z)).collect();
    fn loss_of<T: Real>(
        net: &SegNet,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        ys: &[LabelMap],
        zs: &[LabelMap],
        prior: Option<&Tensor<T>>,
    ) -> (f64, Tensor<T>, subseg_core::graph::Gradients<T>) {
        let mode = BnMode::Train { update_running: false };
        let mut s = store.clone();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = match prior {
            Some(p) => net.forward_with_prior(&mut g, &mut s, xv, mode, p).unwrap(),
            None => net.forward(&mut g, &mut s, xv, mode).unwrap(),
        };
        let yr: Vec<&LabelMap> = ys.iter().collect();
        let zr: Vec<Option<&LabelMap>> = zs.iter().map(Some).collect();
        let (lc, lf) = supervised_losses(&mut g, &out, &yr, &zr, &net.config().hierarchy).unwrap();
        let total: Var = g.add(lc, lf).unwrap();
        let v = g.value(total).data()[0].to_f64().unwrap();
        let prior = g.value(out.prior.expect("model has PC")).clone();
        (v, prior, g.backward(total).unwrap())
    }
    let (_, _, grads) = loss_of(&net, &store32, &x32, &ys, &zs, None);
    let x = x32.cast::<f64>();
    let (f0, prior, _) = loss_of(&net, &store, &x, &ys, &zs, None);
    let ids: Vec<_> = store.ids().collect();
    let mut out = E2eCheck { worst: 0.0, checked: 0, skipped: 0 };
    while out.checked < E2E_COORDS && out.skipped < 10 * E2E_COORDS {
        let id = ids[rng.below(ids.len())];
        let i = rng.below(store.get(id).value.len());
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i] as f64);
        let mut plus = store.clone();
        plus.get_mut(id).value.data_mut()[i] += step;
        let mut minus = store.clone();
        minus.get_mut(id).value.data_mut()[i] -= step;
        let fp = loss_of(&net, &plus, &x, &ys, &zs, Some(&prior)).0;
        let fm = loss_of(&net, &minus, &x, &ys, &zs, Some(&prior)).0;
        let num = (fp - fm) / (2.0 * step);
        // One-sided slopes that disagree mean the step straddles a ReLU or
        // max-pool switch, where the difference quotient is no reference.
        let (fwd, bwd) = ((fp - f0) / step, (f0 - fm) / step);
        if (fwd - bwd).abs() > E2E_TOL * num.abs().max(E2E_FLOOR) {
            out.skipped += 1;
            continue;
        }
        out.checked += 1;
        out.worst = out.worst.max(rel_err(analytic, num, E2E_FLOOR));
    }
    out
}

fn random_mask(h: usize, w: usize, density: f64, rng: &mut Rng) -> Vec<bool> {
    (0..h * w).map(|_| rng.uniform() < density).collect()
}

/// Dice against direct counting on random 8x8 pairs; returns mismatches.
pub fn dice_oracle_mismatches(pairs: usize, seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        // Densities from empty to full so degenerate masks are covered.
        let (da, db) = (rng.uniform(), rng.uniform());
        let a = random_mask(8, 8, da, &mut rng);
        let b = random_mask(8, 8, db, &mut rng);
        let got = dice_score(&Mask::new(8, 8, a.clone()).unwrap(), &Mask::new(8, 8, b.clone()).unwrap()).unwrap();
        if got != dice_oracle(&a, &b) {
            bad += 1;
        }
    }
    bad
}

/// HD95 against all-pairs brute force on random 16x16 pairs (exact
/// equality); returns mismatches.
pub fn hd95_oracle_mismatches(pairs: usize, seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for i in 0..pairs {
        let (da, db) = if i % 10 == 0 { (0.0, rng.uniform()) } else { (rng.uniform() * 0.6, rng.uniform() * 0.6) };
        let a = random_mask(16, 16, da, &mut rng);
        let b = random_mask(16, 16, db, &mut rng);
        let got = hd95(&Mask::new(16, 16, a.clone()).unwrap(), &Mask::new(16, 16, b.clone()).unwrap()).unwrap();
        if got != hd95_oracle(&a, &b, 16, 16) {
            bad += 1;
        }
    }
    bad
}

/// Random `K x H x W` probability maps: sharp or flat per pixel, with
/// occasional exact ties.
pub fn rand_probs(k: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f32> {
    let hw = h * w;
    let mut t = Tensor::zeros(&[k, h, w]);
    for p in 0..hw {
        let temp = if rng.bernoulli() { 0.2 } else { 2.0 };
        let tie = rng.below(20) == 0;
        let raw: Vec<f64> = (0..k).map(|_| if tie { 1.0 } else { (rng.normal() / temp).exp() }).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..k {
            t.data_mut()[c * hw + p] = (raw[c] / s) as f32;
        }
    }
    t
}

#[derive(Debug, Default)]
pub struct PseudoFuzz {
    pub instances: usize,
    pub oracle_mismatches: usize,
    pub unsound: usize,
    pub non_monotone: usize,
}

/// Pseudo-label rule against the scalar oracle on random instances, with
/// superclass soundness and monotonicity in the threshold.
pub fn pseudo_label_fuzz(instances: usize, seed: u64) -> PseudoFuzz {
    let mut rng = Rng::new(seed);
    let mut out = PseudoFuzz { instances, ..Default::default() };
    for _ in 0..instances {
        let k_fg = 2 + rng.below(2);
        let hier = HierarchySpec::two_level(k_fg).unwrap();
        let k = hier.num_sub();
        let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
        let pa = rand_probs(k, h, w, &mut rng);
        // Half the time both views agree exactly.
        let pb = if rng.bernoulli() {
            pa.clone()
        } else {
            rand_probs(k, h, w, &mut rng)
        };
        let y = rand_labels(h, w, 2, &mut rng);
        let tau = rng.uniform();
        let got: PseudoLabel = make_pseudo_label(&pa, &pb, &y, tau, &hier).unwrap();
        let (z, valid) = pseudo_oracle(&pa, &pb, &y, tau, &hier);
        if got.z_pse.data() != z.as_slice() || got.valid != valid {
            out.oracle_mismatches += 1;
        }
        for p in 0..h * w {
            if got.valid[p] && hier.parent(got.z_pse.data()[p] as usize) != y.data()[p] as usize {
                out.unsound += 1;
            }
        }
        let tau2 = tau + (1.0 - tau) * rng.uniform();
        let stricter = make_pseudo_label(&pa, &pb, &y, tau2, &hier).unwrap();
        if stricter.valid.iter().zip(&got.valid).any(|(&s, &g)| s && !g) {
            out.non_monotone += 1;
        }
    }
    out
}

/// Exact threshold schedule endpoints and midpoint.
pub fn tau_endpoints(total: usize) -> (f64, f64, f64) {
    (
        tau_schedule(0, total).unwrap(),
        tau_schedule(total, total).unwrap(),
        tau_schedule(total / 2, total).unwrap(),
    )
}

/// A sample with one random rectangle of foreground subclasses.
fn boxed_sample(h: usize, w: usize, c: usize, rng: &mut Rng) -> (Tensor<f32>, LabelMap, LabelMap) {
    let bh = 1 + rng.below(h);
    let bw = 1 + rng.below(w);
    let top = rng.below(h - bh + 1);
    let left = rng.below(w - bw + 1);
    let mut z = LabelMap::zeros(h, w);
    for yy in top..top + bh {
        for xx in left..left + bw {
            z.set(yy, xx, 1 + rng.below(3) as u8);
        }
    }
    // Knock out some interior pixels: the tight box must still be found.
    for yy in top..top + bh {
        for xx in left..left + bw {
            if rng.below(4) == 0 && (yy != top && yy != top + bh - 1) {
                z.set(yy, xx, 0);
            }
        }
    }
    let y = LabelMap::new(h, w, z.data().iter().map(|&v| (v != 0) as u8).collect()).unwrap();
    let x = rand_tensor::<f32>(&[c, h, w], rng, 0.0, 1.0);
    (x, y, z)
}

#[derive(Debug, Default)]
pub struct MixCheck {
    pub instances: usize,
    pub endpoint_failures: usize,
    pub locality_failures: usize,
    /// Largest deviation from the resampling oracle (image values).
    pub max_image_err: f64,
    pub label_mismatches: usize,
    pub max_row_sum_err: f64,
    pub target_mismatches: usize,
}

/// Mixing arithmetic against independent resampling and blending oracles.
pub fn mix_checks(instances: usize, seed: u64) -> MixCheck {
    let mut rng = Rng::new(seed);
    let hier = HierarchySpec::two_level(3).unwrap();
    let k = hier.num_sub();
    let mut out = MixCheck { instances, ..Default::default() };
    for i in 0..instances {
        let (h, w) = (4 + rng.below(9), 4 + rng.below(9));
        let c = 1 + rng.below(2);
        let (x, y, _) = boxed_sample(h, w, c, &mut rng);
        let (xf, yf, zf) = boxed_sample(h, w, c, &mut rng);
        let alpha = if i % 7 == 0 { 1.0 } else { rng.uniform_range(0.5, 1.0) };
        let mix = mix_images(&x, &y, &xf, &yf, &zf, alpha).unwrap();
        let (t, l, bh, bw) = bbox_oracle(&y).unwrap();
        let (st, sl, sh, sw) = bbox_oracle(&yf).unwrap();
        for ch in 0..c {
            let plane = &xf.data()[ch * h * w..(ch + 1) * h * w];
            let patch = bilinear_oracle(plane, w, (st, sl, sh, sw), bh, bw);
            for yy in 0..h {
                for xx in 0..w {
                    let idx = ch * h * w + yy * w + xx;
                    let got = mix.x_mix.data()[idx] as f64;
                    let inside = yy >= t && yy < t + bh && xx >= l && xx < l + bw;
                    if inside {
                        let p = patch[(yy - t) * bw + (xx - l)];
                        let want = alpha * p + (1.0 - alpha) * x.data()[idx] as f64;
                        out.max_image_err = out.max_image_err.max((got - want).abs());
                    } else if mix.x_mix.data()[idx].to_bits() != x.data()[idx].to_bits() {
                        out.locality_failures += 1;
                    }
                }
            }
        }
        for yy in 0..h {
            for xx in 0..w {
                let inside = yy >= t && yy < t + bh && xx >= l && xx < l + bw;
                let want = if inside {
                    zf.get(st + nearest_index(yy - t, sh, bh), sl + nearest_index(xx - l, sw, bw))
                } else {
                    0
                };
                if mix.z_full.get(yy, xx) != want {
                    out.label_mismatches += 1;
                }
            }
        }
        // Endpoint: alpha = 1 with equal box sizes copies the fine crop.
        if alpha == 1.0 && (bh, bw) == (sh, sw) {
            for ch in 0..c {
                for dy in 0..bh {
                    for dx in 0..bw {
                        let got = mix.x_mix.data()[ch * h * w + (t + dy) * w + l + dx];
                        let want = xf.data()[ch * h * w + (st + dy) * w + sl + dx];
                        if got != want {
                            out.endpoint_failures += 1;
                        }
                    }
                }
            }
        }
        // Soft target against a direct blend.
        let pa = rand_probs(k, h, w, &mut rng);
        let pseudo = make_pseudo_label(&pa, &pa, &y, rng.uniform_range(0.3, 0.9), &hier).unwrap();
        let (target, weights) = mixed_target(&mix.z_full, &pseudo, alpha, k).unwrap();
        if weights.iter().any(|&v| v != 1.0) {
            out.target_mismatches += 1;
        }
        for p in 0..h * w {
            let mut row = 0.0;
            for cls in 0..k {
                let zf_hot = (mix.z_full.data()[p] as usize == cls) as u8 as f64;
                let zp_hot = (pseudo.z_pse.data()[p] as usize == cls) as u8 as f64;
                let want = if pseudo.valid[p] { alpha * zf_hot + (1.0 - alpha) * zp_hot } else { zf_hot };
                let got = target.data()[cls * h * w + p] as f64;
                if (got - want).abs() > 1e-6 {
                    out.target_mismatches += 1;
                }
                row += got;
            }
            out.max_row_sum_err = out.max_row_sum_err.max((row - 1.0).abs());
        }
    }
    out
}
