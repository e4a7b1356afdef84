//! Fused softmax losses over channel logits.

use crate::data::{HierarchySpec, LabelMap};
use crate::error::{invalid, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::{Real, Tensor};

use super::model::HeadOutputs;

pub const DICE_EPS: f64 = 1e-5;
pub const NL_EPS: f64 = 1e-7;
const ROW_SUM_TOL: f64 = 1e-4;

/// Backward rule for losses whose logit gradient is computed in the forward
/// pass: the input gradient is the stored tensor scaled by the upstream value.
struct PrecomputedGrad<T: Real> {
    name: &'static str,
    grad: Tensor<T>,
}

impl<T: Real> CustomOp<T> for PrecomputedGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, upstream: &Tensor<T>, _inputs: &[&Tensor<T>]) -> Vec<Option<Tensor<T>>> {
        let s = upstream.data()[0];
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// Log-softmax of one pixel's logits into `out`.
fn log_softmax_pixel(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Cross entropy plus soft Dice loss.
///
/// `target` has the logits' shape and holds a distribution over classes per
/// pixel. `weights` (`N x H x W`) selects or weights pixels; only pixels with
/// positive weight contribute. Dice sums run over all contributing pixels of
/// the batch:
///
/// `CE = sum_i w_i (-sum_c t_ci log p_ci) / sum_i w_i`
/// `Dice = 1 - mean_c (2 sum_i w_i p_ci t_ci + eps) / (sum_i w_i p_ci + sum_i w_i t_ci + eps)`
pub fn ce_dice_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, weights: Option<&[T]>) -> Result<Var> {
    let (n, c, h, w) = g.value(logits).dims4("ce_dice_loss")?;
    if target.shape() != g.value(logits).shape() {
        return Err(crate::Error::Shape {
            op: "ce_dice_loss",
            left: g.value(logits).shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let hw = h * w;
    if let Some(wts) = weights {
        if wts.len() != n * hw {
            return Err(invalid("ce_dice_loss", format!("weight mask has {} entries, need {}", wts.len(), n * hw)));
        }
    }
    let z = g.value(logits).data();
    let t = target.data();
    let weight = |i: usize, p: usize| weights.map_or(1.0, |m| m[i * hw + p].as_f64());

    let mut probs = vec![0.0f64; z.len()];
    let (mut ce_num, mut wsum) = (0.0f64, 0.0f64);
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut tsum = vec![0.0f64; c];
    let mut zl = vec![0.0f64; c];
    let mut lp = vec![0.0f64; c];
    for i in 0..n {
        for p in 0..hw {
            let wi = weight(i, p);
            if wi <= 0.0 {
                continue;
            }
            let mut row = 0.0;
            for ch in 0..c {
                let k = (i * c + ch) * hw + p;
                zl[ch] = z[k].as_f64();
                row += t[k].as_f64();
            }
            if (row - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(
                    "ce_dice_loss",
                    format!("target at item {i}, pixel {p} sums to {row}, expected 1"),
                ));
            }
            log_softmax_pixel(&zl, &mut lp);
            wsum += wi;
            for ch in 0..c {
                let k = (i * c + ch) * hw + p;
                let tk = t[k].as_f64();
                let pk = lp[ch].exp();
                probs[k] = pk;
                ce_num -= wi * tk * lp[ch];
                inter[ch] += wi * pk * tk;
                psum[ch] += wi * pk;
                tsum[ch] += wi * tk;
            }
        }
    }
    if wsum <= 0.0 {
        return Err(invalid("ce_dice_loss", "every pixel is masked out"));
    }
    let ce = ce_num / wsum;
    let cf = c as f64;
    let mut dice_mean = 0.0;
    for ch in 0..c {
        dice_mean += (2.0 * inter[ch] + DICE_EPS) / (psum[ch] + tsum[ch] + DICE_EPS);
    }
    dice_mean /= cf;
    let loss = ce + (1.0 - dice_mean);

    let mut grad = vec![T::zero(); z.len()];
    let mut gd = vec![0.0f64; c];
    for i in 0..n {
        for p in 0..hw {
            let wi = weight(i, p);
            if wi <= 0.0 {
                continue;
            }
            let mut tot_t = 0.0;
            let mut dot = 0.0;
            for ch in 0..c {
                let k = (i * c + ch) * hw + p;
                let tk = t[k].as_f64();
                let s = psum[ch] + tsum[ch] + DICE_EPS;
                gd[ch] = -(wi / cf) * (2.0 * tk * s - (2.0 * inter[ch] + DICE_EPS)) / (s * s);
                dot += gd[ch] * probs[k];
                tot_t += tk;
            }
            for ch in 0..c {
                let k = (i * c + ch) * hw + p;
                let pk = probs[k];
                let d_ce = wi * (pk * tot_t - t[k].as_f64()) / wsum;
                let d_dice = pk * (gd[ch] - dot);
                grad[k] = T::from_f64(d_ce + d_dice);
            }
        }
    }
    let grad = Tensor::new(vec![n, c, h, w], grad)?;
    g.custom(
        &[logits],
        Tensor::scalar(T::from_f64(loss)),
        Box::new(PrecomputedGrad { name: "ce_dice_loss", grad }),
    )
}

/// Negative learning: mean over pixels of `-log(1 - q + 1e-7)` where `q` is
/// the subclass probability mass outside the pixel's superclass.
pub fn negative_learning_loss<T: Real>(
    g: &mut Graph<T>,
    sub_logits: Var,
    y: &[&LabelMap],
    hierarchy: &HierarchySpec,
) -> Result<Var> {
    let (n, k, h, w) = g.value(sub_logits).dims4("negative_learning_loss")?;
    if k != hierarchy.num_sub() || y.len() != n || y.iter().any(|m| m.dims() != (h, w)) {
        return Err(invalid(
            "negative_learning_loss",
            format!("logits {:?} do not match {} superclass maps / K={}", g.value(sub_logits).shape(), y.len(), hierarchy.num_sub()),
        ));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let z = g.value(sub_logits).data();
    let mut zl = vec![0.0f64; k];
    let mut lp = vec![0.0f64; k];
    let mut loss = 0.0f64;
    let mut grad = vec![T::zero(); z.len()];
    for i in 0..n {
        for p in 0..hw {
            let sup = y[i].data()[p] as usize;
            for j in 0..k {
                zl[j] = z[(i * k + j) * hw + p].as_f64();
            }
            log_softmax_pixel(&zl, &mut lp);
            let right: f64 = (0..k).filter(|&j| hierarchy.parent(j) == sup).map(|j| lp[j].exp()).sum();
            let s = right + NL_EPS;
            loss -= s.ln();
            // d(-ln s)/dz_j = p_j * (s_right/s - [j right]/s)
            for j in 0..k {
                let pj = lp[j].exp();
                let ind = if hierarchy.parent(j) == sup { 1.0 } else { 0.0 };
                grad[(i * k + j) * hw + p] = T::from_f64(pj * (right - ind) / s / m);
            }
        }
    }
    let grad = Tensor::new(vec![n, k, h, w], grad)?;
    g.custom(
        &[sub_logits],
        Tensor::scalar(T::from_f64(loss / m)),
        Box::new(PrecomputedGrad {
            name: "negative_learning_loss",
            grad,
        }),
    )
}

/// One-hot `N x classes x H x W` targets from label maps.
pub fn one_hot_batch<T: Real>(maps: &[&LabelMap], classes: usize) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = maps.iter().map(|m| m.one_hot(classes)).collect();
    let refs: Vec<&Tensor<T>> = items.iter().collect();
    Tensor::stack(&refs)
}

/// Superclass loss on every item and subclass loss on items that carry a
/// subclass map. Without any subclass map the subclass loss is a constant 0
/// with no gradient.
pub fn supervised_losses<T: Real>(
    g: &mut Graph<T>,
    outputs: &HeadOutputs,
    y: &[&LabelMap],
    z: &[Option<&LabelMap>],
    hierarchy: &HierarchySpec,
) -> Result<(Var, Var)> {
    if y.len() != z.len() {
        return Err(invalid("supervised_losses", "superclass and subclass lists differ in length"));
    }
    for (i, (yi, zi)) in y.iter().zip(z).enumerate() {
        if let Some(zi) = zi {
            if let Some(px) = hierarchy.first_inconsistency(yi, zi) {
                return Err(invalid(
                    "supervised_losses",
                    format!("item {i}: subclass label disagrees with superclass label at pixel {px}"),
                ));
            }
        }
    }
    let super_t = one_hot_batch(y, hierarchy.num_super())?;
    let l_c = ce_dice_loss(g, outputs.super_logits, &super_t, None)?;

    if z.iter().all(Option::is_none) {
        let zero = g.input(Tensor::scalar(T::zero()));
        return Ok((l_c, zero));
    }
    let (h, w) = y[0].dims();
    let blank = LabelMap::zeros(h, w);
    let maps: Vec<&LabelMap> = z.iter().map(|m| m.unwrap_or(&blank)).collect();
    let mut weights = Vec::with_capacity(z.len() * h * w);
    for m in z {
        let v = if m.is_some() { T::one() } else { T::zero() };
        weights.extend(std::iter::repeat(v).take(h * w));
    }
    let sub_t = one_hot_batch(&maps, hierarchy.num_sub())?;
    let l_f = ce_dice_loss(g, outputs.sub_logits, &sub_t, Some(&weights))?;
    Ok((l_c, l_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn saturated_correct_logits_give_tiny_loss() {
        let z = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let t: Tensor<f64> = one_hot_batch(&[&z], 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(t.map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
        let l = ce_dice_loss(&mut g, x, &t, None).unwrap();
        assert!(g.value(l).data()[0] < 1e-3);
    }

    #[test]
    fn uniform_logits_balanced_target() {
        let z = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let t: Tensor<f64> = one_hot_batch(&[&z], 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 1, 2]));
        let l = ce_dice_loss(&mut g, x, &t, None).unwrap();
        // per class: inter 0.5, psum 1, tsum 1 -> (1 + eps)/(2 + eps)
        let dice = (1.0 + DICE_EPS) / (2.0 + DICE_EPS);
        let expected = std::f64::consts::LN_2 + 1.0 - dice;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn target_validation_and_full_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 1, 1]));
        let bad = Tensor::full(&[1, 2, 1, 1], 0.7);
        assert!(ce_dice_loss(&mut g, x, &bad, None).is_err());
        let ok = logits(&[1, 2, 1, 1], |i| i as f64);
        assert!(ce_dice_loss(&mut g, x, &ok, None).is_ok());
        assert!(ce_dice_loss(&mut g, x, &ok.map(|v| v / 1.0), Some(&[0.0])).is_err());
    }

    #[test]
    fn negative_learning_bounds() {
        let hier = HierarchySpec::two_level(2).unwrap();
        let y = LabelMap::new(1, 1, vec![1]).unwrap();
        let mut g = Graph::<f64>::new();
        let right = g.input(logits(&[1, 3, 1, 1], |j| if j == 2 { 30.0 } else { -30.0 }));
        let l = negative_learning_loss(&mut g, right, &[&y], &hier).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
        let wrong = g.input(logits(&[1, 3, 1, 1], |j| if j == 0 { 60.0 } else { -60.0 }));
        let l = negative_learning_loss(&mut g, wrong, &[&y], &hier).unwrap();
        assert!((g.value(l).data()[0] - 16.118).abs() < 1e-2);
    }
}
