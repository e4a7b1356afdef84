//! Pseudo-label quality against the withheld coarse labels. Reads hidden
//! labels, so it is never called from the training step.

use crate::data::DatasetSplit;
use crate::error::Result;
use crate::hiermix::{make_pseudo_label, sample_transform};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::segnet::SegNet;
use crate::tensor::Tensor;

/// Counts over a set of valid pseudo-labelled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub valid: usize,
    /// Valid pixels whose pseudo label equals the withheld subclass.
    pub correct: usize,
    /// Expected correct count when guessing uniformly among the subclasses
    /// of the known superclass.
    pub random_correct: f64,
}

impl Tally {
    fn add(&mut self, correct: bool, choices: usize) {
        self.valid += 1;
        self.correct += correct as usize;
        self.random_correct += 1.0 / choices as f64;
    }

    pub fn precision(&self) -> Option<f64> {
        (self.valid > 0).then(|| self.correct as f64 / self.valid as f64)
    }

    pub fn random_precision(&self) -> Option<f64> {
        (self.valid > 0).then(|| self.random_correct / self.valid as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PseudoPrecision {
    pub pixels: usize,
    pub all: Tally,
    /// Foreground pixels only; background is a single subclass and always
    /// counts as correct.
    pub foreground: Tally,
}

/// Pseudo labels at threshold `tau` on full coarse images that have withheld
/// labels, compared with those labels.
pub fn pseudo_label_precision(
    net: &SegNet,
    store: &ParamStore<f32>,
    split: &DatasetSplit,
    tau: f64,
    seed: u64,
) -> Result<PseudoPrecision> {
    let hier = &net.config().hierarchy;
    let k = hier.num_sub();
    let mut rng = Rng::new(seed);
    let mut out = PseudoPrecision::default();
    for (i, s) in split.coarse.iter().enumerate() {
        let Some(truth) = split.hidden_label(i) else { continue };
        let (h, w) = s.dims();
        let t = sample_transform(&mut rng);
        let a = net.predict_probs(store, &Tensor::stack(&[&s.image])?)?.reshape(&[k, h, w])?;
        let moved = t.apply(&s.image)?;
        let b = t.invert(&net.predict_probs(store, &Tensor::stack(&[&moved])?)?)?.reshape(&[k, h, w])?;
        let pseudo = make_pseudo_label(&a, &b, &s.y, tau, hier)?;
        out.pixels += h * w;
        for (p, &v) in pseudo.valid.iter().enumerate() {
            if v {
                let y = s.y.data()[p] as usize;
                let correct = pseudo.z_pse.data()[p] == truth.data()[p];
                let choices = hier.children(y).count();
                out.all.add(correct, choices);
                if y != 0 {
                    out.foreground.add(correct, choices);
                }
            }
        }
    }
    Ok(out)
}
