use super::hierarchy::LabelMap;
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An image with its superclass map and, for fine samples, its subclass map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub y: LabelMap,
    pub z: Option<LabelMap>,
    pub seed: u64,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.y.dims()
    }

    pub fn has_foreground(&self) -> bool {
        self.y.data().iter().any(|&c| c != 0)
    }
}

/// Training samples split into subclass-labelled (fine) and superclass-only
/// (coarse) sets, plus evaluation sets that keep their subclass labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub fine: Vec<Sample>,
    pub coarse: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    hidden: Vec<Option<LabelMap>>,
}

impl DatasetSplit {
    pub fn new(
        fine: Vec<Sample>,
        coarse: Vec<Sample>,
        val: Vec<Sample>,
        test: Vec<Sample>,
        hidden: Vec<Option<LabelMap>>,
    ) -> Self {
        let mut hidden = hidden;
        hidden.resize(coarse.len(), None);
        Self {
            fine,
            coarse,
            val,
            test,
            hidden,
        }
    }

    /// Subclass labels withheld from coarse sample `i`. Diagnostics only:
    /// training never reads these.
    pub fn hidden_label(&self, i: usize) -> Option<&LabelMap> {
        self.hidden.get(i).and_then(Option::as_ref)
    }

    pub fn train_len(&self) -> usize {
        self.fine.len() + self.coarse.len()
    }

    /// Keep only the first `n_sub` fine samples; the rest lose their subclass
    /// labels and join the coarse set.
    pub fn restrict_fine(mut self, n_sub: usize) -> Result<Self> {
        if n_sub > self.fine.len() {
            return Err(invalid(
                "restrict_fine",
                format!("n_sub {n_sub} exceeds the {} fine samples available", self.fine.len()),
            ));
        }
        for mut s in self.fine.split_off(n_sub) {
            self.hidden.push(s.z.take());
            self.coarse.push(s);
        }
        Ok(self)
    }

    /// Drop the coarse set entirely (subclass-only training).
    pub fn without_coarse(mut self) -> Self {
        self.coarse.clear();
        self.hidden.clear();
        self
    }
}

/// Choose `n_sub` fine samples uniformly without replacement; the others keep
/// only their superclass labels.
pub fn split_dataset(samples: Vec<Sample>, n_sub: usize, seed: u64) -> Result<DatasetSplit> {
    let n = samples.len();
    if n_sub > n {
        return Err(invalid(
            "split_dataset",
            format!("n_sub {n_sub} exceeds training set size {n}"),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut is_fine = vec![false; n];
    for i in rng.sample_without_replacement(n, n_sub) {
        is_fine[i] = true;
    }
    let mut fine = Vec::with_capacity(n_sub);
    let mut coarse = Vec::with_capacity(n - n_sub);
    let mut hidden = Vec::with_capacity(n - n_sub);
    for (mut s, fine_flag) in samples.into_iter().zip(is_fine) {
        if s.z.is_none() {
            return Err(invalid("split_dataset", format!("sample with seed {} has no subclass map", s.seed)));
        }
        if fine_flag {
            fine.push(s);
        } else {
            hidden.push(s.z.take());
            coarse.push(s);
        }
    }
    Ok(DatasetSplit::new(fine, coarse, Vec::new(), Vec::new(), hidden))
}

/// The same uniformly placed `ph x pw` window of image and label maps.
pub fn random_crop(sample: &Sample, (ph, pw): (usize, usize), rng: &mut Rng) -> Result<Sample> {
    let (h, w) = sample.dims();
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(invalid(
            "random_crop",
            format!("patch {ph}x{pw} does not fit image {h}x{w}"),
        ));
    }
    let top = rng.below(h - ph + 1);
    let left = rng.below(w - pw + 1);
    Ok(crop_at(sample, top, left, ph, pw))
}

pub(crate) fn crop_at(sample: &Sample, top: usize, left: usize, ph: usize, pw: usize) -> Sample {
    let (h, w) = sample.dims();
    let c = sample.image.shape()[0];
    let mut img = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in top..top + ph {
            let row = ch * h * w + y * w;
            img.extend_from_slice(&sample.image.data()[row + left..row + left + pw]);
        }
    }
    let crop_map = |m: &LabelMap| {
        let mut out = Vec::with_capacity(ph * pw);
        for y in top..top + ph {
            out.extend_from_slice(&m.data()[y * w + left..y * w + left + pw]);
        }
        LabelMap::new(ph, pw, out).expect("crop window is non-empty")
    };
    Sample {
        image: Tensor::new(vec![c, ph, pw], img).expect("crop window is non-empty"),
        y: crop_map(&sample.y),
        z: sample.z.as_ref().map(crop_map),
        seed: sample.seed,
    }
}

/// Min-max rescale to `[0, 1]`; a constant image maps to zeros.
pub fn normalize_intensity(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !image.all_finite() {
        return Err(invalid("normalize_intensity", "image contains non-finite values"));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(Tensor::zeros(image.shape()));
    }
    let range = hi - lo;
    Ok(image.map(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}
