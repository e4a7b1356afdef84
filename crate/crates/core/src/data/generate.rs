//! Synthetic images of nested blob objects.
//!
//! Each object is a wobbly ellipse split into concentric shells, one
//! foreground subclass per shell (outermost shell = subclass 1). Background
//! holds a smooth intensity ramp and uniform rectangular decoys drawn with
//! foreground-like intensities, so intensity alone does not separate the
//! superclasses.

use std::f64::consts::PI;

use super::hierarchy::{HierarchySpec, LabelMap};
use rayon::prelude::*;

use super::split::{normalize_intensity, split_dataset, DatasetSplit, Sample};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k_fg: usize,
    pub noise_sigma: f64,
    pub max_objects: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Objects have minor/major axis ratio in `[aspect_min, 1]`.
    pub aspect_min: f64,
    pub max_decoys: usize,
    /// Amplitude of the smooth background texture.
    pub clutter: f64,
    /// Per-image uniform jitter of each class mean.
    pub class_jitter: f64,
    /// Per-image gamma drawn log-uniformly from `[1/(1+s), 1+s]`.
    pub gamma_spread: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            k_fg: 3,
            noise_sigma: 0.05,
            max_objects: 3,
            radius_min: 9.0,
            radius_max: 15.0,
            aspect_min: 0.75,
            max_decoys: 2,
            clutter: 0.0,
            class_jitter: 0.0,
            gamma_spread: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn hierarchy(&self) -> Result<HierarchySpec> {
        HierarchySpec::two_level(self.k_fg)
    }

    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.k_fg) {
            return Err(invalid("generate", format!("k_fg must be 2 or 3, got {}", self.k_fg)));
        }
        if self.channels == 0 || self.max_objects == 0 {
            return Err(invalid("generate", "channels and max_objects must be positive"));
        }
        if !(self.radius_min > 1.0 && self.radius_min <= self.radius_max) {
            return Err(invalid("generate", "need 1 < radius_min <= radius_max"));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= 1.0) {
            return Err(invalid("generate", "aspect_min must be in (0, 1]"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("clutter", self.clutter),
            ("class_jitter", self.class_jitter),
            ("gamma_spread", self.gamma_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid("generate", format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Mean intensity of subclass `class` in channel `channel`.
    fn class_mean(&self, class: usize, channel: usize) -> f64 {
        // background, outer shell, middle shell, core
        const MEANS: [f64; 4] = [0.15, 0.55, 0.8, 0.35];
        let table = &MEANS[..=self.k_fg];
        table[(class + channel) % table.len()]
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    wobble: f64,
    phase: f64,
    /// Shell boundaries in normalized radius, outermost first (all < 1).
    shells: Vec<f64>,
}

impl Blob {
    /// Normalized radius of `(y, x)`; inside the object when `< 1`.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        let phi = v.atan2(u);
        r / (1.0 + self.wobble * (3.0 * phi + self.phase).sin())
    }

    fn subclass_at(&self, y: f64, x: f64) -> Option<usize> {
        let rho = self.rho(y, x);
        if rho >= 1.0 {
            return None;
        }
        Some(1 + self.shells.iter().filter(|&&t| rho < t).count())
    }

    fn extent(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.wobble)
    }
}

fn draw_blob(rng: &mut Rng, spec: &GeneratorSpec) -> Blob {
    let r = rng.uniform_range(spec.radius_min, spec.radius_max);
    let aspect = rng.uniform_range(spec.aspect_min, 1.0);
    let base: &[f64] = if spec.k_fg == 3 { &[0.72, 0.42] } else { &[0.55] };
    let shells = base.iter().map(|&t| t + rng.uniform_range(-0.06, 0.06)).collect();
    Blob {
        cy: 0.0,
        cx: 0.0,
        a: r,
        b: r * aspect,
        theta: rng.uniform_range(0.0, PI),
        wobble: rng.uniform_range(0.0, 0.12),
        phase: rng.uniform_range(0.0, 2.0 * PI),
        shells,
    }
}

/// A smaller blob with at most one inner region.
fn draw_decoy(rng: &mut Rng, spec: &GeneratorSpec) -> Blob {
    let r = rng.uniform_range(0.35 * spec.radius_min, 0.8 * spec.radius_max);
    let aspect = rng.uniform_range(0.5, 1.0);
    let shells = if rng.bernoulli() { vec![rng.uniform_range(0.35, 0.7)] } else { vec![] };
    Blob {
        cy: 0.0,
        cx: 0.0,
        a: r,
        b: r * aspect,
        theta: rng.uniform_range(0.0, PI),
        wobble: rng.uniform_range(0.0, 0.25),
        phase: rng.uniform_range(0.0, 2.0 * PI),
        shells,
    }
}

/// Decoy intensity: a foreground class mean or anything in the foreground
/// range.
fn decoy_tone(rng: &mut Rng, spec: &GeneratorSpec) -> f64 {
    if rng.bernoulli() {
        spec.class_mean(1 + rng.below(spec.k_fg), 0)
    } else {
        rng.uniform_range(0.3, 0.85)
    }
}

/// Render one sample; a pure function of `(seed, spec)`.
pub fn generate_sample(seed: u64, spec: &GeneratorSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = Rng::new(seed);
    let n_objects = 1 + rng.below(spec.max_objects);

    let mut blobs: Vec<Blob> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut blob = draw_blob(&mut rng, spec);
        let e = blob.extent() + 1.0;
        if 2.0 * e >= h.min(w) as f64 {
            return Err(Error::Generation {
                seed,
                msg: format!("object of extent {e:.1} cannot fit a {h}x{w} image"),
            });
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            blob.cy = rng.uniform_range(e, h as f64 - e);
            blob.cx = rng.uniform_range(e, w as f64 - e);
            let clear = blobs.iter().all(|o| {
                let d = ((o.cy - blob.cy).powi(2) + (o.cx - blob.cx).powi(2)).sqrt();
                d > o.extent() + blob.extent() + 2.0
            });
            if clear {
                placed = true;
                break;
            }
        }
        if !placed {
            if i == 0 {
                return Err(Error::Generation {
                    seed,
                    msg: format!("no valid placement after {PLACEMENT_RETRIES} tries"),
                });
            }
            // The image is full; keep the objects placed so far.
            break;
        }
        blobs.push(blob);
    }

    let mut z = LabelMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(c) = blobs.iter().find_map(|b| b.subclass_at(py, px)) {
                z.set(y, x, c as u8);
            }
        }
    }

    // Decoys: blobs of one or two tones with foreground-like intensities,
    // placed clear of the objects and of each other.
    let n_decoys = rng.below(spec.max_decoys + 1);
    let mut decoys: Vec<(Blob, Vec<f64>)> = Vec::with_capacity(n_decoys);
    for _ in 0..n_decoys {
        let mut blob = draw_decoy(&mut rng, spec);
        let e = blob.extent() + 1.0;
        if 2.0 * e >= h.min(w) as f64 {
            continue;
        }
        let placed = (0..PLACEMENT_RETRIES / 4).any(|_| {
            blob.cy = rng.uniform_range(e, h as f64 - e);
            blob.cx = rng.uniform_range(e, w as f64 - e);
            blobs.iter().chain(decoys.iter().map(|(d, _)| d)).all(|o| {
                let d = ((o.cy - blob.cy).powi(2) + (o.cx - blob.cx).powi(2)).sqrt();
                d > o.extent() + blob.extent() + 1.0
            })
        });
        if placed {
            let tones = (0..=blob.shells.len()).map(|_| decoy_tone(&mut rng, spec)).collect();
            decoys.push((blob, tones));
        }
    }

    let gain = rng.uniform_range(0.85, 1.15);
    let gamma = if spec.gamma_spread > 0.0 {
        let l = (1.0 + spec.gamma_spread).ln();
        rng.uniform_range(-l, l).exp()
    } else {
        1.0
    };
    let jitter: Vec<f64> = (0..=spec.k_fg)
        .map(|_| rng.uniform_range(-1.0, 1.0) * spec.class_jitter)
        .collect();
    let ramp = (rng.uniform_range(-0.08, 0.08), rng.uniform_range(-0.08, 0.08));
    let waves: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            let f = rng.uniform_range(0.08, 0.35);
            let a = rng.uniform_range(0.0, PI);
            [f * a.cos(), f * a.sin(), rng.uniform_range(0.0, 2.0 * PI)]
        })
        .collect();
    let mut image = Tensor::zeros(&[spec.channels, h, w]);
    for c in 0..spec.channels {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let class = z.data()[i] as usize;
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = match (class, decoys.iter().find_map(|(b, t)| b.subclass_at(py, px).map(|r| t[r - 1]))) {
                    (0, Some(tone)) => tone,
                    _ => spec.class_mean(class, c) + jitter[class],
                };
                v *= gain;
                if class == 0 {
                    v += ramp.0 * (y as f64 / h as f64 - 0.5) + ramp.1 * (x as f64 / w as f64 - 0.5);
                    let tex: f64 = waves.iter().map(|[fy, fx, ph]| (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
                    v += spec.clutter * tex / 3.0;
                }
                v += spec.noise_sigma * rng.normal();
                image.data_mut()[c * h * w + i] = v.clamp(0.0, 1.0).powf(gamma) as f32;
            }
        }
    }
    let image = normalize_intensity(&image)?;
    let hier = spec.hierarchy()?;
    let y = hier.collapse(&z);
    Ok(Sample {
        image,
        y,
        z: Some(z),
        seed,
    })
}

/// Sizes of a generated dataset: `n` training samples of which `n_sub` keep
/// their subclass maps, plus validation and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub n_sub: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub generator: GeneratorSpec,
}

impl DatasetSpec {
    pub fn new(n: usize, n_sub: usize, seed: u64) -> Self {
        Self {
            n,
            n_sub,
            n_val: 20,
            n_test: 40,
            seed,
            generator: GeneratorSpec::default(),
        }
    }
}

/// Generate and split a dataset. Sample seeds are drawn from one stream
/// derived from `spec.seed`, so the result is a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<DatasetSplit> {
    if spec.n == 0 {
        return Err(invalid("generate_dataset", "training set must not be empty"));
    }
    if spec.n_sub > spec.n {
        return Err(invalid(
            "generate_dataset",
            format!("n_sub {} exceeds training set size {}", spec.n_sub, spec.n),
        ));
    }
    let total = spec.n + spec.n_val + spec.n_test;
    let mut rng = Rng::derive(spec.seed, 0);
    let seeds: Vec<u64> = (0..total).map(|_| rng.next_u64()).collect();
    let mut samples = seeds
        .par_iter()
        .map(|&s| generate_sample(s, &spec.generator))
        .collect::<Result<Vec<_>>>()?;
    let test = samples.split_off(spec.n + spec.n_val);
    let val = samples.split_off(spec.n);
    let mut split = split_dataset(samples, spec.n_sub, spec.seed)?;
    split.val = val;
    split.test = test;
    Ok(split)
}
