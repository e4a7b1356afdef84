//! Dice and 95th-percentile Hausdorff distance, per class and averaged.
//!
//! HD95 pools the directed nearest-boundary distances in both directions and
//! takes the nearest-rank 95th percentile. Boundary pixels are mask pixels
//! with a 4-neighbour outside the mask or outside the image. Distances are in
//! pixels (spacing 1).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{HierarchySpec, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(crate::error::invalid("mask", format!("{h}x{w} mask with {} entries", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_labels(m: &LabelMap, class: u8) -> Self {
        let (h, w) = m.dims();
        Self { h, w, data: m.mask(class) }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.data[y as usize * self.w + x as usize]
    }

    /// Mask pixels with a 4-neighbour outside the mask or the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.data[y * self.w + x] {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                if [(yi - 1, xi), (yi + 1, xi), (yi, xi - 1), (yi, xi + 1)]
                    .iter()
                    .any(|&(a, b)| !self.at(a, b))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_dims(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op,
            left: vec![a.h, a.w],
            right: vec![b.h, b.w],
        });
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt, "dice_score")?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        sa += a as usize;
        sb += b as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

const FAR: f64 = 1e18;

/// One-dimensional squared distance transform of sampled function `f`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest point of
/// `points` on an `h x w` grid.
fn squared_distance_field(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Nearest-rank percentile `q` (in percent) of an unsorted multiset.
pub fn nearest_rank(values: &mut [f64], q: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    let rank = (q * n).div_ceil(100).max(1);
    Some(values[rank - 1])
}

/// 95th-percentile symmetric boundary distance. `None` when exactly one mask
/// is empty; 0 when both are.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check_dims(pred, gt, "hd95")?;
    let (ba, bb) = (pred.boundary(), gt.boundary());
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    if pred == gt {
        return Ok(Some(0.0));
    }
    let (h, w) = pred.dims();
    let to_b = squared_distance_field(&bb, h, w);
    let to_a = squared_distance_field(&ba, h, w);
    let mut pooled: Vec<f64> = ba
        .iter()
        .map(|&(y, x)| to_b[y * w + x].sqrt())
        .chain(bb.iter().map(|&(y, x)| to_a[y * w + x].sqrt()))
        .collect();
    Ok(nearest_rank(&mut pooled, 95))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub dice: f64,
    pub hd95: Option<f64>,
}

/// Per-class scores with averages. `mean_hd95` skips undefined entries,
/// which are counted in `undefined_hd95`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassReport {
    pub per_class: BTreeMap<usize, ClassScore>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub undefined_hd95: usize,
    /// Foreground superclasses after collapsing both maps.
    pub superclass: BTreeMap<usize, ClassScore>,
    pub super_mean_dice: f64,
}

fn means(scores: &BTreeMap<usize, ClassScore>) -> (f64, Option<f64>, usize) {
    let n = scores.len().max(1) as f64;
    let mean_dice = scores.values().map(|s| s.dice).sum::<f64>() / n;
    let defined: Vec<f64> = scores.values().filter_map(|s| s.hd95).collect();
    let mean_hd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean_dice, mean_hd, scores.len() - defined.len())
}

impl ClassReport {
    fn from_scores(per_class: BTreeMap<usize, ClassScore>, superclass: BTreeMap<usize, ClassScore>) -> Self {
        let (mean_dice, mean_hd95, undefined_hd95) = means(&per_class);
        let (super_mean_dice, _, _) = means(&superclass);
        Self {
            per_class,
            mean_dice,
            mean_hd95,
            undefined_hd95,
            superclass,
            super_mean_dice,
        }
    }

    /// Average per-sample reports class by class (HD95 over defined samples).
    pub fn aggregate(reports: &[ClassReport]) -> ClassReport {
        fn avg(reports: &[ClassReport], pick: impl Fn(&ClassReport) -> &BTreeMap<usize, ClassScore>) -> (BTreeMap<usize, ClassScore>, usize) {
            let mut out = BTreeMap::new();
            let mut undefined = 0;
            let classes: Vec<usize> = reports.first().map(|r| pick(r).keys().copied().collect()).unwrap_or_default();
            for c in classes {
                let scores: Vec<ClassScore> = reports.iter().filter_map(|r| pick(r).get(&c).copied()).collect();
                let dice = scores.iter().map(|s| s.dice).sum::<f64>() / scores.len() as f64;
                let hds: Vec<f64> = scores.iter().filter_map(|s| s.hd95).collect();
                undefined += scores.len() - hds.len();
                let hd95 = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
                out.insert(c, ClassScore { dice, hd95 });
            }
            (out, undefined)
        }
        let (per_class, undefined) = avg(reports, |r| &r.per_class);
        let (superclass, _) = avg(reports, |r| &r.superclass);
        let mut report = Self::from_scores(per_class, superclass);
        report.undefined_hd95 = undefined;
        report
    }

    /// `class,dice,hd95` rows: subclasses, their mean, then superclasses
    /// (`super<r>`). Undefined HD95 is written as `NA`.
    pub fn to_csv(&self) -> String {
        let hd = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let mut s = String::from("class,dice,hd95\n");
        for (c, sc) in &self.per_class {
            let _ = writeln!(s, "{c},{:.6},{}", sc.dice, hd(sc.hd95));
        }
        let _ = writeln!(s, "mean,{:.6},{}", self.mean_dice, hd(self.mean_hd95));
        for (c, sc) in &self.superclass {
            let _ = writeln!(s, "super{c},{:.6},{}", sc.dice, hd(sc.hd95));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let hd = |v: Option<f64>| v.map_or("   n/a".to_string(), |v| format!("{v:6.2}"));
        let mut s = String::from("class      dice   hd95(px)\n");
        for (c, sc) in &self.per_class {
            let _ = writeln!(s, "sub {c:<5} {:6.4} {}", sc.dice, hd(sc.hd95));
        }
        let _ = writeln!(s, "mean      {:6.4} {}", self.mean_dice, hd(self.mean_hd95));
        for (c, sc) in &self.superclass {
            let _ = writeln!(s, "super {c:<3} {:6.4} {}", sc.dice, hd(sc.hd95));
        }
        if self.undefined_hd95 > 0 {
            let _ = writeln!(s, "({} undefined hd95 entries excluded)", self.undefined_hd95);
        }
        s
    }
}

/// Metrics for every foreground subclass, plus the foreground superclasses
/// after collapsing both maps through the hierarchy.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, hierarchy: &HierarchySpec) -> Result<ClassReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![pred.height(), pred.width()],
            right: vec![gt.height(), gt.width()],
        });
    }
    let score = |p: &LabelMap, g: &LabelMap, c: usize| -> Result<ClassScore> {
        let (pm, gm) = (Mask::from_labels(p, c as u8), Mask::from_labels(g, c as u8));
        Ok(ClassScore {
            dice: dice_score(&pm, &gm)?,
            hd95: hd95(&pm, &gm)?,
        })
    };
    let mut per_class = BTreeMap::new();
    for c in 1..hierarchy.num_sub() {
        per_class.insert(c, score(pred, gt, c)?);
    }
    let (ps, gs) = (hierarchy.collapse(pred), hierarchy.collapse(gt));
    let mut superclass = BTreeMap::new();
    for r in 1..hierarchy.num_super() {
        superclass.insert(r, score(&ps, &gs, r)?);
    }
    Ok(ClassReport::from_scores(per_class, superclass))
}
