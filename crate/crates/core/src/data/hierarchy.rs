use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

/// Superclasses and the subclasses partitioning them. Subclass 0 is the
/// background and is its own superclass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySpec {
    /// Subclass count per superclass.
    k: Vec<usize>,
    /// Superclass of every subclass.
    parent: Vec<usize>,
}

impl HierarchySpec {
    pub fn new(k: Vec<usize>) -> Result<Self> {
        if k.len() < 2 {
            return Err(invalid("hierarchy", "need background and at least one foreground superclass"));
        }
        if k[0] != 1 {
            return Err(invalid("hierarchy", format!("background must have exactly one subclass, got {}", k[0])));
        }
        if k.iter().any(|&n| n == 0) {
            return Err(invalid("hierarchy", format!("empty superclass in {k:?}")));
        }
        let parent = k
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat(s).take(n))
            .collect();
        Ok(Self { k, parent })
    }

    /// Background plus one foreground superclass with `k_fg` subclasses.
    pub fn two_level(k_fg: usize) -> Result<Self> {
        if k_fg < 2 {
            return Err(invalid("hierarchy", format!("foreground needs at least 2 subclasses, got {k_fg}")));
        }
        Self::new(vec![1, k_fg])
    }

    /// Number of superclasses (R).
    pub fn num_super(&self) -> usize {
        self.k.len()
    }

    /// Number of subclasses including background (K).
    pub fn num_sub(&self) -> usize {
        self.parent.len()
    }

    pub fn k(&self) -> &[usize] {
        &self.k
    }

    pub fn parent(&self, sub: usize) -> usize {
        self.parent[sub]
    }

    /// Subclasses that refine `superclass`.
    pub fn children(&self, superclass: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_sub()).filter(move |&j| self.parent[j] == superclass)
    }

    /// Collapse a subclass map to its superclass map.
    pub fn collapse(&self, z: &LabelMap) -> LabelMap {
        LabelMap {
            h: z.h,
            w: z.w,
            data: z.data.iter().map(|&c| self.parent[c as usize] as u8).collect(),
        }
    }

    /// Index of the first pixel where `parent(z) != y`, if any.
    pub fn first_inconsistency(&self, y: &LabelMap, z: &LabelMap) -> Option<usize> {
        if y.dims() != z.dims() {
            return Some(0);
        }
        y.data
            .iter()
            .zip(&z.data)
            .position(|(&yc, &zc)| self.parent.get(zc as usize) != Some(&(yc as usize)))
    }
}

/// Per-pixel class indices, row-major `h x w`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(invalid("label_map", format!("{h}x{w} map with {} entries", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: u8) {
        self.data[y * self.w + x] = c;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of pixels equal to `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&c| c == class).collect()
    }

    /// One-hot `classes x h x w` encoding.
    pub fn one_hot<T: Real>(&self, classes: usize) -> Tensor<T> {
        let hw = self.h * self.w;
        let mut t = Tensor::zeros(&[classes, self.h, self.w]);
        for (i, &c) in self.data.iter().enumerate() {
            t.data_mut()[c as usize * hw + i] = T::one();
        }
        t
    }

    /// Labels as an `h x w` float tensor (the on-disk encoding).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.h, self.w], self.data.iter().map(|&c| c as f32).collect())
            .expect("label map dims are non-zero")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [h, w] = *t.shape() else {
            return Err(invalid("label_map", format!("expected HxW tensor, got {:?}", t.shape())));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(invalid("label_map", format!("label value {v} is not a class index")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(h, w, data)
    }
}
