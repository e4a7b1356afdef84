use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with its accumulated gradient and SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            momentum,
        }
    }
}

/// Owns every parameter and non-trainable buffer (batch-norm running stats)
/// of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    /// Two distinct buffers borrowed mutably at once.
    pub fn buffer_pair_mut(&mut self, a: BufferId, b: BufferId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0, "buffer_pair_mut needs distinct buffers");
        if a.0 < b.0 {
            let (lo, hi) = self.buffers.split_at_mut(b.0);
            (&mut lo[a.0].1, &mut hi[0].1)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a.0);
            (&mut hi[0].1, &mut lo[b.0].1)
        }
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same parameters and buffers converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    momentum: p.momentum.cast(),
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, b)| (n.clone(), b.cast())).collect(),
        }
    }
}
