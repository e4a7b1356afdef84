//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Every operator appends one node to the tape, so the tape is already in
//! topological order and `backward` is a single reverse sweep. Nodes that do
//! not depend on any gradient-requiring leaf keep only their value.

use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, Conv2dDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator defined outside this module (fused losses). Only the
/// backward rule is needed; the forward value is computed by the caller.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input given the output gradient.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, upstream: &Tensor<T>, inputs: &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Batch statistics; optionally folds them into the running averages.
    Train { update_running: bool },
    /// Running statistics; a fixed per-channel affine map.
    Eval,
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat {
        inputs: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x) | Op::Upsample2(x) | Op::Softmax(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Scale(x, _) => vec![*x],
            Op::MaxPool2 { x, .. } | Op::Crop { x, .. } => vec![*x],
            Op::Concat { inputs } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are plain constants; nothing records
    /// backward state.
    pub fn no_grad() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let op = if requires_grad || matches!(op, Op::Param(_)) { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = store.get(id).value.clone();
        let v = if self.track_params {
            self.nodes.push(Node {
                value,
                op: Op::Param(id),
                requires_grad: true,
            });
            Var(self.nodes.len() - 1)
        } else {
            self.input(value)
        };
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let bad = || Error::Shape {
            op: "conv2d",
            left: vec![n, c_in, h, wd],
            right: ws.clone(),
        };
        let [c_out, wc, kh, kw] = *ws.as_slice() else {
            return Err(bad());
        };
        if wc != c_in || kh != kw || kh % 2 == 0 {
            return Err(bad());
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    left: vec![c_out],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let dims = Conv2dDims {
            n,
            c_in,
            c_out,
            h,
            w: wd,
            k: kh,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![n, c_out, h, wd], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, dims })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("max_pool2d", format!("odd spatial size {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push("max_pool2d", value, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample")?;
        let out = kernels::upsample2_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push("upsample", value, Op::Upsample2(x))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat")?;
        let mut channels = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape {
                    op: "concat",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(v).shape().to_vec(),
                });
            }
            channels += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for i in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * hw;
                out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Batch normalization with per-channel affine `gamma`, `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        for (what, t) in [
            ("gamma", self.value(gamma).shape()),
            ("beta", self.value(beta).shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if t != [c] {
                return Err(invalid(
                    "batch_norm",
                    format!("{what} has shape {t:?}, input has {c} channels"),
                ));
            }
        }
        let hw = h * w;
        let eps = T::from_f64(BN_EPS);
        let (mean, inv_std, batch_stats) = match mode {
            BnMode::Train { update_running } => {
                let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, hw);
                if update_running {
                    let m = T::from_f64(BN_MOMENTUM);
                    let count = (n * hw) as f64;
                    let unbias = T::from_f64(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                    for ch in 0..c {
                        let rm = &mut running_mean.data_mut()[ch];
                        *rm = (T::one() - m) * *rm + m * mean[ch];
                        let rv = &mut running_var.data_mut()[ch];
                        *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
                    }
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv, true)
            }
            BnMode::Eval => {
                let inv = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.data().to_vec(), inv, false)
            }
        };
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xh = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("softmax")?;
        let out = kernels::softmax_channels(self.value(x).data(), n, c, h * w);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push("add", value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s))
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of an NCHW tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.value(x).dims4("crop")?;
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return Err(invalid(
                "crop",
                format!("window {h}x{w} at ({top},{left}) outside {ih}x{iw}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in top..top + h {
                let row = plane * ih * iw + y * iw;
                out.extend_from_slice(&src[row + left..row + left + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push("crop", value, Op::Crop { x, top, left })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push("mean", value, Op::Mean(x))
    }

    /// Record an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter and
    /// gradient-requiring input it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            if let Some(bad) = inputs.iter().find(|v| v.0 >= i) {
                return Err(Error::Graph(format!(
                    "cycle: node {i} consumes node {} recorded after it",
                    bad.0
                )));
            }
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        out.inputs.insert(i, g);
                    }
                    continue;
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                    continue;
                }
                _ => {}
            }
            for (input, ig) in inputs.iter().zip(self.local_grads(node, &g)?) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Run [`Graph::backward`] and add the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, dims } => {
                let grads = kernels::conv2d_backward(val(x).data(), val(w).data(), g.data(), dims, needs(x));
                let mut v = vec![
                    grads.input.map(|d| Tensor::new(val(x).shape().to_vec(), d)).transpose()?,
                    Some(Tensor::new(val(w).shape().to_vec(), grads.weight)?),
                ];
                if b.is_some() {
                    v.push(Some(Tensor::new(vec![dims.c_out], grads.bias)?));
                }
                v
            }
            Op::Relu(_) => {
                let mut d = g.clone();
                for (o, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *o = T::zero();
                    }
                }
                vec![Some(d)]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(val(x).shape());
                for (&a, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[a as usize] += gv;
                }
                vec![Some(d)]
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = val(x).dims4("upsample")?;
                vec![Some(Tensor::new(
                    val(x).shape().to_vec(),
                    kernels::upsample2_backward(g.data(), n, c, h, w),
                )?)]
            }
            Op::Concat { inputs } => {
                let (n, _, h, w) = g.dims4("concat")?;
                let hw = h * w;
                let total = g.shape()[1];
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    let c = val(inp).shape()[1];
                    let mut d = Vec::with_capacity(n * c * hw);
                    for i in 0..n {
                        let start = (i * total + offset) * hw;
                        d.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    offset += c;
                    v.push(Some(Tensor::new(val(inp).shape().to_vec(), d)?));
                }
                v
            }
            Op::BatchNorm {
                gamma,
                xhat,
                inv_std,
                batch_stats,
                ..
            } => {
                let (n, c, h, w) = g.dims4("batch_norm")?;
                let hw = h * w;
                let gd = g.data();
                let gm = val(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let m = T::from_f64((n * hw) as f64);
                let mut dx = vec![T::zero(); gd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let scale = gm[ch] * inv_std[ch];
                        for k in base..base + hw {
                            dx[k] = if *batch_stats {
                                scale * (gd[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx)?),
                    Some(Tensor::new(vec![c], dgamma)?),
                    Some(Tensor::new(vec![c], dbeta)?),
                ]
            }
            Op::Softmax(_) => {
                let (n, c, h, w) = g.dims4("softmax")?;
                let d = kernels::softmax_channels_backward(node.value.data(), g.data(), n, c, h * w);
                vec![Some(Tensor::new(g.shape().to_vec(), d)?)]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (o, &v) in da.data_mut().iter_mut().zip(val(b).data()) {
                    *o = *o * v;
                }
                let mut db = g.clone();
                for (o, &v) in db.data_mut().iter_mut().zip(val(a).data()) {
                    *o = *o * v;
                }
                vec![Some(da), Some(db)]
            }
            Op::Scale(_, s) => vec![Some(g.map(|v| v * *s))],
            Op::Crop { x, top, left } => {
                let (n, c, ih, iw) = val(x).dims4("crop")?;
                let (_, _, h, w) = g.dims4("crop")?;
                let mut d = Tensor::zeros(val(x).shape());
                for plane in 0..n * c {
                    for y in 0..h {
                        let dst = plane * ih * iw + (top + y) * iw + left;
                        let src = (plane * h + y) * w;
                        d.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![Some(d)]
            }
            Op::Sum(x) => vec![Some(Tensor::full(val(x).shape(), g.data()[0]))],
            Op::Mean(x) => {
                let n = T::from_f64(val(x).len() as f64);
                vec![Some(Tensor::full(val(x).shape(), g.data()[0] / n))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                op.backward(g, &ins)
            }
        })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    params: BTreeMap<ParamId, Tensor<T>>,
    inputs: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[3], &[1.0, -2.0, 0.5]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let loss = g.sum(v).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_has_doubled_gradient_and_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[2.0, 4.0]);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[1, 1, 2, 2]") && err.contains("[1, 2, 2, 2]"));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let s = g.add(x, d).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let p = g.softmax(x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_norm_eval_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.37).sin()));
        let gamma = g.input(Tensor::full(&[3], 1.5));
        let beta = g.input(Tensor::full(&[3], -0.2));
        let mut rm = Tensor::full(&[3], 0.1);
        let mut rv = Tensor::full(&[3], 2.0);
        let a = g.batch_norm(x, gamma, beta, &mut rm, &mut rv, BnMode::Eval).unwrap();
        let b = g.batch_norm(x, gamma, beta, &mut rm, &mut rv, BnMode::Eval).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(rm.data(), &[0.1; 3]);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
        let gamma = g.input(t(&[1], &[1.0]));
        let beta = g.input(t(&[1], &[0.0]));
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let y = g
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, BnMode::Train { update_running: true })
            .unwrap();
        assert!((rm.data()[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((rv.data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
