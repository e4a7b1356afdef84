//! U-Net backbone with superclass and subclass heads.
//!
//! Heads by configuration:
//!
//! * Mod: `P_c = conv1x1_R(F)`, `P_f = conv1x1_K(F)`.
//! * PC: the subclass head sees `concat(F, prior(P_c))` with the prior
//!   detached from the graph.
//! * SN: a background branch and a foreground branch, each
//!   `batch_norm -> conv3x3 -> relu -> conv3x3`, with the background branch
//!   emitting one logit `b` shared by both outputs:
//!   `P_c = concat(b, s)`, `P_f = concat(b, u)`.

use crate::error::{invalid, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

use super::config::{ModelConfig, PriorKind};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

/// conv3x3 -> BN -> relu, twice.
#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
}

/// BN -> conv3x3 -> relu -> conv3x3, the per-branch block of separate
/// normalization.
#[derive(Debug, Clone, Copy)]
struct Branch {
    bn: BatchNorm,
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
enum Heads {
    Shared {
        super_cls: Conv,
        sub_cls: Conv,
    },
    Separate {
        bg: Branch,
        fg: Branch,
        bg_cls: Conv,
        fg_super_cls: Conv,
        fg_sub_cls: Conv,
    },
}

/// Network outputs for an `N x C x H x W` input.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `N x R x H x W`.
    pub super_logits: Var,
    /// `N x K x H x W`.
    pub sub_logits: Var,
    /// `N x base_channels x H x W`.
    pub features: Var,
    /// The detached prior fed to the subclass head, when PC is on.
    pub prior: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: ModelConfig,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<DoubleConv>,
    heads: Heads,
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| (std * rng.normal()) as f32);
        let w = self.store.add(format!("{name}.weight"), w);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv { w, b }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: self.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: self.store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }

    fn double_conv(&mut self, name: &str, c_in: usize, c_out: usize) -> DoubleConv {
        DoubleConv {
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, false),
            bn1: self.bn(&format!("{name}.bn1"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, false),
            bn2: self.bn(&format!("{name}.bn2"), c_out),
        }
    }

    fn branch(&mut self, name: &str, c: usize) -> Branch {
        Branch {
            bn: self.bn(&format!("{name}.bn"), c),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, true),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, true),
        }
    }
}

impl SegNet {
    /// Register freshly initialized parameters in `store` (He-normal convs,
    /// unit/zero batch-norm affines).
    pub fn new(cfg: ModelConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { store, rng };
        let ch = |l: usize| cfg.base_channels << l;
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut c_in = cfg.in_channels;
        for l in 0..cfg.depth {
            encoder.push(b.double_conv(&format!("enc{l}"), c_in, ch(l)));
            c_in = ch(l);
        }
        let bottleneck = b.double_conv("bottleneck", c_in, ch(cfg.depth));
        let mut decoder = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            decoder.push(b.double_conv(&format!("dec{l}"), ch(l + 1) + ch(l), ch(l)));
        }
        let cf = cfg.base_channels;
        let r = cfg.hierarchy.num_super();
        let k = cfg.hierarchy.num_sub();
        let prior = if cfg.enable_pc { r } else { 0 };
        let heads = if cfg.enable_sn {
            Heads::Separate {
                bg: b.branch("sn.bg", cf),
                fg: b.branch("sn.fg", cf),
                bg_cls: b.conv("sn.bg_cls", cf, 1, 1, true),
                fg_super_cls: b.conv("sn.fg_super_cls", cf, r - 1, 1, true),
                fg_sub_cls: b.conv("sn.fg_sub_cls", cf + prior, k - 1, 1, true),
            }
        } else {
            Heads::Shared {
                super_cls: b.conv("head.super", cf, r, 1, true),
                sub_cls: b.conv("head.sub", cf + prior, k, 1, true),
            }
        };
        Ok(Self {
            cfg,
            encoder,
            bottleneck,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameter id of the first encoder convolution kernel.
    pub fn first_conv_weight(&self) -> ParamId {
        self.encoder[0].conv1.w
    }

    /// Parameters of the superclass classifier (shared head) or of the
    /// foreground superclassifier and background classifier (SN).
    pub fn superclass_head_params(&self) -> Vec<ParamId> {
        let convs: Vec<Conv> = match &self.heads {
            Heads::Shared { super_cls, .. } => vec![*super_cls],
            Heads::Separate { bg_cls, fg_super_cls, .. } => vec![*bg_cls, *fg_super_cls],
        };
        convs.iter().flat_map(|c| std::iter::once(c.w).chain(c.b)).collect()
    }

    /// `(gamma, beta)` of the background and foreground branch batch norms.
    pub fn branch_norm_params(&self) -> Option<[(ParamId, ParamId); 2]> {
        match &self.heads {
            Heads::Separate { bg, fg, .. } => Some([(bg.bn.gamma, bg.bn.beta), (fg.bn.gamma, fg.bn.beta)]),
            Heads::Shared { .. } => None,
        }
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("unet_forward")?;
        let m = self.cfg.size_multiple();
        if c != self.cfg.in_channels {
            return Err(invalid(
                "unet_forward",
                format!("input has {c} channels, model expects {}", self.cfg.in_channels),
            ));
        }
        if h % m != 0 || w % m != 0 {
            return Err(invalid(
                "unet_forward",
                format!("spatial size {h}x{w} not divisible by {m} (depth {})", self.cfg.depth),
            ));
        }
        Ok(())
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Conv, x: Var) -> Result<Var> {
        let w = g.param(store, c.w);
        let b = c.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b)
    }

    fn bn<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, bn: BatchNorm, x: Var, mode: BnMode) -> Result<Var> {
        let gamma = g.param(store, bn.gamma);
        let beta = g.param(store, bn.beta);
        let (rm, rv) = store.buffer_pair_mut(bn.mean, bn.var);
        g.batch_norm(x, gamma, beta, rm, rv, mode)
    }

    fn double_conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        blk: DoubleConv,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let h = self.conv(g, store, blk.conv1, x)?;
        let h = self.bn(g, store, blk.bn1, h, mode)?;
        let h = g.relu(h)?;
        let h = self.conv(g, store, blk.conv2, h)?;
        let h = self.bn(g, store, blk.bn2, h, mode)?;
        g.relu(h)
    }

    fn branch<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, br: Branch, f: Var, mode: BnMode) -> Result<Var> {
        let h = self.bn(g, store, br.bn, f, mode)?;
        let h = self.conv(g, store, br.conv1, h)?;
        let h = g.relu(h)?;
        self.conv(g, store, br.conv2, h)
    }

    /// Backbone features `F(x)`: `N x base_channels x H x W`.
    pub fn unet_forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: BnMode) -> Result<Var> {
        self.check_input(g.value(x))?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for blk in &self.encoder {
            h = self.double_conv(g, store, *blk, h, mode)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = self.double_conv(g, store, self.bottleneck, h, mode)?;
        for blk in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = g.upsample2(h)?;
            let cat = g.concat(&[up, skip])?;
            h = self.double_conv(g, store, *blk, cat, mode)?;
        }
        Ok(h)
    }

    fn prior<T: Real>(&self, g: &mut Graph<T>, super_logits: Var, fixed: Option<&Tensor<T>>) -> Result<Var> {
        if let Some(t) = fixed {
            if g.value(super_logits).shape() != t.shape() {
                return Err(invalid("forward_with_prior", "prior shape differs from the superclass logits"));
            }
            return Ok(g.input(t.clone()));
        }
        let p = match self.cfg.prior {
            PriorKind::Logits => super_logits,
            PriorKind::Probs => g.softmax(super_logits)?,
        };
        Ok(g.detach(p))
    }

    /// Superclass and subclass logits from backbone features.
    pub fn heads_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        features: Var,
        mode: BnMode,
    ) -> Result<HeadOutputs> {
        self.heads_with(g, store, features, mode, None)
    }

    fn heads_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        features: Var,
        mode: BnMode,
        fixed: Option<&Tensor<T>>,
    ) -> Result<HeadOutputs> {
        match self.heads.clone() {
            Heads::Shared { super_cls, sub_cls } => {
                let super_logits = self.conv(g, store, super_cls, features)?;
                let prior = match self.cfg.enable_pc {
                    true => Some(self.prior(g, super_logits, fixed)?),
                    false => None,
                };
                let sub_in = match prior {
                    Some(p) => g.concat(&[features, p])?,
                    None => features,
                };
                let sub_logits = self.conv(g, store, sub_cls, sub_in)?;
                Ok(HeadOutputs {
                    super_logits,
                    sub_logits,
                    features,
                    prior,
                })
            }
            Heads::Separate { .. } => self.separate_with(g, store, features, mode, fixed),
        }
    }

    /// Separate normalization heads; fails unless the model was built with
    /// `enable_sn`.
    pub fn separate_norm_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        features: Var,
        mode: BnMode,
    ) -> Result<HeadOutputs> {
        self.separate_with(g, store, features, mode, None)
    }

    fn separate_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        features: Var,
        mode: BnMode,
        fixed: Option<&Tensor<T>>,
    ) -> Result<HeadOutputs> {
        let Heads::Separate {
            bg,
            fg,
            bg_cls,
            fg_super_cls,
            fg_sub_cls,
        } = self.heads.clone()
        else {
            return Err(invalid("separate_norm_forward", "model was built without separate normalization"));
        };
        let bg_feat = self.branch(g, store, bg, features, mode)?;
        let fg_feat = self.branch(g, store, fg, features, mode)?;
        let b = self.conv(g, store, bg_cls, bg_feat)?;
        let s = self.conv(g, store, fg_super_cls, fg_feat)?;
        let super_logits = g.concat(&[b, s])?;
        let prior = match self.cfg.enable_pc {
            true => Some(self.prior(g, super_logits, fixed)?),
            false => None,
        };
        let sub_in = match prior {
            Some(p) => g.concat(&[fg_feat, p])?,
            None => fg_feat,
        };
        let u = self.conv(g, store, fg_sub_cls, sub_in)?;
        let sub_logits = g.concat(&[b, u])?;
        Ok(HeadOutputs {
            super_logits,
            sub_logits,
            features,
            prior,
        })
    }

    /// Backbone plus heads.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: BnMode) -> Result<HeadOutputs> {
        let f = self.unet_forward(g, store, x, mode)?;
        self.heads_forward(g, store, f, mode)
    }

    /// Forward pass with the subclass head fed a given prior instead of the
    /// one derived from the superclass logits. This is the function whose
    /// gradient backpropagation computes, since the prior is detached.
    pub fn forward_with_prior<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: BnMode,
        prior: &Tensor<T>,
    ) -> Result<HeadOutputs> {
        if !self.cfg.enable_pc {
            return Err(invalid("forward_with_prior", "model was built without prior concatenation"));
        }
        let f = self.unet_forward(g, store, x, mode)?;
        self.heads_with(g, store, f, mode, Some(prior))
    }

    /// Inference: subclass probabilities `N x K x H x W` with running
    /// batch-norm statistics and no gradient recording.
    pub fn predict_probs(&self, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut store = store.clone();
        let mut g = Graph::no_grad();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &mut store, x, BnMode::Eval)?;
        let p = g.softmax(out.sub_logits)?;
        Ok(g.value(p).clone())
    }
}
