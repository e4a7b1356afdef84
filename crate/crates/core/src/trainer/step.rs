use crate::data::{random_crop, DatasetSplit, LabelMap, Sample};
use crate::error::{invalid, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::hiermix::{
    make_pseudo_label, mix_images, mixed_target, sample_transform, tau_schedule, SpatialTransform, ALPHA_MAX, ALPHA_MIN,
};
use crate::optim::{lr_schedule, sgd_step};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::segnet::{ce_dice_loss, negative_learning_loss, one_hot_batch, supervised_losses, SegNet};
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// Cropped training items: the first `n_fine` carry subclass maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Sample>,
    pub n_fine: usize,
}

impl Batch {
    pub fn fine(&self) -> &[Sample] {
        &self.items[..self.n_fine]
    }

    pub fn coarse(&self) -> &[Sample] {
        &self.items[self.n_fine..]
    }
}

/// Half fine, half coarse, each drawn uniformly with replacement and cropped
/// to the patch size. Without a usable coarse set the batch is all fine.
pub fn build_batch(split: &DatasetSplit, cfg: &TrainConfig, rng: &mut Rng) -> Result<Batch> {
    if split.fine.is_empty() {
        return Err(invalid("build_batch", "no fine samples to train on"));
    }
    let use_coarse = cfg.superclass_loss && !split.coarse.is_empty();
    let n_fine = if use_coarse { cfg.batch_size / 2 } else { cfg.batch_size };
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..n_fine {
        let s = &split.fine[rng.below(split.fine.len())];
        items.push(random_crop(s, cfg.patch, rng)?);
    }
    for _ in n_fine..cfg.batch_size {
        let s = &split.coarse[rng.below(split.coarse.len())];
        items.push(random_crop(s, cfg.patch, rng)?);
    }
    Ok(Batch { items, n_fine })
}

/// Losses and schedule values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub iter: usize,
    pub l_c: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub l_nl: f64,
    pub total: f64,
    pub tau: f64,
    pub lr: f64,
    /// Coarse items that went through the mixing pipeline.
    pub mixed: usize,
    pub pseudo_valid: usize,
    pub pseudo_pixels: usize,
}

#[derive(Default)]
struct MixOutcome {
    loss: Option<Var>,
    mixed: usize,
    valid: usize,
    pixels: usize,
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(items)
}

/// Pseudo labels for the coarse half (gradient-free, running statistics),
/// mixing with random fine items, and the loss on the mixed images.
fn hierarchical_mix(
    g: &mut Graph<f32>,
    net: &SegNet,
    store: &mut ParamStore<f32>,
    batch: &Batch,
    tau: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<MixOutcome> {
    let hier = &cfg.model.hierarchy;
    let fine_fg: Vec<&Sample> = batch.fine().iter().filter(|s| s.has_foreground()).collect();
    let coarse: Vec<&Sample> = batch.coarse().iter().filter(|s| s.has_foreground()).collect();
    if fine_fg.is_empty() || coarse.is_empty() {
        return Ok(MixOutcome::default());
    }

    let transforms: Vec<SpatialTransform> = coarse.iter().map(|_| sample_transform(rng)).collect();
    let images: Vec<&Tensor<f32>> = coarse.iter().map(|s| &s.image).collect();
    let probs_a = net.predict_probs(store, &stack(&images)?)?;
    let moved = coarse
        .iter()
        .zip(&transforms)
        .map(|(s, t)| t.apply(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let probs_b: Vec<Tensor<f32>> = if moved.windows(2).all(|p| p[0].shape() == p[1].shape()) {
        let refs: Vec<&Tensor<f32>> = moved.iter().collect();
        let p = net.predict_probs(store, &stack(&refs)?)?;
        (0..moved.len()).map(|i| p.batch_item(i)).collect()
    } else {
        moved
            .iter()
            .map(|m| net.predict_probs(store, &stack(&[m])?))
            .collect::<Result<_>>()?
    };

    let k = hier.num_sub();
    let mut out = MixOutcome::default();
    let (mut x_mix, mut targets, mut super_maps) = (Vec::new(), Vec::new(), Vec::new());
    for (j, s) in coarse.iter().enumerate() {
        let (h, w) = s.dims();
        let a = probs_a.batch_item(j).reshape(&[k, h, w])?;
        let b = transforms[j].invert(&probs_b[j])?.reshape(&[k, h, w])?;
        let pseudo = make_pseudo_label(&a, &b, &s.y, tau, hier)?;
        let f = fine_fg[rng.below(fine_fg.len())];
        let alpha = rng.uniform_range(ALPHA_MIN, ALPHA_MAX);
        let z_fine = f.z.as_ref().expect("fine items carry subclass maps");
        let mix = mix_images(&s.image, &s.y, &f.image, &f.y, z_fine, alpha)?;
        let (t, _) = mixed_target(&mix.z_full, &pseudo, alpha, k)?;
        out.valid += pseudo.valid_count();
        out.pixels += h * w;
        super_maps.push(hier.collapse(&mix.z_full));
        x_mix.push(mix.x_mix);
        targets.push(t);
    }
    out.mixed = x_mix.len();

    let refs: Vec<&Tensor<f32>> = x_mix.iter().collect();
    let xm = g.input(stack(&refs)?);
    let heads = net.forward(g, store, xm, BnMode::Train { update_running: false })?;
    let refs: Vec<&Tensor<f32>> = targets.iter().collect();
    let mut loss = ce_dice_loss(g, heads.sub_logits, &stack(&refs)?, None)?;
    if cfg.hm_superclass_loss {
        // Superclass target of a mixed image: the collapsed mixed subclass target.
        let maps: Vec<&LabelMap> = super_maps.iter().collect();
        let t = one_hot_batch(&maps, hier.num_super())?;
        let l = ce_dice_loss(g, heads.super_logits, &t, None)?;
        loss = g.add(loss, l)?;
    }
    out.loss = Some(loss);
    Ok(out)
}

/// One optimization step on `batch`: supervised losses on every item,
/// optional negative-learning and mixing losses, unit-weight sum, backward,
/// SGD at `lr(iter)`.
pub fn train_step(
    net: &SegNet,
    store: &mut ParamStore<f32>,
    batch: &Batch,
    iter: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepRecord> {
    let hier = &cfg.model.hierarchy;
    let lr = lr_schedule(iter, &cfg.sgd)?;
    let tau = tau_schedule(iter, cfg.sgd.total_iters)?;

    let mut g = Graph::new();
    let images: Vec<&Tensor<f32>> = batch.items.iter().map(|s| &s.image).collect();
    let x = g.input(stack(&images)?);
    let heads = net.forward(&mut g, store, x, BnMode::Train { update_running: true })?;
    let ys: Vec<&LabelMap> = batch.items.iter().map(|s| &s.y).collect();

    let mut terms = Vec::new();
    let (l_c, l_f) = if cfg.superclass_loss {
        let zs: Vec<Option<&LabelMap>> = batch.items.iter().map(|s| s.z.as_ref()).collect();
        let (l_c, l_f) = supervised_losses(&mut g, &heads, &ys, &zs, hier)?;
        terms.push(l_c);
        (Some(l_c), l_f)
    } else {
        let zs = batch
            .items
            .iter()
            .map(|s| s.z.as_ref().ok_or_else(|| invalid("train_step", "subclass-only training needs subclass maps")))
            .collect::<Result<Vec<_>>>()?;
        let t = one_hot_batch(&zs, hier.num_sub())?;
        (None, ce_dice_loss(&mut g, heads.sub_logits, &t, None)?)
    };
    terms.push(l_f);
    let l_nl = if cfg.enable_nl {
        let l = negative_learning_loss(&mut g, heads.sub_logits, &ys, hier)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let mix = if cfg.enable_hm && !batch.coarse().is_empty() {
        hierarchical_mix(&mut g, net, store, batch, tau, cfg, rng)?
    } else {
        MixOutcome::default()
    };
    terms.extend(mix.loss);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let scalar = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
    let record = StepRecord {
        iter,
        l_c: scalar(&g, l_c),
        l_f: scalar(&g, Some(l_f)),
        l_p: scalar(&g, mix.loss),
        l_nl: scalar(&g, l_nl),
        total: scalar(&g, Some(total)),
        tau,
        lr,
        mixed: mix.mixed,
        pseudo_valid: mix.valid,
        pseudo_pixels: mix.pixels,
    };
    g.backward_into(total, store)?;
    sgd_step(store, lr, cfg.sgd.momentum);
    Ok(record)
}
