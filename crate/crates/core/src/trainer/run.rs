use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_dataset, DatasetSplit, LabelMap, Sample};
use crate::error::{invalid, io_err, Error, Result};
use crate::metrics::{evaluate, ClassReport};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::segnet::SegNet;
use crate::tensor::Tensor;

use super::checkpoint::{checkpoint_load, checkpoint_save};
use super::config::TrainConfig;
use super::step::{build_batch, train_step, StepRecord};

/// Stream of [`Rng::derive`] used for parameter initialization; iteration
/// `i` uses stream `i`.
pub const INIT_STREAM: u64 = u64::MAX;

const EVAL_CHUNK: usize = 16;

/// Model, parameters and iteration counter of a run in progress.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: SegNet,
    pub store: ParamStore<f32>,
    /// Completed iterations.
    pub iter: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = SegNet::new(cfg.model.clone(), &mut store, &mut Rng::derive(cfg.seed, INIT_STREAM))?;
        Ok(Self {
            cfg,
            net,
            store,
            iter: 0,
        })
    }

    /// Resume from a checkpoint written for the same model configuration.
    pub fn from_checkpoint(cfg: TrainConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let ck = checkpoint_load(dir, Some(&cfg.model))?;
        Ok(Self {
            cfg,
            net: ck.net,
            store: ck.store,
            iter: ck.iter,
        })
    }

    /// One iteration; batch composition, transforms and mixing factors all
    /// come from the iteration's own random stream.
    pub fn step(&mut self, split: &DatasetSplit) -> Result<StepRecord> {
        let mut rng = Rng::derive(self.cfg.seed, self.iter as u64);
        let batch = build_batch(split, &self.cfg, &mut rng)?;
        let rec = train_step(&self.net, &mut self.store, &batch, self.iter, &self.cfg, &mut rng)?;
        self.iter += 1;
        Ok(rec)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint_save(dir, &self.net, &self.store, self.iter)
    }
}

/// Per-pixel argmax of the subclass prediction for each image.
pub fn predict_labels(net: &SegNet, store: &ParamStore<f32>, images: &[&Tensor<f32>]) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let probs = net.predict_probs(store, &Tensor::stack(chunk)?)?;
        let (n, k, h, w) = probs.dims4("predict_labels")?;
        let hw = h * w;
        for i in 0..n {
            let p = &probs.data()[i * k * hw..(i + 1) * k * hw];
            let mut m = LabelMap::zeros(h, w);
            for (px, v) in m.data_mut().iter_mut().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if p[c * hw + px] > p[best * hw + px] {
                        best = c;
                    }
                }
                *v = best as u8;
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Class report averaged over samples that carry subclass maps.
pub fn evaluate_samples(net: &SegNet, store: &ParamStore<f32>, samples: &[Sample]) -> Result<ClassReport> {
    if samples.is_empty() {
        return Err(invalid("evaluate_samples", "no samples to evaluate"));
    }
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_labels(net, store, &images)?;
    let hier = &net.config().hierarchy;
    let reports = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let z = s
                .z
                .as_ref()
                .ok_or_else(|| invalid("evaluate_samples", format!("sample {} has no subclass map", s.seed)))?;
            evaluate(p, z, hier)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassReport::aggregate(&reports))
}

/// Check that a dataset fits the model and apply `n_sub` and the
/// subclass-only restriction.
pub fn prepare_split(split: DatasetSplit, cfg: &TrainConfig) -> Result<DatasetSplit> {
    let k = cfg.model.hierarchy.num_sub();
    let all = split.fine.iter().chain(&split.coarse).chain(&split.val).chain(&split.test);
    for s in all {
        let (h, w) = s.dims();
        let top = s.z.as_ref().map_or(0, |z| z.max_class() as usize);
        if top >= k {
            return Err(Error::Config(format!(
                "dataset has subclass {top} but the model has {k} classes"
            )));
        }
        if s.image.shape()[0] != cfg.model.in_channels {
            return Err(Error::Config(format!(
                "dataset images have {} channels, model expects {}",
                s.image.shape()[0],
                cfg.model.in_channels
            )));
        }
        if cfg.patch.0 > h || cfg.patch.1 > w {
            return Err(Error::Config(format!("patch {:?} exceeds image size {h}x{w}", cfg.patch)));
        }
    }
    let split = match cfg.n_sub {
        Some(n) => split.restrict_fine(n)?,
        None => split,
    };
    Ok(if cfg.superclass_loss { split } else { split.without_coarse() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Completed iterations at evaluation time.
    pub iter: usize,
    pub report: ClassReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunLog {
    /// One row per step; `val_mean_dice` is filled on evaluated steps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,l_c,l_f,l_p,l_nl,total,tau,lr,mixed,pseudo_valid_frac,val_mean_dice\n");
        let mut evals = self.evals.iter().peekable();
        for r in &self.steps {
            let frac = if r.pseudo_pixels > 0 {
                format!("{:.6}", r.pseudo_valid as f64 / r.pseudo_pixels as f64)
            } else {
                String::new()
            };
            let val = match evals.peek() {
                Some(e) if e.iter == r.iter + 1 => format!("{:.6}", evals.next().expect("peeked").report.mean_dice),
                _ => String::new(),
            };
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8},{},{frac},{val}",
                r.iter, r.l_c, r.l_f, r.l_p, r.l_nl, r.total, r.tau, r.lr, r.mixed
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Test report of the selected checkpoint.
    pub test: ClassReport,
    /// Iteration and validation mean dice of the selected checkpoint.
    pub best: Option<(usize, f64)>,
    pub log: RunLog,
    pub dir: PathBuf,
}

/// Load the configured dataset and run [`run_on_split`].
pub fn run_experiment(cfg: &TrainConfig, progress: &mut dyn FnMut(&StepRecord, Option<&ClassReport>)) -> Result<RunOutput> {
    cfg.validate()?;
    let (split, _) = load_dataset(&cfg.data, false)?;
    let split = prepare_split(split, cfg)?;
    run_on_split(cfg, &split, progress)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Train for `cfg.sgd.total_iters` iterations, validate every
/// `cfg.eval_every` and at the end, keep the checkpoint with the best
/// validation mean dice, and report that checkpoint on the test set.
///
/// Writes `run.cfg`, `log.csv`, `best.ckpt/`, `final.ckpt/` and `report.csv`
/// under `cfg.out_dir`.
pub fn run_on_split(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    progress: &mut dyn FnMut(&StepRecord, Option<&ClassReport>),
) -> Result<RunOutput> {
    if split.test.is_empty() {
        return Err(invalid("run_experiment", "dataset has no test samples"));
    }
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join("run.cfg"), &cfg.render())?;
    let (best_dir, final_dir) = (dir.join("best.ckpt"), dir.join("final.ckpt"));

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = RunLog::default();
    let mut best: Option<(usize, f64)> = None;
    let total = cfg.sgd.total_iters;
    while trainer.iter < total {
        let rec = trainer.step(split)?;
        let done = trainer.iter;
        let due = done == total || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let mut snapshot = None;
        if due && !split.val.is_empty() {
            let report = evaluate_samples(&trainer.net, &trainer.store, &split.val)?;
            if best.map_or(true, |(_, d)| report.mean_dice > d) {
                best = Some((done, report.mean_dice));
                trainer.save(&best_dir)?;
            }
            log.evals.push(EvalRecord { iter: done, report });
            snapshot = log.evals.last().map(|e| &e.report);
        }
        progress(&rec, snapshot);
        log.steps.push(rec);
    }
    trainer.save(&final_dir)?;
    write(&dir.join("log.csv"), &log.to_csv())?;

    let selected = if best.is_some() { &best_dir } else { &final_dir };
    let ck = checkpoint_load(selected, Some(&cfg.model))?;
    let test = evaluate_samples(&ck.net, &ck.store, &split.test)?;
    write(&dir.join("report.csv"), &test.to_csv())?;
    Ok(RunOutput { test, best, log, dir })
}
