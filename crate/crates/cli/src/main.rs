//! `subseg`: generate synthetic datasets, train and evaluate hierarchical
//! subclass segmentation models, and run ablation grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use subseg_core::data::{
    generate_dataset, load_dataset, save_dataset, DatasetSpec, GeneratorSpec, LabelMap, Manifest, Role,
};
use subseg_core::segnet::PriorKind;
use subseg_core::trainer::{
    ablation_csv, checkpoint_config, checkpoint_load, evaluate_samples, parse_patch, predict_labels, run_ablation,
    pseudo_label_precision, run_experiment, summarize, TrainConfig, DEFAULT_GRID,
};
use subseg_core::{data::HierarchySpec, tsr1};

#[derive(Parser)]
#[command(name = "subseg", version, about = "Subclass segmentation with abundant superclass labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split (CSV on stdout).
    Eval(EvalArgs),
    /// Write predicted label maps (TSR1) and PGM visualizations.
    Predict(PredictArgs),
    /// Train a grid of variants over several seeds and tabulate test dice.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Training samples (fine + coarse).
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Training samples that keep their subclass labels.
    #[arg(long, default_value_t = 5)]
    n_sub: usize,
    #[arg(long, default_value_t = 20)]
    n_val: usize,
    #[arg(long, default_value_t = 40)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing dataset directory.
    #[arg(long)]
    force: bool,
    /// Image side length; object radii scale with it.
    #[arg(long, default_value_t = GeneratorSpec::default().height)]
    size: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().channels)]
    channels: usize,
    /// Foreground subclasses (2 or 3).
    #[arg(long, default_value_t = GeneratorSpec::default().k_fg)]
    k_fg: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = GeneratorSpec::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().max_objects)]
    max_objects: usize,
    /// Object-like distractors in the background.
    #[arg(long, default_value_t = GeneratorSpec::default().max_decoys)]
    max_decoys: usize,
    /// Background texture amplitude.
    #[arg(long, default_value_t = GeneratorSpec::default().clutter)]
    clutter: f64,
    /// Per-image jitter of the class intensities.
    #[arg(long, default_value_t = GeneratorSpec::default().class_jitter)]
    class_jitter: f64,
    /// Per-image gamma spread.
    #[arg(long, default_value_t = GeneratorSpec::default().gamma_spread)]
    gamma_spread: f64,
    /// Smallest minor/major axis ratio of an object.
    #[arg(long, default_value_t = GeneratorSpec::default().aspect_min)]
    aspect_min: f64,
}

/// Training options. Unset options come from `--config`, else the dataset
/// and built-in defaults.
#[derive(Args, Clone)]
struct TrainOpts {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// `run.cfg`-style file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named variant: unet, mod, full, or hm/pc/sn/nl joined by `+`.
    #[arg(long)]
    variant: Option<String>,
    /// Prior concatenation [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pc: Option<bool>,
    /// Separate normalization [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    sn: Option<bool>,
    /// HierarchicalMix pseudo-supervision [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    hm: Option<bool>,
    /// Negative-learning loss [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    nl: Option<bool>,
    /// Subclass-only U-Net baseline: no superclass loss, no coarse samples.
    #[arg(long)]
    subclass_only: bool,
    /// Also supervise the superclass head on mixed images [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    hm_superclass_loss: Option<bool>,
    /// What prior concatenation appends [default: logits].
    #[arg(long, value_enum)]
    prior: Option<Prior>,
    /// Training iterations [default: 4000].
    #[arg(long)]
    iters: Option<usize>,
    /// Even batch size [default: 8].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Patch size, `HxW` or one number [default: 32x32].
    #[arg(long)]
    patch: Option<String>,
    /// Initial learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    base_channels: Option<usize>,
    /// U-Net depth [default: 3].
    #[arg(long)]
    depth: Option<usize>,
    /// Use only this many of the dataset's fine samples [default: all].
    #[arg(long)]
    n_sub: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Validation interval in iterations, 0 for end only [default: 500].
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Logits,
    Probs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Fine,
    Coarse,
    Val,
    Test,
}

impl SplitName {
    fn role(self) -> Role {
        match self {
            SplitName::Fine => Role::Fine,
            SplitName::Coarse => Role::Coarse,
            SplitName::Val => Role::Val,
            SplitName::Test => Role::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (e.g. `run/best.ckpt`).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the human-readable table to stderr.
    #[arg(long)]
    table: bool,
    /// Also report, on stderr, how often pseudo labels at this threshold
    /// match the withheld subclass labels of the coarse samples.
    #[arg(long)]
    pseudo_tau: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Output directory for `<id>.pred.tsr1` and `<id>.pred.pgm`.
    #[arg(long)]
    out: PathBuf,
    /// Predict at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Directory for per-run subdirectories and `ablation.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, default_value_t = DEFAULT_GRID.join(","))]
    grid: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Run grid cells concurrently (results are identical).
    #[arg(long)]
    parallel: bool,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SUBSEG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SUBSEG_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.out.exists() {
        let nonempty = fs::read_dir(&a.out)?.next().is_some();
        if nonempty && !a.force {
            bail!("{} already exists; pass --force to replace it", a.out.display());
        }
        if nonempty {
            if !a.out.join("manifest").is_file() {
                bail!("refusing to replace {}: it does not look like a dataset (no manifest)", a.out.display());
            }
            fs::remove_dir_all(&a.out).with_context(|| format!("removing {}", a.out.display()))?;
        }
    }
    // Object sizes follow the image: the defaults are tuned for 64 pixels.
    let base = GeneratorSpec::default();
    let scale = a.size as f64 / base.height as f64;
    let spec = DatasetSpec {
        n: a.n,
        n_sub: a.n_sub,
        n_val: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
        generator: GeneratorSpec {
            height: a.size,
            width: a.size,
            channels: a.channels,
            k_fg: a.k_fg,
            noise_sigma: a.noise,
            max_objects: a.max_objects,
            max_decoys: a.max_decoys,
            clutter: a.clutter,
            class_jitter: a.class_jitter,
            gamma_spread: a.gamma_spread,
            aspect_min: a.aspect_min,
            radius_min: base.radius_min * scale,
            radius_max: base.radius_max * scale,
        },
    };
    println!("# resolved configuration\n{spec:#?}");
    let split = generate_dataset(&spec)?;
    let m = save_dataset(&a.out, &split, &spec.generator)?;
    println!(
        "wrote {}: N = {} (fine {}, coarse {}), val {}, test {}",
        a.out.display(),
        m.count(Role::Fine) + m.count(Role::Coarse),
        m.count(Role::Fine),
        m.count(Role::Coarse),
        m.count(Role::Val),
        m.count(Role::Test)
    );
    Ok(())
}

fn resolve(opts: &TrainOpts, out: &Path) -> Result<TrainConfig> {
    let manifest = Manifest::read(&opts.data)?;
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::read(p)?,
        None => {
            let mut c = TrainConfig::new(manifest.generator.hierarchy()?);
            c.model.in_channels = manifest.generator.channels;
            c
        }
    };
    if cfg.model.hierarchy != manifest.generator.hierarchy()? {
        bail!(
            "class-count mismatch: configuration has K = {}, dataset has K = {}",
            cfg.model.hierarchy.num_sub(),
            manifest.generator.k_fg + 1
        );
    }
    if let Some(v) = &opts.variant {
        cfg.apply_variant(v)?;
    }
    if opts.subclass_only {
        cfg.apply_variant("unet")?;
    }
    let set = |slot: &mut bool, v: Option<bool>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.model.enable_pc, opts.pc);
    set(&mut cfg.model.enable_sn, opts.sn);
    set(&mut cfg.enable_hm, opts.hm);
    set(&mut cfg.enable_nl, opts.nl);
    set(&mut cfg.hm_superclass_loss, opts.hm_superclass_loss);
    if let Some(p) = opts.prior {
        cfg.model.prior = match p {
            Prior::Logits => PriorKind::Logits,
            Prior::Probs => PriorKind::Probs,
        };
    }
    if let Some(v) = opts.iters {
        cfg.sgd.total_iters = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &opts.patch {
        cfg.patch = parse_patch(v).map_err(|e| anyhow::anyhow!("--patch: {e}"))?;
    }
    if let Some(v) = opts.lr {
        cfg.sgd.base_lr = v;
    }
    if let Some(v) = opts.momentum {
        cfg.sgd.momentum = v;
    }
    if let Some(v) = opts.base_channels {
        cfg.model.base_channels = v;
    }
    if let Some(v) = opts.depth {
        cfg.model.depth = v;
    }
    if opts.n_sub.is_some() {
        cfg.n_sub = opts.n_sub;
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.eval_every {
        cfg.eval_every = v;
    }
    cfg.data = opts.data.clone();
    cfg.out_dir = out.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve(&a.opts, &a.out)?;
    println!("# resolved configuration ({})\n{}", cfg.variant_name(), cfg.render());
    let total = cfg.sgd.total_iters;
    let out = run_experiment(&cfg, &mut |rec, val| {
        if let Some(r) = val {
            eprintln!(
                "iter {:>6}/{total}  loss {:.4} (c {:.4} f {:.4} p {:.4})  tau {:.3}  lr {:.5}  val dice {:.4}",
                rec.iter + 1,
                rec.total,
                rec.l_c,
                rec.l_f,
                rec.l_p,
                rec.tau,
                rec.lr,
                r.mean_dice
            );
        }
    })?;
    if let Some((it, d)) = out.best {
        println!("best validation mean dice {d:.4} at iteration {it}");
    }
    println!("test report (pixel units):\n{}", out.test.to_table());
    println!("wrote {}", out.dir.display());
    Ok(())
}

/// Samples of one role, with their manifest ids.
fn samples_of(data: &Path, split: SplitName) -> Result<(Vec<String>, Vec<subseg_core::data::Sample>, Manifest)> {
    let (ds, manifest) = load_dataset(data, false)?;
    let role = split.role();
    let ids: Vec<String> = manifest.entries.iter().filter(|e| e.role == role).map(|e| e.id.clone()).collect();
    let samples = match split {
        SplitName::Fine => ds.fine,
        SplitName::Coarse => ds.coarse,
        SplitName::Val => ds.val,
        SplitName::Test => ds.test,
    };
    Ok((ids, samples, manifest))
}

fn check_classes(ckpt: &Path, manifest: &Manifest) -> Result<HierarchySpec> {
    let (model, _) = checkpoint_config(ckpt)?;
    let data = manifest.generator.hierarchy()?;
    if model.hierarchy != data {
        bail!(
            "class-count mismatch: checkpoint has K = {}, dataset has K = {}",
            model.hierarchy.num_sub(),
            data.num_sub()
        );
    }
    Ok(data)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (_, samples, manifest) = samples_of(&a.data, a.split)?;
    check_classes(&a.ckpt, &manifest)?;
    if matches!(a.split, SplitName::Coarse) {
        bail!("coarse samples have no subclass labels to evaluate against");
    }
    let ck = checkpoint_load(&a.ckpt, None)?;
    let report = evaluate_samples(&ck.net, &ck.store, &samples)?;
    let csv = report.to_csv();
    print!("{csv}");
    if a.table {
        eprint!("{}", report.to_table());
    }
    if let Some(p) = &a.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(tau) = a.pseudo_tau {
        let (ds, _) = load_dataset(&a.data, true)?;
        let r = pseudo_label_precision(&ck.net, &ck.store, &ds, tau, 0)?;
        let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
        eprintln!(
            "pseudo labels at tau {tau}: {} of {} pixels valid, precision {} (random within superclass {}); \
             foreground: {} valid, precision {} (random {})",
            r.all.valid,
            r.pixels,
            fmt(r.all.precision()),
            fmt(r.all.random_precision()),
            r.foreground.valid,
            fmt(r.foreground.precision()),
            fmt(r.foreground.random_precision())
        );
    }
    Ok(())
}

/// Binary PGM with class `c` drawn as `c * 255 / (K - 1)`.
fn pgm(m: &LabelMap, classes: usize) -> Vec<u8> {
    let (h, w) = m.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let top = (classes - 1).max(1);
    out.extend(m.data().iter().map(|&c| (c as usize * 255 / top) as u8));
    out
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (ids, samples, manifest) = samples_of(&a.data, a.split)?;
    let hier = check_classes(&a.ckpt, &manifest)?;
    let ck = checkpoint_load(&a.ckpt, None)?;
    let n = a.limit.unwrap_or(samples.len()).min(samples.len());
    let images: Vec<_> = samples[..n].iter().map(|s| &s.image).collect();
    let preds = predict_labels(&ck.net, &ck.store, &images)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (id, p) in ids.iter().zip(&preds) {
        tsr1::write(&a.out.join(format!("{id}.pred.tsr1")), &p.to_tensor())?;
        let path = a.out.join(format!("{id}.pred.pgm"));
        fs::write(&path, pgm(p, hier.num_sub())).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = resolve(&a.opts, &a.out)?;
    let variants: Vec<String> = a.grid.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    for v in &variants {
        base.clone().apply_variant(v)?;
    }
    println!(
        "# resolved base configuration\n{}# grid = {}\n# seeds = {}",
        base.render(),
        variants.join(","),
        a.seeds
    );
    let rows = run_ablation(&base, &variants, &seeds, a.parallel)?;
    let sums = summarize(&rows);
    let csv = ablation_csv(&rows, &sums);
    let path = a.out.join("ablation.csv");
    fs::create_dir_all(&a.out)?;
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
