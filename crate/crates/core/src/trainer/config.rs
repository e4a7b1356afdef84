use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::HierarchySpec;
use crate::error::{io_err, Error, Result};
use crate::optim::SgdConfig;
use crate::segnet::{ModelConfig, PriorKind};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub enable_hm: bool,
    /// Negative-learning loss on every item (comparison baseline).
    pub enable_nl: bool,
    /// Train the superclass head on superclass labels and use the coarse
    /// set. Off gives the subclass-only U-Net baseline.
    pub superclass_loss: bool,
    /// Also supervise the superclass head on mixed images.
    pub hm_superclass_loss: bool,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub patch: (usize, usize),
    /// Keep only this many of the dataset's fine samples; `None` keeps all.
    pub n_sub: Option<usize>,
    pub seed: u64,
    /// Validate every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(hierarchy: HierarchySpec) -> Self {
        Self {
            model: ModelConfig::new(hierarchy),
            enable_hm: false,
            enable_nl: false,
            superclass_loss: true,
            hm_superclass_loss: false,
            sgd: SgdConfig::default(),
            batch_size: 8,
            patch: (32, 32),
            n_sub: None,
            seed: 0,
            eval_every: 500,
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sgd.validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        let m = self.model.size_multiple();
        let (ph, pw) = self.patch;
        if ph == 0 || pw == 0 || ph % m != 0 || pw % m != 0 {
            return Err(Error::Config(format!("patch {ph}x{pw} must be a positive multiple of {m} (2^depth)")));
        }
        if self.n_sub == Some(0) {
            return Err(Error::Config("n_sub must be positive".into()));
        }
        if self.hm_superclass_loss && !self.enable_hm {
            return Err(Error::Config("hm_superclass_loss requires hm".into()));
        }
        if !self.superclass_loss && (self.enable_hm || self.enable_nl || self.model.enable_pc || self.model.enable_sn) {
            return Err(Error::Config(
                "the subclass-only baseline (superclass_loss = false) takes no hm/nl/pc/sn".into(),
            ));
        }
        Ok(())
    }

    /// Short name of the enabled mechanisms: `unet`, `mod`, or e.g. `hm+pc+sn`.
    pub fn variant_name(&self) -> String {
        if !self.superclass_loss {
            return "unet".into();
        }
        let on: Vec<&str> = [
            (self.enable_hm, "hm"),
            (self.model.enable_pc, "pc"),
            (self.model.enable_sn, "sn"),
            (self.enable_nl, "nl"),
        ]
        .iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "mod".into()
        } else {
            on.join("+")
        }
    }

    /// Set the mechanism toggles from a variant name: `unet`, `mod`, `full`
    /// (`hm+pc+sn`) or a `+`-joined subset of `hm`, `pc`, `sn`, `nl`.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        self.superclass_loss = true;
        self.enable_hm = false;
        self.enable_nl = false;
        self.hm_superclass_loss = false;
        self.model.enable_pc = false;
        self.model.enable_sn = false;
        match name {
            "unet" => self.superclass_loss = false,
            "mod" => {}
            "full" => return self.apply_variant("hm+pc+sn"),
            _ => {
                for part in name.split('+') {
                    match part {
                        "hm" => self.enable_hm = true,
                        "pc" => self.model.enable_pc = true,
                        "sn" => self.model.enable_sn = true,
                        "nl" => self.enable_nl = true,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown mechanism `{other}` in variant `{name}` (unet, mod, full, or hm/pc/sn/nl joined by +)"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", self.data.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("k_fg", (self.model.hierarchy.num_sub() - 1).to_string());
        kv("in_channels", self.model.in_channels.to_string());
        kv("base_channels", self.model.base_channels.to_string());
        kv("depth", self.model.depth.to_string());
        kv("pc", self.model.enable_pc.to_string());
        kv("sn", self.model.enable_sn.to_string());
        kv("prior", self.model.prior.to_string());
        kv("hm", self.enable_hm.to_string());
        kv("hm_superclass_loss", self.hm_superclass_loss.to_string());
        kv("nl", self.enable_nl.to_string());
        kv("superclass_loss", self.superclass_loss.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("patch", format!("{}x{}", self.patch.0, self.patch.1));
        kv("iters", self.sgd.total_iters.to_string());
        kv("base_lr", self.sgd.base_lr.to_string());
        kv("momentum", self.sgd.momentum.to_string());
        kv("n_sub", self.n_sub.map_or("all".into(), |n| n.to_string()));
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }

    /// Parse `key = value` lines (`#` starts a comment). Missing keys keep
    /// their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let k_fg = get(&kv, "k_fg")?.unwrap_or(3usize);
        let mut cfg = TrainConfig::new(HierarchySpec::two_level(k_fg)?);
        for (key, value) in &kv {
            let bad = |e: String| Error::Config(format!("`{key}`: {e}"));
            match key.as_str() {
                "k_fg" => {}
                "data" => cfg.data = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "in_channels" => cfg.model.in_channels = parse(value).map_err(bad)?,
                "base_channels" => cfg.model.base_channels = parse(value).map_err(bad)?,
                "depth" => cfg.model.depth = parse(value).map_err(bad)?,
                "pc" => cfg.model.enable_pc = parse(value).map_err(bad)?,
                "sn" => cfg.model.enable_sn = parse(value).map_err(bad)?,
                "prior" => cfg.model.prior = value.parse::<PriorKind>().map_err(bad)?,
                "hm" => cfg.enable_hm = parse(value).map_err(bad)?,
                "hm_superclass_loss" => cfg.hm_superclass_loss = parse(value).map_err(bad)?,
                "nl" => cfg.enable_nl = parse(value).map_err(bad)?,
                "superclass_loss" => cfg.superclass_loss = parse(value).map_err(bad)?,
                "batch_size" => cfg.batch_size = parse(value).map_err(bad)?,
                "patch" => cfg.patch = parse_patch(value).map_err(bad)?,
                "iters" => cfg.sgd.total_iters = parse(value).map_err(bad)?,
                "base_lr" => cfg.sgd.base_lr = parse(value).map_err(bad)?,
                "momentum" => cfg.sgd.momentum = parse(value).map_err(bad)?,
                "n_sub" => {
                    cfg.n_sub = if value == "all" { None } else { Some(parse(value).map_err(bad)?) };
                }
                "seed" => cfg.seed = parse(value).map_err(bad)?,
                "eval_every" => cfg.eval_every = parse(value).map_err(bad)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

/// `HxW`, or a single number for a square patch.
pub fn parse_patch(v: &str) -> std::result::Result<(usize, usize), String> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse(h.trim())?, parse(w.trim())?)),
        None => {
            let s = parse(v)?;
            Ok((s, s))
        }
    }
}

fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    kv.get(key)
        .map(|v| parse(v).map_err(|e| Error::Config(format!("`{key}`: {e}"))))
        .transpose()
}

/// `key = value` lines with `#` comments; duplicate keys are an error.
pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}
