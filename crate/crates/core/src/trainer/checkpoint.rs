//! Checkpoint directory: one TSR1 file per parameter value, momentum buffer
//! and batch-norm buffer, plus `model.cfg`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::HierarchySpec;
use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::segnet::{ModelConfig, SegNet};
use crate::tsr1;

use super::config::parse_kv;

const MODEL_CFG: &str = "model.cfg";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: SegNet,
    pub store: ParamStore<f32>,
    /// Number of completed training iterations.
    pub iter: usize,
}

fn render_model_cfg(cfg: &ModelConfig, iter: usize) -> String {
    let k: Vec<String> = cfg.hierarchy.k().iter().map(|k| k.to_string()).collect();
    let mut s = String::new();
    let _ = writeln!(s, "k = {}", k.join(","));
    let _ = writeln!(s, "in_channels = {}", cfg.in_channels);
    let _ = writeln!(s, "base_channels = {}", cfg.base_channels);
    let _ = writeln!(s, "depth = {}", cfg.depth);
    let _ = writeln!(s, "pc = {}", cfg.enable_pc);
    let _ = writeln!(s, "sn = {}", cfg.enable_sn);
    let _ = writeln!(s, "prior = {}", cfg.prior);
    let _ = writeln!(s, "iteration = {iter}");
    s
}

fn parse_model_cfg(text: &str) -> std::result::Result<(ModelConfig, usize), String> {
    let kv = parse_kv(text).map_err(|e| e.to_string())?;
    let get = |key: &str| kv.get(key).ok_or_else(|| format!("missing key `{key}`"));
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
    }
    let k = get("k")?
        .split(',')
        .map(|v| num::<usize>("k", v.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut cfg = ModelConfig::new(HierarchySpec::new(k).map_err(|e| e.to_string())?);
    cfg.in_channels = num("in_channels", get("in_channels")?)?;
    cfg.base_channels = num("base_channels", get("base_channels")?)?;
    cfg.depth = num("depth", get("depth")?)?;
    cfg.enable_pc = num("pc", get("pc")?)?;
    cfg.enable_sn = num("sn", get("sn")?)?;
    cfg.prior = get("prior")?.parse()?;
    let iter = num("iteration", get("iteration")?)?;
    Ok((cfg, iter))
}

/// Write `store` (values, momentum, buffers) and the model configuration.
pub fn checkpoint_save(dir: &Path, net: &SegNet, store: &ParamStore<f32>, iter: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for p in store.params() {
        tsr1::write(&dir.join(format!("{}.tsr1", p.name)), &p.value)?;
        tsr1::write(&dir.join(format!("{}.momentum.tsr1", p.name)), &p.momentum)?;
    }
    for (name, t) in store.buffers() {
        tsr1::write(&dir.join(format!("{name}.tsr1")), t)?;
    }
    let path = dir.join(MODEL_CFG);
    fs::write(&path, render_model_cfg(net.config(), iter)).map_err(io_err(&path))
}

/// Model configuration and iteration recorded in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<(ModelConfig, usize)> {
    let path = dir.join(MODEL_CFG);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_model_cfg(&text).map_err(|msg| Error::Format { path, msg })
}

/// Rebuild the model and restore every tensor. With `expected` set, a
/// checkpoint written for a different configuration is an error.
pub fn checkpoint_load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let (cfg, iter) = checkpoint_config(dir)?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` model (K = {}, base {}, depth {}), expected `{}` (K = {}, base {}, depth {})",
                dir.display(),
                cfg.arch_tag(),
                cfg.hierarchy.num_sub(),
                cfg.base_channels,
                cfg.depth,
                want.arch_tag(),
                want.hierarchy.num_sub(),
                want.base_channels,
                want.depth
            )));
        }
    }
    let mut store = ParamStore::new();
    let net = SegNet::new(cfg, &mut store, &mut Rng::new(0))?;
    let load = |name: &str, file: String, like: &[usize]| -> Result<crate::Tensor<f32>> {
        let t = tsr1::read(&dir.join(&file)).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if t.shape() != like {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {like:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in store.params_mut() {
        p.value = load(&p.name, format!("{}.tsr1", p.name), p.value.shape())?;
        p.momentum = load(&p.name, format!("{}.momentum.tsr1", p.name), p.value.shape())?;
    }
    for (name, t) in store.buffers_mut() {
        *t = load(name, format!("{name}.tsr1"), t.shape())?;
    }
    Ok(Checkpoint { net, store, iter })
}
