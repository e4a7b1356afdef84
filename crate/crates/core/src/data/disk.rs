//! Dataset directories: a `manifest` text file plus one folder per sample
//! holding `image.tsr1`, `y.tsr1` and (fine, val, test) `z.tsr1`. Subclass
//! maps withheld from coarse samples go to `oracle/<id>.z.tsr1`.
//!
//! Manifest lines are `id role seed`; `# key = value` comment lines record the
//! generator settings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::generate::GeneratorSpec;
use super::hierarchy::LabelMap;
use super::split::{DatasetSplit, Sample};
use crate::error::{io_err, Error, Result};
use crate::tsr1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Fine,
    Coarse,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Fine => "fine",
            Role::Coarse => "coarse",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fine" => Ok(Role::Fine),
            "coarse" => Ok(Role::Coarse),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub generator: GeneratorSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    pub fn render(&self) -> String {
        let g = &self.generator;
        let mut out = String::from("# subseg dataset manifest: id role seed\n");
        for (k, v) in [
            ("height", g.height.to_string()),
            ("width", g.width.to_string()),
            ("channels", g.channels.to_string()),
            ("k_fg", g.k_fg.to_string()),
            ("noise_sigma", g.noise_sigma.to_string()),
            ("max_objects", g.max_objects.to_string()),
            ("radius_min", g.radius_min.to_string()),
            ("radius_max", g.radius_max.to_string()),
            ("aspect_min", g.aspect_min.to_string()),
            ("max_decoys", g.max_decoys.to_string()),
            ("clutter", g.clutter.to_string()),
            ("class_jitter", g.class_jitter.to_string()),
            ("gamma_spread", g.gamma_spread.to_string()),
        ] {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.id, e.role, e.seed));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", line + 1),
        };
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, role, seed] = fields[..] else {
                return Err(bad(ln, format!("expected `id role seed`, got `{line}`")));
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                role: role.parse().map_err(|e| bad(ln, e))?,
                seed: seed.parse().map_err(|e| bad(ln, format!("seed: {e}")))?,
            });
        }
        let mut generator = GeneratorSpec::default();
        fn field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str, slot: &mut T) -> std::result::Result<(), String> {
            if let Some(v) = meta.get(key) {
                *slot = v.parse().map_err(|_| format!("bad value `{v}` for {key}"))?;
            }
            Ok(())
        }
        let g = &mut generator;
        field(&meta, "height", &mut g.height)
            .and(field(&meta, "width", &mut g.width))
            .and(field(&meta, "channels", &mut g.channels))
            .and(field(&meta, "k_fg", &mut g.k_fg))
            .and(field(&meta, "noise_sigma", &mut g.noise_sigma))
            .and(field(&meta, "max_objects", &mut g.max_objects))
            .and(field(&meta, "radius_min", &mut g.radius_min))
            .and(field(&meta, "radius_max", &mut g.radius_max))
            .and(field(&meta, "aspect_min", &mut g.aspect_min))
            .and(field(&meta, "max_decoys", &mut g.max_decoys))
            .and(field(&meta, "clutter", &mut g.clutter))
            .and(field(&meta, "class_jitter", &mut g.class_jitter))
            .and(field(&meta, "gamma_spread", &mut g.gamma_spread))
            .map_err(|msg| Error::Format {
                path: path.to_path_buf(),
                msg,
            })?;
        Ok(Self { generator, entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text, &path)
    }
}

fn oracle_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("oracle").join(format!("{id}.z.tsr1"))
}

/// Write `split` under `dir`. Ids are assigned in order fine, coarse, val, test.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, generator: &GeneratorSpec) -> Result<Manifest> {
    fs::create_dir_all(dir.join("oracle")).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    let groups = [
        (Role::Fine, &split.fine),
        (Role::Coarse, &split.coarse),
        (Role::Val, &split.val),
        (Role::Test, &split.test),
    ];
    let mut next = 0usize;
    for (role, samples) in groups {
        for (i, s) in samples.iter().enumerate() {
            let id = format!("s{next:05}");
            next += 1;
            let sd = dir.join(&id);
            fs::create_dir_all(&sd).map_err(io_err(&sd))?;
            tsr1::write(&sd.join("image.tsr1"), &s.image)?;
            tsr1::write(&sd.join("y.tsr1"), &s.y.to_tensor())?;
            if let Some(z) = &s.z {
                tsr1::write(&sd.join("z.tsr1"), &z.to_tensor())?;
            }
            if role == Role::Coarse {
                if let Some(z) = split.hidden_label(i) {
                    tsr1::write(&oracle_path(dir, &id), &z.to_tensor())?;
                }
            }
            entries.push(ManifestEntry { id, role, seed: s.seed });
        }
    }
    let manifest = Manifest {
        generator: generator.clone(),
        entries,
    };
    let path = dir.join("manifest");
    fs::write(&path, manifest.render()).map_err(io_err(&path))?;
    Ok(manifest)
}

fn load_sample(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    let sd = dir.join(&e.id);
    let image = tsr1::read(&sd.join("image.tsr1"))?;
    let y_path = sd.join("y.tsr1");
    let y = LabelMap::from_tensor(&tsr1::read(&y_path)?).map_err(|err| Error::Format {
        path: y_path,
        msg: err.to_string(),
    })?;
    let z_path = sd.join("z.tsr1");
    let z = if e.role != Role::Coarse {
        let z = LabelMap::from_tensor(&tsr1::read(&z_path)?).map_err(|err| Error::Format {
            path: z_path.clone(),
            msg: err.to_string(),
        })?;
        Some(z)
    } else {
        None
    };
    let dims_ok = image.rank() == 3
        && (image.shape()[1], image.shape()[2]) == y.dims()
        && z.as_ref().map_or(true, |z| z.dims() == y.dims());
    if !dims_ok {
        return Err(Error::Format {
            path: sd,
            msg: format!("image {:?} and label maps disagree on size", image.shape()),
        });
    }
    Ok(Sample {
        image,
        y,
        z,
        seed: e.seed,
    })
}

/// Read a dataset directory. Withheld coarse labels are only loaded when
/// `with_hidden` is set (diagnostics).
pub fn load_dataset(dir: &Path, with_hidden: bool) -> Result<(DatasetSplit, Manifest)> {
    let manifest = Manifest::read(dir)?;
    let (mut fine, mut coarse, mut val, mut test, mut hidden) = (vec![], vec![], vec![], vec![], vec![]);
    for e in &manifest.entries {
        let s = load_sample(dir, e)?;
        match e.role {
            Role::Fine => fine.push(s),
            Role::Coarse => {
                coarse.push(s);
                let p = oracle_path(dir, &e.id);
                hidden.push(if with_hidden && p.exists() {
                    Some(LabelMap::from_tensor(&tsr1::read(&p)?)?)
                } else {
                    None
                });
            }
            Role::Val => val.push(s),
            Role::Test => test.push(s),
        }
    }
    Ok((DatasetSplit::new(fine, coarse, val, test, hidden), manifest))
}
