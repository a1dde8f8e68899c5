//! Checkpoint directories: `manifest.txt` (`name<TAB>shape<TAB>filename`),
//! one TNSR file per parameter and `config.txt`.

use std::fs;
use std::path::Path;

use super::{EpochLog, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::tnsr::TnsrFile;
use crate::tensor::{Float, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.csv";

const MODEL_KEYS: [&str; 9] = [
    "base_width",
    "depth",
    "num_classes",
    "in_channels",
    "use_se",
    "use_sk",
    "seed",
    "reduction_ratio",
    "l_min",
];

pub fn config_to_kv(cfg: &ModelConfig) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("base_width", cfg.base_width);
    kv.set("depth", cfg.depth);
    kv.set("num_classes", cfg.num_classes);
    kv.set("in_channels", cfg.in_channels);
    kv.set("use_se", cfg.use_se);
    kv.set("use_sk", cfg.use_sk);
    kv.set("seed", cfg.seed);
    kv.set("reduction_ratio", cfg.reduction_ratio);
    kv.set("l_min", cfg.l_min);
    kv
}

pub fn config_from_kv(kv: &KvFile, path: &Path) -> Result<ModelConfig> {
    Ok(ModelConfig {
        base_width: kv.require("base_width", path)?,
        depth: kv.require("depth", path)?,
        num_classes: kv.require("num_classes", path)?,
        in_channels: kv.require("in_channels", path)?,
        use_se: kv.require("use_se", path)?,
        use_sk: kv.require("use_sk", path)?,
        seed: kv.require("seed", path)?,
        reduction_ratio: kv.require("reduction_ratio", path)?,
        l_min: kv.require("l_min", path)?,
    })
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Writes `model` to `dir`, creating it if needed. `extra` entries (training
/// metadata) are appended to `config.txt` after the model keys.
pub fn save(model: &Model, dir: &Path, extra: &KvFile) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, name, t) in model.params.iter() {
        let file = format!("p{:03}_{name}.tnsr", i.0);
        let data: Vec<f32> = t.data().iter().map(|v| *v as f32).collect();
        TnsrFile::f32(t.shape().to_vec(), data).write(&dir.join(&file))?;
        manifest.push_str(&format!("{name}\t{}\t{file}\n", shape_str(t.shape())));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let mut kv = config_to_kv(&model.config);
    for (k, v) in extra.entries() {
        if !MODEL_KEYS.contains(&k.as_str()) {
            kv.set(k, v);
        }
    }
    kv.write(&dir.join(CONFIG))
}

/// Rebuilds the model described by `config.txt` and loads its parameters.
/// Returns the model together with the full config file.
pub fn load(dir: &Path) -> Result<(Model, KvFile)> {
    let cpath = dir.join(CONFIG);
    let kv = KvFile::read(&cpath)?;
    let cfg = config_from_kv(&kv, &cpath)?;
    let mut model = Model::build(&cfg)?;
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut seen = vec![false; model.params.len()];
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |d: String| Error::format(&mpath, format!("line {}: {d}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, file] = fields[..] else {
            return Err(bad("expected name<TAB>shape<TAB>filename".into()));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad(format!("bad shape `{shape}`")))?;
        let id = model
            .params
            .find(name)
            .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(bad(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                model.params.get(id).shape()
            )));
        }
        let fpath = dir.join(file);
        let (fshape, data) = TnsrFile::read(&fpath)?.into_f32(&fpath)?;
        if fshape != shape {
            return Err(Error::format(&fpath, format!("shape {fshape:?} disagrees with manifest")));
        }
        *model.params.get_mut(id) = Tensor::new(shape, data.into_iter().map(|v| v as Float).collect())?;
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::format(
            &mpath,
            format!("parameter `{}` missing", model.params.name(crate::blocks::ParamId(missing))),
        ));
    }
    Ok((model, kv))
}

pub fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
