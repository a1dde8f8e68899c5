use std::path::Path;

use anyhow::Context;
use sk_unet::kv::KvFile;
use sk_unet::network::{checkpoint, train, Model, ModelConfig, Sample, TrainConfig};
use sk_unet::phantom::VARIANTS;
use sk_unet::preprocess::{crop_labels, prepare, stack_neighbors, DEFAULT_CROP};
use sk_unet::volume::{list_image_ids, read_labels, read_patient, SequenceTag};

use crate::config::{write_resolved, List, Resolver};
use crate::{CliError, CliResult, TrainArgs};

/// Every slice of every `data/train/<variant>` patient, ROI-cropped,
/// z-scored and stacked with its neighbours.
pub fn load_samples(data: &Path, variants: &[SequenceTag], crop: usize) -> anyhow::Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for tag in variants {
        let dir = data.join("train").join(tag.as_str());
        let ids = list_image_ids(&dir)?;
        if ids.is_empty() {
            anyhow::bail!("no training images in {}", dir.display());
        }
        for id in ids {
            let v = read_patient(&dir, &id)?;
            let l = read_labels(&dir, &id)?;
            let (z, b, constant) = prepare(&v, crop)?;
            if constant {
                log::warn!("{id} ({tag}): constant intensities");
            }
            let lc = crop_labels(&l, b);
            for s in 0..z.dims.slices {
                samples.push(Sample::new(stack_neighbors(&z, s)?, lc.slice(s).to_vec())?);
            }
        }
    }
    Ok(samples)
}

pub fn run(a: TrainArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let dm = ModelConfig::default();
    let dt = TrainConfig::default();
    let data = r.path("data", a.data)?;
    let out = r.path("out", a.out)?;
    let epochs = r.value("epochs", a.epochs, dt.epochs)?;
    let base_width = r.value("base_width", a.base_width, dm.base_width)?;
    let depth = r.value("depth", a.depth, dm.depth)?;
    let lr = r.value("lr", a.lr, dt.lr)?;
    let batch = r.value("batch", a.batch, dt.batch_size)?;
    let seed = r.value("seed", a.seed, dt.seed)?;
    let no_se = r.flag("no_se", a.no_se)?;
    let no_sk = r.flag("no_sk", a.no_sk)?;
    let crop = r.value("crop", a.crop, DEFAULT_CROP)?;
    let variants: List<SequenceTag> = r.value(
        "variants",
        a.variants.map(|s| s.parse()).transpose().map_err(|e: sk_unet::Error| CliError::Usage(e.to_string()))?,
        List(VARIANTS.to_vec()),
    )?;
    let snapshots: List<usize> = r.value(
        "snapshots",
        a.snapshots
            .map(|s| s.parse())
            .transpose()
            .map_err(|_| CliError::Usage("--snapshots expects comma-separated epochs".into()))?,
        List(Vec::new()),
    )?;
    let resolved = r.finish()?;

    let model_cfg = ModelConfig {
        base_width,
        depth,
        use_se: !no_se,
        use_sk: !no_sk,
        seed,
        ..dm
    };
    model_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if batch == 0 {
        return Err(CliError::Usage("--batch must be >= 1".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(CliError::Usage(format!("--lr must be finite and >= 0, got {lr}")));
    }
    if variants.0.is_empty() {
        return Err(CliError::Usage("--variants is empty".into()));
    }
    if crop == 0 || crop % model_cfg.size_multiple() != 0 {
        return Err(CliError::Usage(format!(
            "--crop must be a positive multiple of {}, got {crop}",
            model_cfg.size_multiple()
        )));
    }

    write_resolved(&resolved, &out)?;
    let samples = load_samples(&data, &variants.0, crop).context("loading training data")?;
    log::info!("{} training slices from {}", samples.len(), data.display());

    let mut model = Model::build(&model_cfg)?;
    let mut extra = KvFile::new();
    extra.set("crop", crop);
    extra.set("epochs", epochs);
    extra.set("lr", lr);
    extra.set("batch", batch);
    extra.set("variants", &variants);
    extra.set("train_slices", samples.len());
    let cfg = TrainConfig {
        lr,
        epochs,
        batch_size: batch,
        seed,
        ..dt
    };
    let mut so_far = Vec::new();
    let logs = train(&mut model, &samples, &cfg, |log, m| {
        so_far.push(*log);
        if snapshots.0.contains(&log.epoch) {
            let dir = out.join(format!("epoch_{:03}", log.epoch));
            checkpoint::save(m, &dir, &extra)?;
            checkpoint::write_log(&dir.join(checkpoint::TRAIN_LOG), &so_far)?;
        }
        Ok(())
    })?;
    checkpoint::save(&model, &out, &extra)?;
    checkpoint::write_log(&out.join(checkpoint::TRAIN_LOG), &logs)?;
    log::info!("checkpoint {} written to {}", model.checksum(), out.display());
    Ok(())
}
