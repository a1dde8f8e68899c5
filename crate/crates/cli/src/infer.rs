use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sk_unet::network::{checkpoint, predict_labels, Model};
use sk_unet::postprocess::largest_cc_constraint;
use sk_unet::preprocess::{prepare, stack_neighbors, uncrop};
use sk_unet::tensor::Tensor;
use sk_unet::volume::{list_image_ids, read_patient, write_labels, LabelVolume, PatientVolume};

use crate::config::{write_resolved, Resolver};
use crate::{overlay, CliResult, InferArgs};

const SLICES_PER_BATCH: usize = 4;

/// Predicted labels for `v` in its original frame.
pub fn segment(model: &Model, crop: usize, v: &PatientVolume, postprocess: bool) -> anyhow::Result<LabelVolume> {
    let (z, b, constant) = prepare(v, crop)?;
    if constant {
        log::warn!("{}: constant intensities", v.patient_id);
    }
    let mut cropped = Vec::with_capacity(z.dims.len());
    let slices: Vec<usize> = (0..z.dims.slices).collect();
    for chunk in slices.chunks(SLICES_PER_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * crop * crop);
        for &s in chunk {
            data.extend_from_slice(stack_neighbors(&z, s)?.data());
        }
        let x = Tensor::new(vec![chunk.len(), 3, crop, crop], data)?;
        cropped.extend(predict_labels(&model.infer(&x)?)?);
    }
    let labels = uncrop(&cropped, v.dims, b, 0u8)?;
    let lv = LabelVolume::new(&v.patient_id, v.spacing, v.dims, labels)?;
    if !postprocess {
        return Ok(lv);
    }
    let (out, empty) = largest_cc_constraint(&lv);
    if empty {
        log::warn!("{}: empty prediction", v.patient_id);
    }
    Ok(out)
}

/// `(directory, id)` of every input patient.
fn inputs(input: &Path) -> anyhow::Result<Vec<(PathBuf, String)>> {
    if input.is_dir() {
        let ids = list_image_ids(input)?;
        if ids.is_empty() {
            bail!("no `<id>_img.tnsr` files in {}", input.display());
        }
        return Ok(ids.into_iter().map(|id| (input.to_path_buf(), id)).collect());
    }
    let name = input
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let Some(id) = name.strip_suffix("_img.tnsr") else {
        bail!("{} is neither a directory nor a `<id>_img.tnsr` file", input.display());
    };
    if !input.exists() {
        bail!("{} does not exist", input.display());
    }
    let dir = input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok(vec![(dir, id.to_string())])
}

pub fn run(a: InferArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let ckpt = r.path("ckpt", a.ckpt)?;
    let input = r.path("input", a.input)?;
    let output = r.path("output", a.output)?;
    let no_post = r.flag("no_postprocess", a.no_postprocess)?;
    let no_overlay = r.flag("no_overlay", a.no_overlay)?;
    let resolved = r.finish()?;

    let (model, kv) = checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let crop: usize = kv.require("crop", &ckpt.join(checkpoint::CONFIG))?;
    let patients = inputs(&input)?;
    write_resolved(&resolved, &output)?;
    for (dir, id) in patients {
        let v = read_patient(&dir, &id)?;
        let pred = segment(&model, crop, &v, !no_post)?;
        write_labels(&output, &pred)?;
        if !no_overlay {
            overlay::write_all(&output.join("overlays"), &v, &pred)?;
        }
        log::info!(
            "{id}: lv {} lvm {} rv {} voxels",
            pred.count(sk_unet::volume::LV),
            pred.count(sk_unet::volume::LVM),
            pred.count(sk_unet::volume::RV)
        );
    }
    Ok(())
}
