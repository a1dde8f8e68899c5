//! Diagnostic PNGs: the input slice in grayscale with the predicted class
//! contours drawn on top.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use sk_unet::volume::{LabelVolume, PatientVolume, LV, LVM, RV};

fn colour(label: u8) -> [u8; 3] {
    match label {
        LV => [230, 40, 40],
        LVM => [40, 210, 60],
        RV => [50, 110, 255],
        _ => [255, 255, 0],
    }
}

/// RGB pixels of slice `s`.
pub fn render(v: &PatientVolume, pred: &LabelVolume, s: usize) -> Vec<u8> {
    let (rows, cols) = (v.dims.rows, v.dims.cols);
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let img = v.slice(s);
    let lbl = pred.slice(s);
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let l = lbl[i];
            let edge = l != 0 && {
                let differs = |rr: usize, cc: usize| lbl[rr * cols + cc] != l;
                r == 0
                    || c == 0
                    || r + 1 == rows
                    || c + 1 == cols
                    || differs(r - 1, c)
                    || differs(r + 1, c)
                    || differs(r, c - 1)
                    || differs(r, c + 1)
            };
            if edge {
                rgb.extend_from_slice(&colour(l));
            } else {
                let g = (((img[i] - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8;
                rgb.extend_from_slice(&[g, g, g]);
            }
        }
    }
    rgb
}

pub fn write_png(path: &Path, rows: usize, cols: usize, rgb: &[u8]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(rgb)?;
    w.finish()?;
    Ok(())
}

/// Writes `dir/<id>_sNN.png` for every slice.
pub fn write_all(dir: &Path, v: &PatientVolume, pred: &LabelVolume) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in 0..v.dims.slices {
        let path = dir.join(format!("{}_s{:02}.png", v.patient_id, s));
        write_png(&path, v.dims.rows, v.dims.cols, &render(v, pred, s))?;
    }
    Ok(())
}
