//! Patient intensity and label volumes plus their on-disk layout:
//! `<id>_img.tnsr` (float32 `[S,H,W]`), `<id>_lbl.tnsr` (uint8 `[S,H,W]`)
//! and `<id>_meta.txt` (flat `key = value`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::tnsr::TnsrFile;

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const LVM: u8 = 2;
pub const RV: u8 = 3;
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SequenceTag {
    Cine,
    T2,
    Lge,
    Phantom,
}

impl SequenceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SequenceTag::Cine => "cine",
            SequenceTag::T2 => "t2",
            SequenceTag::Lge => "lge",
            SequenceTag::Phantom => "phantom",
        }
    }
}

impl fmt::Display for SequenceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cine" => Ok(Self::Cine),
            "t2" => Ok(Self::T2),
            "lge" => Ok(Self::Lge),
            "phantom" => Ok(Self::Phantom),
            other => Err(Error::Invalid(format!("unknown sequence tag `{other}`"))),
        }
    }
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
    pub slice: f64,
}

impl Spacing {
    pub fn new(row: f64, col: f64, slice: f64) -> Result<Self> {
        let s = Self { row, col, slice };
        if [row, col, slice].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(s)
        } else {
            Err(Error::Invalid(format!("spacing must be positive, got {s:?}")))
        }
    }

    pub fn isotropic() -> Self {
        Self {
            row: 1.0,
            col: 1.0,
            slice: 1.0,
        }
    }
}

/// Volume extent `(slices, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(slices: usize, rows: usize, cols: usize) -> Self {
        Self { slices, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.slices * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, s: usize, r: usize, c: usize) -> usize {
        (s * self.rows + r) * self.cols + c
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.slices, self.rows, self.cols]
    }

    fn from_shape(shape: &[usize], path: &Path) -> Result<Self> {
        match shape {
            [s, r, c] => Ok(Self::new(*s, *r, *c)),
            _ => Err(Error::format(path, format!("expected [S,H,W], got {shape:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientVolume {
    pub patient_id: String,
    pub sequence: SequenceTag,
    pub spacing: Spacing,
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl PatientVolume {
    pub fn new(
        patient_id: impl Into<String>,
        sequence: SequenceTag,
        spacing: Spacing,
        dims: Dims,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.slices < 1 {
            return Err(Error::Invalid("volume needs at least one slice".into()));
        }
        if data.len() != dims.len() {
            return Err(Error::Invalid(format!(
                "{} voxels for dims {dims:?}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite intensities".into()));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            sequence,
            spacing,
            dims,
            data,
        })
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let p = self.dims.plane();
        &self.data[s * p..(s + 1) * p]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub patient_id: String,
    pub spacing: Spacing,
    pub dims: Dims,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(
        patient_id: impl Into<String>,
        spacing: Spacing,
        dims: Dims,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Invalid(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Invalid(format!("label value {bad} outside 0..=3")));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            spacing,
            dims,
            labels,
        })
    }

    pub fn slice(&self, s: usize) -> &[u8] {
        let p = self.dims.plane();
        &self.labels[s * p..(s + 1) * p]
    }

    /// Binary mask of voxels whose label is in `classes`.
    pub fn mask(&self, classes: &[u8]) -> Vec<bool> {
        self.labels.iter().map(|l| classes.contains(l)).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_img.tnsr"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_lbl.tnsr"))
}

pub fn meta_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_meta.txt"))
}

fn meta(id: &str, sequence: Option<SequenceTag>, spacing: Spacing, dims: Dims) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("patient_id", id);
    if let Some(seq) = sequence {
        kv.set("sequence", seq);
    }
    kv.set("spacing_row", spacing.row);
    kv.set("spacing_col", spacing.col);
    kv.set("spacing_slice", spacing.slice);
    kv.set("slices", dims.slices);
    kv.set("rows", dims.rows);
    kv.set("cols", dims.cols);
    kv
}

pub fn write_patient(dir: &Path, v: &PatientVolume) -> Result<()> {
    TnsrFile::f32(v.dims.shape(), v.data.clone()).write(&image_path(dir, &v.patient_id))?;
    meta(&v.patient_id, Some(v.sequence), v.spacing, v.dims).write(&meta_path(dir, &v.patient_id))
}

/// Writes labels; also writes the meta file unless one already exists.
pub fn write_labels(dir: &Path, l: &LabelVolume) -> Result<()> {
    TnsrFile::u8(l.dims.shape(), l.labels.clone()).write(&label_path(dir, &l.patient_id))?;
    let mp = meta_path(dir, &l.patient_id);
    if !mp.exists() {
        meta(&l.patient_id, None, l.spacing, l.dims).write(&mp)?;
    }
    Ok(())
}

fn read_meta(dir: &Path, id: &str) -> Result<(KvFile, Spacing, PathBuf)> {
    let path = meta_path(dir, id);
    let kv = KvFile::read(&path)?;
    let spacing = Spacing::new(
        kv.require("spacing_row", &path)?,
        kv.require("spacing_col", &path)?,
        kv.require("spacing_slice", &path)?,
    )?;
    Ok((kv, spacing, path))
}

pub fn read_patient(dir: &Path, id: &str) -> Result<PatientVolume> {
    let (kv, spacing, mpath) = read_meta(dir, id)?;
    let path = image_path(dir, id);
    let (shape, data) = TnsrFile::read(&path)?.into_f32(&path)?;
    let sequence = match kv.get("sequence") {
        Some(s) => s.parse()?,
        None => return Err(Error::format(mpath, "missing key `sequence`")),
    };
    PatientVolume::new(id, sequence, spacing, Dims::from_shape(&shape, &path)?, data)
}

pub fn read_labels(dir: &Path, id: &str) -> Result<LabelVolume> {
    let (_, spacing, _) = read_meta(dir, id)?;
    let path = label_path(dir, id);
    let (shape, labels) = TnsrFile::read(&path)?.into_u8(&path)?;
    LabelVolume::new(id, spacing, Dims::from_shape(&shape, &path)?, labels)
}

/// Ids of every `<id>_lbl.tnsr` in `dir`, sorted.
pub fn list_label_ids(dir: &Path) -> Result<Vec<String>> {
    list_ids(dir, "_lbl.tnsr")
}

/// Ids of every `<id>_img.tnsr` in `dir`, sorted.
pub fn list_image_ids(dir: &Path) -> Result<Vec<String>> {
    list_ids(dir, "_img.tnsr")
}

fn list_ids(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(suffix))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patient_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 3, 4);
        let sp = Spacing::new(1.25, 1.5, 8.0).unwrap();
        let v = PatientVolume::new(
            "p1",
            SequenceTag::Lge,
            sp,
            dims,
            (0..24).map(|i| i as f32 * 0.5).collect(),
        )
        .unwrap();
        let l = LabelVolume::new("p1", sp, dims, (0..24).map(|i| (i % 4) as u8).collect()).unwrap();
        write_patient(dir.path(), &v).unwrap();
        write_labels(dir.path(), &l).unwrap();
        assert_eq!(read_patient(dir.path(), "p1").unwrap(), v);
        assert_eq!(read_labels(dir.path(), "p1").unwrap(), l);
        assert_eq!(list_label_ids(dir.path()).unwrap(), vec!["p1".to_string()]);
    }

    #[test]
    fn rejects_bad_labels_and_spacing() {
        let dims = Dims::new(1, 1, 2);
        assert!(LabelVolume::new("x", Spacing::isotropic(), dims, vec![0, 4]).is_err());
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
    }
}
