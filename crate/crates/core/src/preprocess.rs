//! ROI location, cropping, intensity normalization, augmentation and
//! three-slice stacking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::volume::{Dims, LabelVolume, PatientVolume};

pub const DEFAULT_CROP: usize = 96;
pub const ROI_PERCENTILE: f64 = 0.9;
pub const ROI_MIN_PIXELS: usize = 10;
pub const AUGMENT_PROB: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const CROP_RATIO: f64 = 0.875;

/// Square crop window of even side; its top-left corner is `center - size / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub center_row: i64,
    pub center_col: i64,
    pub size: usize,
}

impl CropBox {
    pub fn new(center_row: i64, center_col: i64, size: usize) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(2) {
            return Err(Error::Invalid(format!("crop size {size} must be even and nonzero")));
        }
        Ok(Self {
            center_row,
            center_col,
            size,
        })
    }

    pub fn top(&self) -> i64 {
        self.center_row - (self.size / 2) as i64
    }

    pub fn left(&self) -> i64 {
        self.center_col - (self.size / 2) as i64
    }

    fn centered(dims: Dims, size: usize) -> Self {
        Self {
            center_row: (dims.rows / 2) as i64,
            center_col: (dims.cols / 2) as i64,
            size,
        }
    }
}

/// A single 2-D slice in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "{} values for a {rows}x{cols} plane",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Value at a possibly out-of-range position; zero (default) outside.
    #[inline]
    fn at_or_zero(&self, r: i64, c: i64) -> T {
        if r < 0 || c < 0 || r >= self.rows as i64 || c >= self.cols as i64 {
            T::default()
        } else {
            self.at(r as usize, c as usize)
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.at(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Mirrors columns.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            row.reverse();
        }
        out
    }

    /// Mirrors rows.
    pub fn flip_vertical(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.cols).rev() {
            data.extend_from_slice(row);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Copies the `h x w` window at `(top, left)` into the center of a zeroed
    /// plane of the original size.
    fn crop_and_pad(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut out = Self::filled(self.rows, self.cols, T::default());
        let (dr, dc) = ((self.rows - h) / 2, (self.cols - w) / 2);
        for r in 0..h {
            let src = &self.data[(top + r) * self.cols + left..][..w];
            out.data[(dr + r) * self.cols + dc..][..w].copy_from_slice(src);
        }
        out
    }
}

impl Plane<f32> {
    /// Rotation about the plane center, bilinear, zero fill.
    pub fn rotate_bilinear(&self, degrees: f64) -> Self {
        let (cos, sin, cr, cc) = rotation_frame(self.rows, self.cols, degrees);
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (sr, sc) = inverse_rotate(r, c, cos, sin, cr, cc);
                let (r0, c0) = (sr.floor(), sc.floor());
                let (fr, fc) = (sr - r0, sc - c0);
                let (r0, c0) = (r0 as i64, c0 as i64);
                let v = (1.0 - fr) * (1.0 - fc) * self.at_or_zero(r0, c0) as f64
                    + (1.0 - fr) * fc * self.at_or_zero(r0, c0 + 1) as f64
                    + fr * (1.0 - fc) * self.at_or_zero(r0 + 1, c0) as f64
                    + fr * fc * self.at_or_zero(r0 + 1, c0 + 1) as f64;
                data.push(v as f32);
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

impl<T: Copy + Default> Plane<T> {
    /// Rotation about the plane center, nearest neighbour, zero fill.
    pub fn rotate_nearest(&self, degrees: f64) -> Self {
        let (cos, sin, cr, cc) = rotation_frame(self.rows, self.cols, degrees);
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (sr, sc) = inverse_rotate(r, c, cos, sin, cr, cc);
                data.push(self.at_or_zero(sr.round() as i64, sc.round() as i64));
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

fn rotation_frame(rows: usize, cols: usize, degrees: f64) -> (f64, f64, f64, f64) {
    let t = degrees.to_radians();
    (t.cos(), t.sin(), (rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0)
}

#[inline]
fn inverse_rotate(r: usize, c: usize, cos: f64, sin: f64, cr: f64, cc: f64) -> (f64, f64) {
    let (dr, dc) = (r as f64 - cr, c as f64 - cc);
    (cos * dr + sin * dc + cr, -sin * dr + cos * dc + cc)
}

/// Per-pixel intensity variance across slices, thresholded at its 90th
/// percentile; the box is centered on the centroid of the surviving pixels.
pub fn locate_roi(v: &PatientVolume, size: usize) -> Result<CropBox> {
    CropBox::new(0, 0, size)?;
    let d = v.dims;
    let plane = d.plane();
    let s = d.slices as f64;
    let mut mean = vec![0.0f64; plane];
    for k in 0..d.slices {
        for (m, x) in mean.iter_mut().zip(v.slice(k)) {
            *m += *x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s);
    let mut var = vec![0.0f64; plane];
    for k in 0..d.slices {
        for ((acc, x), m) in var.iter_mut().zip(v.slice(k)).zip(&mean) {
            let e = *x as f64 - m;
            *acc += e * e;
        }
    }
    var.iter_mut().for_each(|x| *x /= s);

    let mut sorted = var.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((sorted.len() - 1) as f64 * ROI_PERCENTILE).floor() as usize];
    let (mut n, mut sr, mut sc) = (0usize, 0.0f64, 0.0f64);
    for (i, x) in var.iter().enumerate() {
        if *x > threshold {
            n += 1;
            sr += (i / d.cols) as f64;
            sc += (i % d.cols) as f64;
        }
    }
    if n < ROI_MIN_PIXELS {
        return Ok(CropBox::centered(d, size));
    }
    let r = (sr / n as f64).round() as i64;
    let c = (sc / n as f64).round() as i64;
    CropBox::new(r, c, size)
}

fn crop_plane<T: Copy + Default>(src: &[T], dims: Dims, b: CropBox, out: &mut Vec<T>) {
    let (top, left) = (b.top(), b.left());
    for r in 0..b.size as i64 {
        let sr = top + r;
        for c in 0..b.size as i64 {
            let sc = left + c;
            let inside = sr >= 0 && sc >= 0 && sr < dims.rows as i64 && sc < dims.cols as i64;
            out.push(if inside {
                src[sr as usize * dims.cols + sc as usize]
            } else {
                T::default()
            });
        }
    }
}

fn crop_slices<T: Copy + Default>(data: &[T], dims: Dims, b: CropBox) -> Vec<T> {
    let mut out = Vec::with_capacity(dims.slices * b.size * b.size);
    for s in 0..dims.slices {
        crop_plane(&data[s * dims.plane()..(s + 1) * dims.plane()], dims, b, &mut out);
    }
    out
}

/// Square `size x size` crop per slice, zero outside the image.
pub fn crop(v: &PatientVolume, b: CropBox) -> PatientVolume {
    PatientVolume {
        dims: Dims::new(v.dims.slices, b.size, b.size),
        data: crop_slices(&v.data, v.dims, b),
        ..v.clone()
    }
}

pub fn crop_labels(l: &LabelVolume, b: CropBox) -> LabelVolume {
    LabelVolume {
        dims: Dims::new(l.dims.slices, b.size, b.size),
        labels: crop_slices(&l.labels, l.dims, b),
        ..l.clone()
    }
}

/// Inverse of cropping: writes `cropped` (`[S, size, size]`) back into a
/// frame of `original` dims; pixels the box never covered get `fill`.
pub fn uncrop<T: Copy>(cropped: &[T], original: Dims, b: CropBox, fill: T) -> Result<Vec<T>> {
    let side = b.size * b.size;
    if cropped.len() != original.slices * side {
        return Err(Error::Invalid(format!(
            "{} cropped values for {} slices of {}x{}",
            cropped.len(),
            original.slices,
            b.size,
            b.size
        )));
    }
    let mut out = vec![fill; original.len()];
    let (top, left) = (b.top(), b.left());
    for s in 0..original.slices {
        for r in 0..b.size as i64 {
            let dr = top + r;
            if dr < 0 || dr >= original.rows as i64 {
                continue;
            }
            for c in 0..b.size as i64 {
                let dc = left + c;
                if dc < 0 || dc >= original.cols as i64 {
                    continue;
                }
                out[original.index(s, dr as usize, dc as usize)] =
                    cropped[s * side + (r as usize) * b.size + c as usize];
            }
        }
    }
    Ok(out)
}

/// Per-volume standardization. Returns the normalized volume and `true` when
/// the input is constant (the output is then all zeros).
pub fn zscore(v: &PatientVolume) -> (PatientVolume, bool) {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|x| *x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|x| (*x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let mut out = v.clone();
    if lo == hi || var <= 0.0 {
        out.data.iter_mut().for_each(|x| *x = 0.0);
        return (out, true);
    }
    let inv = 1.0 / var.sqrt();
    out.data
        .iter_mut()
        .for_each(|x| *x = ((*x as f64 - mean) * inv) as f32);
    (out, false)
}

/// Transforms applied by one [`augment`] call, in application order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentRecord {
    pub transpose: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: Option<f64>,
    /// Top-left corner of the 87.5% window.
    pub crop_origin: Option<(usize, usize)>,
}

/// Random transpose, flips, rotation and crop, each with probability 0.5.
/// Image and label always receive the same geometric transform. Planes must
/// be square so the output keeps the input shape.
pub fn augment(
    img: &Plane<f32>,
    lbl: &Plane<u8>,
    rng: &mut impl Rng,
) -> Result<(Plane<f32>, Plane<u8>, AugmentRecord)> {
    let (mut imgs, lbl, rec) = augment_stack(std::slice::from_ref(img), lbl, rng)?;
    Ok((imgs.remove(0), lbl, rec))
}

/// [`augment`] for a multi-channel image: every channel gets the same transform.
pub fn augment_stack(
    imgs: &[Plane<f32>],
    lbl: &Plane<u8>,
    rng: &mut impl Rng,
) -> Result<(Vec<Plane<f32>>, Plane<u8>, AugmentRecord)> {
    if let Some(img) = imgs.iter().find(|i| i.rows != lbl.rows || i.cols != lbl.cols) {
        return Err(Error::Invalid(format!(
            "image {}x{} and label {}x{} differ",
            img.rows, img.cols, lbl.rows, lbl.cols
        )));
    }
    if lbl.rows != lbl.cols {
        return Err(Error::Invalid(format!(
            "augmentation needs square planes, got {}x{}",
            lbl.rows, lbl.cols
        )));
    }
    let mut rec = AugmentRecord::default();
    let (mut im, mut lb) = (imgs.to_vec(), lbl.clone());
    if rng.random_bool(AUGMENT_PROB) {
        rec.transpose = true;
        im = im.iter().map(Plane::transpose).collect();
        lb = lb.transpose();
    }
    if rng.random_bool(AUGMENT_PROB) {
        rec.hflip = true;
        im = im.iter().map(Plane::flip_horizontal).collect();
        lb = lb.flip_horizontal();
    }
    if rng.random_bool(AUGMENT_PROB) {
        rec.vflip = true;
        im = im.iter().map(Plane::flip_vertical).collect();
        lb = lb.flip_vertical();
    }
    if rng.random_bool(AUGMENT_PROB) {
        let deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        rec.rotation_deg = Some(deg);
        im = im.iter().map(|p| p.rotate_bilinear(deg)).collect();
        lb = lb.rotate_nearest(deg);
    }
    if rng.random_bool(AUGMENT_PROB) {
        let h = (lb.rows as f64 * CROP_RATIO).round() as usize;
        let w = (lb.cols as f64 * CROP_RATIO).round() as usize;
        let top = rng.random_range(0..=lb.rows - h);
        let left = rng.random_range(0..=lb.cols - w);
        rec.crop_origin = Some((top, left));
        im = im.iter().map(|p| p.crop_and_pad(top, left, h, w)).collect();
        lb = lb.crop_and_pad(top, left, h, w);
    }
    Ok((im, lb, rec))
}

/// Slices `(s-1, s, s+1)` as channels, replicating at the ends.
pub fn stack_neighbors(v: &PatientVolume, s: usize) -> Result<Tensor> {
    let d = v.dims;
    if s >= d.slices {
        return Err(Error::Invalid(format!(
            "slice {s} out of range for {} slices",
            d.slices
        )));
    }
    let idx = [s.saturating_sub(1), s, (s + 1).min(d.slices - 1)];
    let mut data = Vec::with_capacity(3 * d.plane());
    for k in idx {
        data.extend(v.slice(k).iter().map(|x| *x as Float));
    }
    Tensor::new(vec![3, d.rows, d.cols], data)
}

pub fn image_plane(v: &PatientVolume, s: usize) -> Plane<f32> {
    Plane {
        rows: v.dims.rows,
        cols: v.dims.cols,
        data: v.slice(s).to_vec(),
    }
}

pub fn label_plane(l: &LabelVolume, s: usize) -> Plane<u8> {
    Plane {
        rows: l.dims.rows,
        cols: l.dims.cols,
        data: l.slice(s).to_vec(),
    }
}

/// ROI crop followed by z-scoring; the box is returned so predictions can be
/// mapped back with [`uncrop`].
pub fn prepare(v: &PatientVolume, size: usize) -> Result<(PatientVolume, CropBox, bool)> {
    let b = locate_roi(v, size)?;
    let (z, constant) = zscore(&crop(v, b));
    Ok((z, b, constant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{SequenceTag, Spacing};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: Dims, f: impl Fn(usize, usize, usize) -> f32) -> PatientVolume {
        let mut data = Vec::with_capacity(dims.len());
        for s in 0..dims.slices {
            for r in 0..dims.rows {
                for c in 0..dims.cols {
                    data.push(f(s, r, c));
                }
            }
        }
        PatientVolume::new("t", SequenceTag::Phantom, Spacing::isotropic(), dims, data).unwrap()
    }

    #[test]
    fn constant_volume_falls_back_to_center() {
        let v = vol(Dims::new(4, 30, 50), |_, _, _| 3.0);
        let b = locate_roi(&v, 16).unwrap();
        assert_eq!((b.center_row, b.center_col), (15, 25));
        let (z, warn) = zscore(&v);
        assert!(warn && z.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn roi_finds_varying_disk() {
        let v = vol(Dims::new(6, 64, 64), |s, r, c| {
            let d2 = (r as f32 - 20.0).powi(2) + (c as f32 - 44.0).powi(2);
            if d2 < (3.0 + s as f32).powi(2) {
                1.0
            } else {
                0.0
            }
        });
        let b = locate_roi(&v, 32).unwrap();
        assert!((b.center_row - 20).abs() <= 1 && (b.center_col - 44).abs() <= 1, "{b:?}");
    }

    #[test]
    fn crop_outside_is_zero_and_uncrop_restores() {
        let v = vol(Dims::new(2, 10, 12), |s, r, c| (s * 1000 + r * 12 + c) as f32 + 1.0);
        let b = CropBox::new(1, 11, 8).unwrap();
        let cr = crop(&v, b);
        assert_eq!(cr.dims, Dims::new(2, 8, 8));
        // rows -3..5, cols 7..15
        assert_eq!(cr.data[0], 0.0);
        assert_eq!(cr.data[3 * 8], v.data[7]);
        let back = uncrop(&cr.data, v.dims, b, -1.0).unwrap();
        for (i, (a, o)) in back.iter().zip(&v.data).enumerate() {
            let (r, c) = ((i % 120) / 12, i % 12);
            if r < 5 && c >= 7 {
                assert_eq!(a, o);
            } else {
                assert_eq!(*a, -1.0);
            }
        }
    }

    #[test]
    fn full_image_box_is_identity() {
        let v = vol(Dims::new(1, 16, 16), |_, r, c| (r * 16 + c) as f32);
        assert_eq!(crop(&v, CropBox::new(8, 8, 16).unwrap()).data, v.data);
    }

    #[test]
    fn stacking_replicates_edges() {
        let v = vol(Dims::new(3, 2, 2), |s, _, _| s as f32);
        let t = stack_neighbors(&v, 0).unwrap();
        assert_eq!(t.data(), &[0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 1., 1.]);
        let t = stack_neighbors(&v, 2).unwrap();
        assert_eq!(&t.data()[..4], &[1., 1., 1., 1.]);
        assert_eq!(&t.data()[8..], &[2., 2., 2., 2.]);
        assert!(stack_neighbors(&v, 3).is_err());
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let img = Plane::new(16, 16, (0..256).map(|i| i as f32).collect()).unwrap();
        let lbl = Plane::new(16, 16, (0..256).map(|i| (i % 4) as u8).collect()).unwrap();
        let a = augment(&img, &lbl, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&img, &lbl, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = Plane::new(5, 7, (0..35).map(|i| i as f32).collect()).unwrap();
        assert_eq!(img.rotate_bilinear(0.0), img);
        assert_eq!(img.rotate_nearest(0.0), img);
    }
}
