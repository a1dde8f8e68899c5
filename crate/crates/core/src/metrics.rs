//! Overlap and surface-distance metrics, per-patient reports and their
//! aggregation into a mean ± std table.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, LV, LVM, RV};

pub fn overlap_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, p, g))
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Surface {
    LvEndo,
    LvEpi,
    RvEndo,
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::LvEndo, Surface::LvEpi, Surface::RvEndo];

    pub fn name(self) -> &'static str {
        match self {
            Surface::LvEndo => "lv_endo",
            Surface::LvEpi => "lv_epi",
            Surface::RvEndo => "rv_endo",
        }
    }

    fn classes(self) -> &'static [u8] {
        match self {
            Surface::LvEndo => &[LV],
            Surface::LvEpi => &[LV, LVM],
            Surface::RvEndo => &[RV],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Class {
    Lv,
    Lvm,
    Rv,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Lv, Class::Lvm, Class::Rv];

    pub fn name(self) -> &'static str {
        match self {
            Class::Lv => "lv",
            Class::Lvm => "lvm",
            Class::Rv => "rv",
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Class::Lv => LV,
            Class::Lvm => LVM,
            Class::Rv => RV,
        }
    }
}

/// Boundary voxels of the region `classes`: region voxels with at least one
/// in-slice 4-neighbour outside the region (the image border counts as
/// outside). Coordinates are `(slice, row, col)` scaled to millimetres.
pub fn region_boundary(lv: &LabelVolume, classes: &[u8]) -> Vec<Point> {
    let d = lv.dims;
    let inside = |s: usize, r: i64, c: i64| {
        r >= 0
            && c >= 0
            && (r as usize) < d.rows
            && (c as usize) < d.cols
            && classes.contains(&lv.labels[d.index(s, r as usize, c as usize)])
    };
    let sp = lv.spacing;
    let mut pts = Vec::new();
    for s in 0..d.slices {
        for r in 0..d.rows as i64 {
            for c in 0..d.cols as i64 {
                if !inside(s, r, c) {
                    continue;
                }
                let edge = !inside(s, r - 1, c)
                    || !inside(s, r + 1, c)
                    || !inside(s, r, c - 1)
                    || !inside(s, r, c + 1);
                if edge {
                    pts.push([s as f64 * sp.slice, r as f64 * sp.row, c as f64 * sp.col]);
                }
            }
        }
    }
    pts
}

pub fn extract_surface(lv: &LabelVolume, surface: Surface) -> Vec<Point> {
    region_boundary(lv, surface.classes())
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// Static 3-D kd-tree for nearest-neighbour queries.
pub struct KdTree {
    points: Vec<Point>,
    /// Implicit tree over `points`: node `lo..hi` has its median at the middle.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut pts = points.to_vec();
        let mut axis = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axis, 0);
        Self { points: pts, axis }
    }

    fn build(pts: &mut [Point], axis: &mut [u8], depth: usize) {
        if pts.len() <= 1 {
            if let Some(a) = axis.first_mut() {
                *a = (depth % 3) as u8;
            }
            return;
        }
        // Split along the widest extent.
        let mut best = (0usize, -1.0f64);
        for k in 0..3 {
            let (lo, hi) = pts
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[k]), h.max(p[k])));
            if hi - lo > best.1 {
                best = (k, hi - lo);
            }
        }
        let k = best.0;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[k].total_cmp(&b[k]));
        axis[mid] = k as u8;
        let (left, right) = pts.split_at_mut(mid);
        let (al, ar) = axis.split_at_mut(mid);
        Self::build(left, al, depth + 1);
        Self::build(&mut right[1..], &mut ar[1..], depth + 1);
    }

    /// Squared distance from `q` to its nearest tree point.
    pub fn nearest2(&self, q: &Point) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &Point, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let k = self.axis[mid] as usize;
        let diff = q[k] - p[k];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if diff * diff <= *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

/// Distance from each point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter().map(|p| tree.nearest2(p).sqrt()).collect()
}

fn check_nonempty(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptySurface("missing prediction"));
    }
    if gt.is_empty() {
        return Err(Error::EmptySurface("missing ground truth"));
    }
    Ok(())
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_nonempty(pred, gt)?;
    let a = directed_distances(pred, gt);
    let b = directed_distances(gt, pred);
    Ok(a.iter().chain(&b).copied().fold(0.0, f64::max))
}

/// Average symmetric surface distance; sums run over `pred` then `gt`.
pub fn assd(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_nonempty(pred, gt)?;
    let a = directed_distances(pred, gt);
    let b = directed_distances(gt, pred);
    let total: f64 = a.iter().chain(&b).sum();
    Ok(total / (a.len() + b.len()) as f64)
}

/// Linear-interpolated percentile of `v` (`q` in `[0, 100]`).
fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 95th-percentile Hausdorff: the larger of the two directed 95th percentiles.
pub fn hausdorff95(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_nonempty(pred, gt)?;
    Ok(percentile(directed_distances(pred, gt), 95.0)
        .max(percentile(directed_distances(gt, pred), 95.0)))
}

/// Metrics of one patient. Distances are NaN when exactly one surface is
/// empty and 0 when both are.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientReport {
    pub patient_id: String,
    /// Indexed by [`Class::ALL`].
    pub dice: [f64; 3],
    pub jaccard: [f64; 3],
    /// Indexed by [`Surface::ALL`].
    pub hausdorff: [f64; 3],
    pub assd: [f64; 3],
    pub hd95: [f64; 3],
}

fn surface_metrics(pred: &[Point], gt: &[Point]) -> Result<(f64, f64, f64)> {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => Ok((0.0, 0.0, 0.0)),
        (false, false) => Ok((
            hausdorff(pred, gt)?,
            assd(pred, gt)?,
            hausdorff95(pred, gt)?,
        )),
        _ => Ok((f64::NAN, f64::NAN, f64::NAN)),
    }
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<PatientReport> {
    if pred.dims != gt.dims {
        return Err(Error::Invalid(format!(
            "{}: prediction dims {:?} differ from ground truth {:?}",
            gt.patient_id, pred.dims, gt.dims
        )));
    }
    let (a, b) = (pred.spacing, gt.spacing);
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0);
    if !(close(a.row, b.row) && close(a.col, b.col) && close(a.slice, b.slice)) {
        return Err(Error::Invalid(format!(
            "{}: prediction spacing {a:?} differs from ground truth {b:?}",
            gt.patient_id
        )));
    }
    let mut r = PatientReport {
        patient_id: gt.patient_id.clone(),
        dice: [0.0; 3],
        jaccard: [0.0; 3],
        hausdorff: [0.0; 3],
        assd: [0.0; 3],
        hd95: [0.0; 3],
    };
    for (i, c) in Class::ALL.iter().enumerate() {
        let (p, g) = (pred.mask(&[c.label()]), gt.mask(&[c.label()]));
        r.dice[i] = dice(&p, &g)?;
        r.jaccard[i] = jaccard(&p, &g)?;
    }
    for (i, s) in Surface::ALL.iter().enumerate() {
        let (h, d, h95) = surface_metrics(&extract_surface(pred, *s), &extract_surface(gt, *s))?;
        r.hausdorff[i] = h;
        r.assd[i] = d;
        r.hd95[i] = h95;
    }
    Ok(r)
}

/// Mean and sample standard deviation over finite values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn stat(values: impl IntoIterator<Item = f64>) -> Stat {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    let n = v.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
            count: 0,
        };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat {
        mean,
        std,
        count: n,
    }
}

/// Column-wise mean ± std across patients.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub patients: usize,
    pub dice: [Stat; 3],
    pub jaccard: [Stat; 3],
    pub hausdorff: [Stat; 3],
    pub assd: [Stat; 3],
    pub hd95: [Stat; 3],
}

pub fn aggregate(reports: &[PatientReport]) -> Summary {
    let col = |f: &dyn Fn(&PatientReport) -> [f64; 3]| -> [Stat; 3] {
        std::array::from_fn(|i| stat(reports.iter().map(|r| f(r)[i])))
    };
    Summary {
        patients: reports.len(),
        dice: col(&|r| r.dice),
        jaccard: col(&|r| r.jaccard),
        hausdorff: col(&|r| r.hausdorff),
        assd: col(&|r| r.assd),
        hd95: col(&|r| r.hd95),
    }
}

pub const CSV_HEADER: &str = "patient_id,class_or_surface,metric,value";

fn csv_rows(out: &mut String, id: &str, overlap: [[f64; 3]; 2], dist: [[f64; 3]; 2]) {
    for (i, c) in Class::ALL.iter().enumerate() {
        let _ = writeln!(out, "{id},{},dice,{}", c.name(), overlap[0][i]);
        let _ = writeln!(out, "{id},{},jaccard,{}", c.name(), overlap[1][i]);
    }
    for (i, s) in Surface::ALL.iter().enumerate() {
        let _ = writeln!(out, "{id},{},hausdorff_mm,{}", s.name(), dist[0][i]);
        let _ = writeln!(out, "{id},{},assd_mm,{}", s.name(), dist[1][i]);
    }
}

/// Twelve rows per patient followed by `mean` and `std` aggregate rows.
pub fn render_csv(reports: &[PatientReport], summary: &Summary) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        csv_rows(&mut out, &r.patient_id, [r.dice, r.jaccard], [r.hausdorff, r.assd]);
    }
    let pick = |s: &[Stat; 3], f: fn(&Stat) -> f64| [f(&s[0]), f(&s[1]), f(&s[2])];
    for (id, f) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
        csv_rows(
            &mut out,
            id,
            [pick(&summary.dice, f), pick(&summary.jaccard, f)],
            [pick(&summary.hausdorff, f), pick(&summary.assd, f)],
        );
    }
    out
}

pub fn write_csv(path: &Path, reports: &[PatientReport], summary: &Summary) -> Result<()> {
    std::fs::write(path, render_csv(reports, summary)).map_err(|e| Error::io(path, e))
}

/// Mean ± standard deviation table: overlap rows per class, distance rows
/// per surface.
pub fn render_table(summary: &Summary) -> String {
    let cell = |s: &Stat, prec: usize| {
        if s.count == 0 {
            "n/a".to_string()
        } else {
            format!("{:.p$} ± {:.p$}", s.mean, s.std, p = prec)
        }
    };
    let mut out = String::new();
    let _ = writeln!(out, "Mean ± standard deviation over {} patients", summary.patients);
    let _ = writeln!(
        out,
        "{:<26}{:>20}{:>20}{:>20}",
        "", "LV blood cavity", "LV myocardium", "RV blood"
    );
    for (name, row) in [("Dice score", &summary.dice), ("Jaccard index", &summary.jaccard)] {
        let _ = writeln!(
            out,
            "{name:<26}{:>20}{:>20}{:>20}",
            cell(&row[0], 3),
            cell(&row[1], 3),
            cell(&row[2], 3)
        );
    }
    let _ = writeln!(
        out,
        "{:<26}{:>20}{:>20}{:>20}",
        "", "LV endocardium", "LV epicardium", "RV endocardium"
    );
    for (name, row) in [
        ("Hausdorff distance (mm)", &summary.hausdorff),
        ("HD95 (mm)", &summary.hd95),
        ("Surface distance (mm)", &summary.assd),
    ] {
        let _ = writeln!(
            out,
            "{name:<26}{:>20}{:>20}{:>20}",
            cell(&row[0], 3),
            cell(&row[1], 3),
            cell(&row[2], 3)
        );
    }
    out
}
