//! Hole filling, connected components and the per-patient largest
//! component constraint.

use crate::volume::{Dims, LabelVolume, LV};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    /// In-slice edge neighbours.
    Four,
    /// In-slice edge and corner neighbours.
    Eight,
    /// Face neighbours in 3-D.
    Six,
    /// Face, edge and corner neighbours in 3-D.
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets `(ds, dr, dc)` that precede the center in raster order.
    fn backward_offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for ds in -1i64..=0 {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if (ds, dr, dc) >= (0, 0, 0) {
                        continue;
                    }
                    let nonzero = (ds != 0) as u8 + (dr != 0) as u8 + (dc != 0) as u8;
                    let keep = match self {
                        Connectivity::Four => ds == 0 && nonzero == 1,
                        Connectivity::Eight => ds == 0,
                        Connectivity::Six => nonzero == 1,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push((ds, dr, dc));
                    }
                }
            }
        }
        out
    }
}

/// Component labelling: `labels[i]` is 0 for background, else `1..=count`,
/// numbered in raster order of each component's first voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Id of the largest component; ties go to the lower id.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (k, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, k as u32 + 1));
            }
        }
        best.map(|(_, id)| id)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling of `mask` (`dims` layout). 2-D
/// connectivities never link voxels across slices.
pub fn connected_components(mask: &[bool], dims: Dims, conn: Connectivity) -> Components {
    assert_eq!(mask.len(), dims.len(), "mask does not match dims");
    let offsets = conn.backward_offsets();
    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    let (ns, nr, nc) = (dims.slices as i64, dims.rows as i64, dims.cols as i64);
    for s in 0..ns {
        for r in 0..nr {
            for c in 0..nc {
                let i = dims.index(s as usize, r as usize, c as usize);
                if !mask[i] {
                    continue;
                }
                let mut label = 0u32;
                for &(ds, dr, dc) in &offsets {
                    let (ss, rr, cc) = (s + ds, r + dr, c + dc);
                    if ss < 0 || rr < 0 || cc < 0 || rr >= nr || cc >= nc {
                        continue;
                    }
                    let n = provisional[dims.index(ss as usize, rr as usize, cc as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = n;
                    } else {
                        union(&mut parent, label, n);
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = provisional;
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *l = remap[root];
        sizes[*l as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Background pixels not 4-connected to the border through background
/// become foreground.
pub fn fill_holes_2d(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    holes_2d(mask, rows, cols)
        .iter()
        .zip(mask)
        .map(|(h, m)| *h || *m)
        .collect()
}

/// Enclosed background pixels of a 2-D mask.
fn holes_2d(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    let bg: Vec<bool> = mask.iter().map(|m| !m).collect();
    let cc = connected_components(&bg, Dims::new(1, rows, cols), Connectivity::Four);
    let mut touches = vec![false; cc.count() + 1];
    for r in 0..rows {
        for c in 0..cols {
            if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                touches[cc.labels[r * cols + c] as usize] = true;
            }
        }
    }
    cc.labels
        .iter()
        .map(|&l| l != 0 && !touches[l as usize])
        .collect()
}

/// Label for a filled hole given the labels of its adjacent foreground:
/// LV when every neighbour is LV or LVM, else the most frequent neighbour
/// label (ties to the lowest).
fn hole_label(neighbour_counts: &[usize; 4]) -> u8 {
    let fg: usize = neighbour_counts[1..].iter().sum();
    if fg > 0 && neighbour_counts[3] == 0 {
        return LV;
    }
    let mut best = 1;
    for k in 2..4 {
        if neighbour_counts[k] > neighbour_counts[best] {
            best = k;
        }
    }
    best as u8
}

/// Removes all foreground outside the largest 26-connected component of the
/// union of classes 1..=3, then fills in-slice holes of that union. Returns
/// the result and `true` when the input had no foreground (returned as is).
pub fn largest_cc_constraint(lv: &LabelVolume) -> (LabelVolume, bool) {
    let dims = lv.dims;
    let fg: Vec<bool> = lv.labels.iter().map(|l| *l != 0).collect();
    let cc = connected_components(&fg, dims, Connectivity::TwentySix);
    let Some(keep) = cc.largest() else {
        return (lv.clone(), true);
    };
    let mut labels: Vec<u8> = lv
        .labels
        .iter()
        .zip(&cc.labels)
        .map(|(&l, &c)| if c == keep { l } else { 0 })
        .collect();
    let (rows, cols) = (dims.rows, dims.cols);
    let plane = dims.plane();
    for s in 0..dims.slices {
        let sl = &mut labels[s * plane..(s + 1) * plane];
        let mask: Vec<bool> = sl.iter().map(|l| *l != 0).collect();
        let holes = holes_2d(&mask, rows, cols);
        if !holes.iter().any(|h| *h) {
            continue;
        }
        let hc = connected_components(&holes, Dims::new(1, rows, cols), Connectivity::Four);
        let mut counts = vec![[0usize; 4]; hc.count() + 1];
        for r in 0..rows {
            for c in 0..cols {
                let h = hc.labels[r * cols + c] as usize;
                if h == 0 {
                    continue;
                }
                let nbrs = [
                    (r > 0).then(|| (r - 1, c)),
                    (r + 1 < rows).then(|| (r + 1, c)),
                    (c > 0).then(|| (r, c - 1)),
                    (c + 1 < cols).then(|| (r, c + 1)),
                ];
                for (nr, nc) in nbrs.into_iter().flatten() {
                    let l = sl[nr * cols + nc];
                    if l != 0 {
                        counts[h][l as usize] += 1;
                    }
                }
            }
        }
        for (i, &h) in hc.labels.iter().enumerate() {
            if h != 0 {
                sl[i] = hole_label(&counts[h as usize]);
            }
        }
    }
    let out = LabelVolume {
        labels,
        ..lv.clone()
    };
    (out, false)
}

/// Number of 26-connected foreground components.
pub fn foreground_components(lv: &LabelVolume) -> usize {
    let fg: Vec<bool> = lv.labels.iter().map(|l| *l != 0).collect();
    connected_components(&fg, lv.dims, Connectivity::TwentySix).count()
}
