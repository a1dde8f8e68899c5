//! Slow, obviously-correct reference implementations.

#![allow(dead_code)]

use std::collections::VecDeque;

use sk_unet::metrics::Point;
use sk_unet::postprocess::Connectivity;
use sk_unet::volume::Dims;

fn neighbours(conn: Connectivity) -> Vec<(i64, i64, i64)> {
    let mut out = Vec::new();
    for ds in -1i64..=1 {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let n = [ds, dr, dc].iter().filter(|d| **d != 0).count();
                let ok = match conn {
                    Connectivity::Four => ds == 0 && n == 1,
                    Connectivity::Eight => ds == 0 && n >= 1,
                    Connectivity::Six => n == 1,
                    Connectivity::TwentySix => n >= 1,
                };
                if ok {
                    out.push((ds, dr, dc));
                }
            }
        }
    }
    out
}

/// Breadth-first labelling; components are numbered from 1 in raster order
/// of their first voxel.
pub fn bfs_components(mask: &[bool], dims: Dims, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let offs = neighbours(conn);
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let (ns, nr, nc) = (dims.slices as i64, dims.rows as i64, dims.cols as i64);
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len() as u32;
        labels[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize - 1] += 1;
            let (s, r, c) = ((i / dims.plane()) as i64, ((i % dims.plane()) / dims.cols) as i64, (i % dims.cols) as i64);
            for (ds, dr, dc) in &offs {
                let (a, b, d) = (s + ds, r + dr, c + dc);
                if a < 0 || b < 0 || d < 0 || a >= ns || b >= nr || d >= nc {
                    continue;
                }
                let j = dims.index(a as usize, b as usize, d as usize);
                if mask[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, sizes)
}

/// Flood fill of the background from the border; unreached background
/// pixels are holes.
pub fn flood_fill_holes(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    let mut outside = vec![false; mask.len()];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if (r == 0 || c == 0 || r + 1 == rows || c + 1 == cols) && !mask[r * cols + c] {
                outside[r * cols + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let cand = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (a, b) in cand {
            if a < rows && b < cols && !mask[a * cols + b] && !outside[a * cols + b] {
                outside[a * cols + b] = true;
                stack.push((a, b));
            }
        }
    }
    mask.iter().zip(&outside).map(|(m, o)| *m || !o).collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

fn directed(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

pub fn brute_hausdorff(a: &[Point], b: &[Point]) -> f64 {
    directed(a, b).into_iter().chain(directed(b, a)).fold(0.0, f64::max)
}

pub fn brute_assd(a: &[Point], b: &[Point]) -> f64 {
    let (x, y) = (directed(a, b), directed(b, a));
    x.iter().chain(&y).sum::<f64>() / (x.len() + y.len()) as f64
}

/// Unordered `|a ∩ b|`, `|a|`, `|b|` for masks.
pub fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    (i, a.iter().filter(|x| **x).count(), b.iter().filter(|x| **x).count())
}
