//! SLIC superpixels over a per-pixel 3-vector feature image.

use std::collections::VecDeque;

use crate::decomposition::to_db;
use crate::error::{invalid, Result};
use crate::polsar::PolSARImage;

/// Per-pixel superpixel ids with derived centres and sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub count: usize,
    /// Mean `(row, col)` of each superpixel, measured at pixel centres.
    pub centers: Vec<(f64, f64)>,
    pub sizes: Vec<usize>,
}

impl SuperpixelMap {
    /// Requires ids dense in `0..count`.
    pub fn from_ids(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return invalid(format!("{} superpixel ids for a {height}x{width} image", ids.len()));
        }
        let count = ids.iter().max().map_or(0, |&m| m as usize + 1);
        let mut sizes = vec![0usize; count];
        let mut sums = vec![(0.0, 0.0); count];
        for (p, &id) in ids.iter().enumerate() {
            sizes[id as usize] += 1;
            sums[id as usize].0 += (p / width) as f64 + 0.5;
            sums[id as usize].1 += (p % width) as f64 + 0.5;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return invalid(format!("superpixel id {empty} is unused; ids must be dense"));
        }
        let centers = sums.iter().zip(&sizes).map(|(&(r, c), &n)| (r / n as f64, c / n as f64)).collect();
        Ok(Self { height, width, ids, count, centers, sizes })
    }

    /// Pixel indices of each superpixel, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (p, &id) in self.ids.iter().enumerate() {
            out[id as usize].push(p);
        }
        out
    }
}

/// `round(h * w / 900)`, at least 1: superpixels of roughly 30x30 pixels.
pub fn default_k(height: usize, width: usize) -> usize {
    (((height * width) as f64 / 900.0).round() as usize).max(1)
}

/// Pauli powers `(T11, T22, T33)` in dB, z-scored per channel.
pub fn slic_features(img: &PolSARImage) -> Vec<[f64; 3]> {
    let mut f: Vec<[f64; 3]> = img.pixels.iter().map(|t| [to_db(t.m11), to_db(t.m22), to_db(t.m33)]).collect();
    let n = f.len().max(1) as f64;
    for ch in 0..3 {
        let mean = f.iter().map(|v| v[ch]).sum::<f64>() / n;
        let std = (f.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n).sqrt();
        let std = if std > 1e-12 { std } else { 1.0 };
        f.iter_mut().for_each(|v| v[ch] = (v[ch] - mean) / std);
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub k: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl SlicParams {
    pub fn new(k: usize) -> Self {
        Self { k, compactness: 10.0, iters: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub y: f64,
    pub x: f64,
    pub f: [f64; 3],
}

/// Rows and columns of the initial grid: near `h/S x w/S`, with the product
/// closest to `k`, then the squarest cells.
fn grid_shape(height: usize, width: usize, k: usize, step: f64) -> (usize, usize) {
    let around = |len: usize| {
        let x = len as f64 / step;
        let lo = (x.floor() as usize).saturating_sub(1).max(1);
        let hi = (x.ceil() as usize + 1).min(len);
        lo..=hi.max(lo)
    };
    let mut best = (usize::MAX, f64::INFINITY, 1, 1);
    for ny in around(height) {
        for nx in around(width) {
            let miss = (ny * nx).abs_diff(k);
            let aspect = ((height as f64 / ny as f64) / (width as f64 / nx as f64)).ln().abs();
            if miss < best.0 || (miss == best.0 && aspect < best.1 - 1e-12) {
                best = (miss, aspect, ny, nx);
            }
        }
    }
    (best.2, best.3)
}

/// Clustering state between iterations. Distances are squared:
/// `D^2 = |f_p - f_c|^2 + (m / S)^2 |x_p - x_c|^2`, which is what the
/// mean-update step minimises.
#[derive(Debug, Clone)]
pub struct SlicState<'a> {
    features: &'a [[f64; 3]],
    height: usize,
    width: usize,
    step: f64,
    spatial_weight: f64,
    pub centers: Vec<Center>,
    pub labels: Vec<u32>,
}

impl<'a> SlicState<'a> {
    /// Grid initialisation: about `h/S x w/S` centres placed at cell
    /// midpoints, each moved to the lowest-gradient pixel of its 3x3
    /// neighbourhood when that is strictly lower than the start pixel. Labels
    /// start as the grid cells.
    pub fn new(features: &'a [[f64; 3]], height: usize, width: usize, params: &SlicParams) -> Result<Self> {
        let n = height * width;
        if features.len() != n || n == 0 {
            return invalid(format!("{} feature vectors for a {height}x{width} image", features.len()));
        }
        if params.k == 0 || params.k > n {
            return invalid(format!("superpixel count {} must be in 1..={n}", params.k));
        }
        if !params.compactness.is_finite() || params.compactness < 0.0 {
            return invalid("compactness must be a finite non-negative number");
        }
        if features.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return invalid("SLIC features contain non-finite values");
        }
        let step = (n as f64 / params.k as f64).sqrt();
        let (ny, nx) = grid_shape(height, width, params.k, step);
        let grad = |r: usize, c: usize| {
            let at = |r: usize, c: usize| &features[r * width + c];
            let d = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            d(at((r + 1).min(height - 1), c), at(r.saturating_sub(1), c))
                + d(at(r, (c + 1).min(width - 1)), at(r, c.saturating_sub(1)))
        };
        let mut centers = Vec::with_capacity(ny * nx);
        for i in 0..ny {
            for j in 0..nx {
                let y = (i as f64 + 0.5) * height as f64 / ny as f64;
                let x = (j as f64 + 0.5) * width as f64 / nx as f64;
                let (r0, c0) = ((y as usize).min(height - 1), (x as usize).min(width - 1));
                let mut best = (grad(r0, c0), r0, c0);
                for r in r0.saturating_sub(1)..=(r0 + 1).min(height - 1) {
                    for c in c0.saturating_sub(1)..=(c0 + 1).min(width - 1) {
                        let g = grad(r, c);
                        if g < best.0 {
                            best = (g, r, c);
                        }
                    }
                }
                let (_, r, c) = best;
                let (y, x) = if (r, c) == (r0, c0) { (y, x) } else { (r as f64 + 0.5, c as f64 + 0.5) };
                centers.push(Center { y, x, f: features[r * width + c] });
            }
        }
        let labels =
            (0..n).map(|p| (((p / width) * ny / height) * nx + (p % width) * nx / width) as u32).collect();
        let spatial_weight = (params.compactness / step).powi(2);
        Ok(Self { features, height, width, step, spatial_weight, centers, labels })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn distance(&self, pixel: usize, center: usize) -> f64 {
        let c = &self.centers[center];
        let f = &self.features[pixel];
        let df: f64 = f.iter().zip(&c.f).map(|(a, b)| (a - b).powi(2)).sum();
        let dy = (pixel / self.width) as f64 + 0.5 - c.y;
        let dx = (pixel % self.width) as f64 + 0.5 - c.x;
        df + self.spatial_weight * (dy * dy + dx * dx)
    }

    /// Sum of squared distances from every pixel to its centre.
    pub fn energy(&self) -> f64 {
        self.labels.iter().enumerate().map(|(p, &l)| self.distance(p, l as usize)).sum()
    }

    /// Moves each pixel to the nearest centre whose `2S x 2S` window covers
    /// it, keeping its current centre as a candidate; ties go to the lower id.
    /// Returns the number of changed labels.
    pub fn assign(&mut self) -> usize {
        let mut best: Vec<(f64, u32)> =
            self.labels.iter().enumerate().map(|(p, &l)| (self.distance(p, l as usize), l)).collect();
        let s = self.step;
        for k in 0..self.centers.len() {
            let c = self.centers[k];
            let r_lo = (c.y - s - 0.5).ceil().max(0.0) as usize;
            let r_hi = ((c.y + s - 0.5).floor() as isize).min(self.height as isize - 1);
            let c_lo = (c.x - s - 0.5).ceil().max(0.0) as usize;
            let c_hi = ((c.x + s - 0.5).floor() as isize).min(self.width as isize - 1);
            if r_hi < 0 || c_hi < 0 {
                continue;
            }
            for r in r_lo..=r_hi as usize {
                for col in c_lo..=c_hi as usize {
                    let p = r * self.width + col;
                    let d = self.distance(p, k);
                    let b = &mut best[p];
                    if d < b.0 || (d == b.0 && (k as u32) < b.1) {
                        *b = (d, k as u32);
                    }
                }
            }
        }
        let mut changed = 0;
        for (l, (_, b)) in self.labels.iter_mut().zip(best) {
            if *l != b {
                *l = b;
                changed += 1;
            }
        }
        changed
    }

    /// Centres move to the mean position and feature of their members;
    /// empty clusters keep their previous centre.
    pub fn update(&mut self) {
        let k = self.centers.len();
        let mut acc = vec![[0.0f64; 5]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in self.labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            a[0] += (p / self.width) as f64 + 0.5;
            a[1] += (p % self.width) as f64 + 0.5;
            for ch in 0..3 {
                a[2 + ch] += self.features[p][ch];
            }
            counts[l as usize] += 1;
        }
        for ((c, a), &n) in self.centers.iter_mut().zip(&acc).zip(&counts) {
            if n > 0 {
                let n = n as f64;
                *c = Center { y: a[0] / n, x: a[1] / n, f: [a[2] / n, a[3] / n, a[4] / n] };
            }
        }
    }
}

/// Splits every label into 4-connected components. Components smaller than
/// a quarter of `mean_size` merge into their largest 4-adjacent neighbour,
/// every other component gets its own id, and ids are renumbered by first
/// appearance in raster order.
pub fn enforce_connectivity(labels: &[u32], height: usize, width: usize, mean_size: f64) -> Vec<u32> {
    let n = height * width;
    let mut comp = vec![usize::MAX; n];
    let mut pixels: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = pixels.len();
        let mut members = Vec::new();
        comp[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            for q in neighbours(p, height, width).into_iter().flatten() {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        pixels.push(members);
    }
    let threshold = mean_size / 4.0;
    let mut parent: Vec<usize> = (0..pixels.len()).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }
    for c in 0..pixels.len() {
        if parent[c] != c || (pixels[c].len() as f64) >= threshold {
            continue;
        }
        let mut target: Option<(usize, usize)> = None;
        for &p in &pixels[c] {
            for q in neighbours(p, height, width).into_iter().flatten() {
                let r = find(&mut parent, comp[q]);
                if r == c {
                    continue;
                }
                let size = pixels[r].len();
                if target.is_none_or(|(s, t)| size > s || (size == s && r < t)) {
                    target = Some((size, r));
                }
            }
        }
        if let Some((_, t)) = target {
            parent[c] = t;
            let moved = std::mem::take(&mut pixels[c]);
            pixels[t].extend(moved);
        }
    }
    let mut new_id = vec![u32::MAX; pixels.len()];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for p in 0..n {
        let r = find(&mut parent, comp[p]);
        if new_id[r] == u32::MAX {
            new_id[r] = next;
            next += 1;
        }
        out[p] = new_id[r];
    }
    out
}

fn neighbours(p: usize, height: usize, width: usize) -> [Option<usize>; 4] {
    let (r, c) = (p / width, p % width);
    [
        (r > 0).then(|| p - width),
        (r + 1 < height).then(|| p + width),
        (c > 0).then(|| p - 1),
        (c + 1 < width).then(|| p + 1),
    ]
}

/// Full SLIC: grid initialisation, `iters` rounds of assignment and update
/// (stopping early once no label changes), then connectivity enforcement.
pub fn slic(features: &[[f64; 3]], height: usize, width: usize, params: &SlicParams) -> Result<SuperpixelMap> {
    let mut state = SlicState::new(features, height, width, params)?;
    for _ in 0..params.iters {
        if state.assign() == 0 {
            break;
        }
        state.update();
    }
    let mean_size = (height * width) as f64 / state.centers.len() as f64;
    let ids = enforce_connectivity(&state.labels, height, width, mean_size);
    SuperpixelMap::from_ids(height, width, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_k_examples() {
        assert_eq!(default_k(750, 1024), 853);
        assert_eq!(default_k(1200, 1300), 1733);
        assert_eq!(default_k(30, 30), 1);
        assert_eq!(default_k(2, 2), 1);
    }

    #[test]
    fn constant_image_gives_quadrants() {
        let f = vec![[0.25, -1.0, 2.0]; 3600];
        let map = slic(&f, 60, 60, &SlicParams::new(4)).unwrap();
        assert_eq!(map.count, 4);
        for p in 0..3600 {
            let (r, c) = (p / 60, p % 60);
            let q = (r / 30) * 2 + c / 30;
            assert_eq!(map.ids[p], q as u32);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let f = vec![[0.0; 3]; 4];
        assert!(slic(&f, 2, 2, &SlicParams::new(5)).is_err());
        assert!(slic(&f, 2, 2, &SlicParams::new(0)).is_err());
    }

    #[test]
    fn fragments_are_split_or_merged() {
        // Label 0 appears in two separate large blocks and one single pixel.
        #[rustfmt::skip]
        let labels = vec![
            0, 0, 1, 1, 0, 0,
            0, 0, 1, 1, 0, 0,
            1, 1, 1, 0, 1, 1,
        ];
        let out = enforce_connectivity(&labels, 3, 6, 6.0);
        #[rustfmt::skip]
        let expected = vec![
            0, 0, 1, 1, 2, 2,
            0, 0, 1, 1, 2, 2,
            1, 1, 1, 1, 3, 3,
        ];
        assert_eq!(out, expected);
    }

    #[test]
    fn from_ids_rejects_gaps() {
        assert!(SuperpixelMap::from_ids(1, 3, vec![0, 2, 2]).is_err());
        let m = SuperpixelMap::from_ids(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(m.sizes, vec![1, 2]);
        assert_eq!(m.centers[1], (0.5, 1.5));
    }
}
