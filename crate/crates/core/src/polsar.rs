//! Scattering, covariance and coherency matrices, plus raster utilities:
//! boxcar speckle filtering, patch extraction and complex-Wishart synthesis.

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

const SQRT2: f64 = std::f64::consts::SQRT_2;
/// Relative tolerance for the PSD check: `lambda_min >= -PSD_TOL * trace`.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringMatrix {
    pub shh: C64,
    pub shv: C64,
    pub svh: C64,
    pub svv: C64,
}

impl ScatteringMatrix {
    /// Monostatic matrix with `svh = shv`.
    pub fn monostatic(shh: C64, shv: C64, svv: C64) -> Self {
        Self { shh, shv, svh: shv, svv }
    }

    pub fn is_reciprocal(&self, tol: f64) -> bool {
        (self.shv - self.svh).norm() <= tol
    }

    pub fn span(&self) -> f64 {
        self.shh.norm_sqr() + 2.0 * self.shv.norm_sqr() + self.svv.norm_sqr()
    }

    /// Cross-pol channel used by both target vectors. Logs when the matrix
    /// is not reciprocal and averages the two cross terms.
    fn cross(&self) -> C64 {
        if !self.is_reciprocal(1e-9) {
            log::warn!("scattering matrix is not reciprocal: |shv - svh| = {:e}", (self.shv - self.svh).norm());
        }
        (self.shv + self.svh) * 0.5
    }
}

/// 3x3 Hermitian matrix stored as its upper triangle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hermitian3 {
    pub m11: f64,
    pub m22: f64,
    pub m33: f64,
    pub m12: C64,
    pub m13: C64,
    pub m23: C64,
}

/// Eigenvalues in descending order and matching unit eigenvectors.
#[derive(Debug, Clone, Copy)]
pub struct Eigen3 {
    pub values: [f64; 3],
    pub vectors: [[C64; 3]; 3],
}

impl Hermitian3 {
    pub const ZERO: Hermitian3 = Hermitian3 {
        m11: 0.0,
        m22: 0.0,
        m33: 0.0,
        m12: C64::new(0.0, 0.0),
        m13: C64::new(0.0, 0.0),
        m23: C64::new(0.0, 0.0),
    };

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self { m11: a, m22: b, m33: c, ..Self::ZERO }
    }

    /// `v v^H`.
    pub fn outer(v: [C64; 3]) -> Self {
        Self {
            m11: v[0].norm_sqr(),
            m22: v[1].norm_sqr(),
            m33: v[2].norm_sqr(),
            m12: v[0] * v[1].conj(),
            m13: v[0] * v[2].conj(),
            m23: v[1] * v[2].conj(),
        }
    }

    /// Canonical order `[m11, m22, m33, Re m12, Im m12, Re m13, Im m13, Re m23, Im m23]`.
    pub fn to_reals(&self) -> [f64; 9] {
        [
            self.m11, self.m22, self.m33, self.m12.re, self.m12.im, self.m13.re, self.m13.im, self.m23.re, self.m23.im,
        ]
    }

    pub fn from_reals(r: &[f64; 9]) -> Self {
        Self {
            m11: r[0],
            m22: r[1],
            m33: r[2],
            m12: C64::new(r[3], r[4]),
            m13: C64::new(r[5], r[6]),
            m23: C64::new(r[7], r[8]),
        }
    }

    pub fn full(&self) -> [[C64; 3]; 3] {
        let re = |x: f64| C64::new(x, 0.0);
        [
            [re(self.m11), self.m12, self.m13],
            [self.m12.conj(), re(self.m22), self.m23],
            [self.m13.conj(), self.m23.conj(), re(self.m33)],
        ]
    }

    /// Takes the upper triangle and the real part of the diagonal.
    pub fn from_full(m: &[[C64; 3]; 3]) -> Self {
        Self { m11: m[0][0].re, m22: m[1][1].re, m33: m[2][2].re, m12: m[0][1], m13: m[0][2], m23: m[1][2] }
    }

    pub fn trace(&self) -> f64 {
        self.m11 + self.m22 + self.m33
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            m11: self.m11 * s,
            m22: self.m22 * s,
            m33: self.m33 * s,
            m12: self.m12 * s,
            m13: self.m13 * s,
            m23: self.m23 * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            m11: self.m11 + o.m11,
            m22: self.m22 + o.m22,
            m33: self.m33 + o.m33,
            m12: self.m12 + o.m12,
            m13: self.m13 + o.m13,
            m23: self.m23 + o.m23,
        }
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        self.to_reals().iter().zip(o.to_reals()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn eigen(&self) -> Eigen3 {
        let f = self.full();
        let m = Matrix3::from_fn(|r, c| f[r][c]);
        let e = m.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        let mut values = [0.0; 3];
        let mut vectors = [[C64::new(0.0, 0.0); 3]; 3];
        for (slot, &i) in order.iter().enumerate() {
            values[slot] = e.eigenvalues[i];
            for r in 0..3 {
                vectors[slot][r] = e.eigenvectors[(r, i)];
            }
        }
        Eigen3 { values, vectors }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().values[2]
    }

    pub fn is_psd(&self) -> bool {
        self.check_psd().is_ok()
    }

    pub fn check_psd(&self) -> Result<()> {
        let trace = self.trace();
        if !self.to_reals().iter().all(|x| x.is_finite()) {
            return invalid("matrix has non-finite entries");
        }
        let min_eig = self.min_eigenvalue();
        if trace < 0.0 || min_eig < -PSD_TOL * trace.abs() - f64::MIN_POSITIVE {
            return Err(Error::NotPsd { min_eig, trace });
        }
        Ok(())
    }

    /// Numerical rank: eigenvalues above `rel_tol * trace`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let t = self.trace();
        self.eigen().values.iter().filter(|&&v| v > rel_tol * t).count()
    }

    /// Lower-triangular `L` with `L L^H = self`. Zero pivots (within a relative
    /// tolerance) give zero columns, so semidefinite matrices are accepted.
    pub fn cholesky(&self) -> Result<[[C64; 3]; 3]> {
        self.check_psd()?;
        let a = self.full();
        let tol = 1e-12 * self.trace().max(0.0);
        let mut l = [[C64::new(0.0, 0.0); 3]; 3];
        for j in 0..3 {
            let mut d = a[j][j].re;
            for k in 0..j {
                d -= l[j][k].norm_sqr();
            }
            if d <= tol {
                continue;
            }
            let ljj = d.sqrt();
            l[j][j] = C64::new(ljj, 0.0);
            for i in j + 1..3 {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k].conj();
                }
                l[i][j] = s / ljj;
            }
        }
        Ok(l)
    }
}

/// Pauli-basis second-order statistic `T`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoherencyMatrix(pub Hermitian3);

/// Lexicographic-basis second-order statistic `C`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CovarianceMatrix(pub Hermitian3);

impl std::ops::Deref for CoherencyMatrix {
    type Target = Hermitian3;
    fn deref(&self) -> &Hermitian3 {
        &self.0
    }
}

impl std::ops::Deref for CovarianceMatrix {
    type Target = Hermitian3;
    fn deref(&self) -> &Hermitian3 {
        &self.0
    }
}

/// `C = h h^H` with `h = [S_HH, sqrt2 S_HV, S_VV]`.
pub fn build_covariance(s: &ScatteringMatrix) -> CovarianceMatrix {
    CovarianceMatrix(Hermitian3::outer([s.shh, s.cross() * SQRT2, s.svv]))
}

/// `T = k k^H` with `k = [(S_HH + S_VV)/sqrt2, (S_HH - S_VV)/sqrt2, sqrt2 S_HV]`.
pub fn build_coherency(s: &ScatteringMatrix) -> CoherencyMatrix {
    CoherencyMatrix(Hermitian3::outer([(s.shh + s.svv) / SQRT2, (s.shh - s.svv) / SQRT2, s.cross() * SQRT2]))
}

/// Pauli-from-lexicographic change of basis: `k = A h`.
fn pauli_basis() -> [[C64; 3]; 3] {
    let r = |x: f64| C64::new(x / SQRT2, 0.0);
    [[r(1.0), r(0.0), r(1.0)], [r(1.0), r(0.0), r(-1.0)], [r(0.0), r(SQRT2), r(0.0)]]
}

fn mul3(a: &[[C64; 3]; 3], b: &[[C64; 3]; 3]) -> [[C64; 3]; 3] {
    let mut out = [[C64::new(0.0, 0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn adjoint(a: &[[C64; 3]; 3]) -> [[C64; 3]; 3] {
    let mut out = a.to_owned();
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[j][i].conj();
        }
    }
    out
}

/// `C = A^H T A`.
pub fn coherency_to_covariance(t: &CoherencyMatrix) -> Result<CovarianceMatrix> {
    t.check_psd()?;
    let a = pauli_basis();
    Ok(CovarianceMatrix(Hermitian3::from_full(&mul3(&mul3(&adjoint(&a), &t.full()), &a))))
}

/// `T = A C A^H`.
pub fn covariance_to_coherency(c: &CovarianceMatrix) -> Result<CoherencyMatrix> {
    c.check_psd()?;
    let a = pauli_basis();
    Ok(CoherencyMatrix(Hermitian3::from_full(&mul3(&mul3(&a, &c.full()), &adjoint(&a)))))
}

/// Raster of coherency matrices with an optional class map (0 = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct PolSARImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<CoherencyMatrix>,
    pub labels: Option<Vec<u16>>,
}

impl PolSARImage {
    pub fn new(height: usize, width: usize, pixels: Vec<CoherencyMatrix>) -> Result<Self> {
        if pixels.len() != height * width {
            return invalid(format!("{} pixels for a {height}x{width} image", pixels.len()));
        }
        Ok(Self { height, width, pixels, labels: None })
    }

    /// Attaches a class map whose ids must be dense `1..=C`.
    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.pixels.len() {
            return invalid(format!("{} labels for {} pixels", labels.len(), self.pixels.len()));
        }
        let c = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; c + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=c).find(|&i| !seen[i]) {
            return invalid(format!("label ids are not dense: class {missing} is absent"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &CoherencyMatrix {
        &self.pixels[row * self.width + col]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.iter().copied().max().unwrap_or(0) as usize)
    }
}

/// Reflects an index into `0..n` without repeating the edge sample.
pub fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Boxcar mean of `T` over a `window x window` neighbourhood with mirrored borders.
pub fn speckle_filter(img: &PolSARImage, window: usize) -> Result<PolSARImage> {
    if window == 0 || window % 2 == 0 {
        return invalid(format!("speckle window must be odd and positive, got {window}"));
    }
    if img.is_empty() {
        return invalid("cannot filter an empty image");
    }
    let (h, w) = (img.height, img.width);
    let r = (window / 2) as isize;
    let reals: Vec<[f64; 9]> = img.pixels.iter().map(|p| p.to_reals()).collect();
    let mut horiz = vec![[0.0; 9]; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc = &mut horiz[y * w + x];
            for dx in -r..=r {
                let src = &reals[y * w + mirror(x as isize + dx, w)];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
        }
    }
    let norm = 1.0 / (window * window) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 9];
            for dy in -r..=r {
                let src = &horiz[mirror(y as isize + dy, h) * w + x];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
            acc.iter_mut().for_each(|a| *a *= norm);
            out.push(CoherencyMatrix(Hermitian3::from_reals(&acc)));
        }
    }
    Ok(PolSARImage { height: h, width: w, pixels: out, labels: img.labels.clone() })
}

/// A `k x k x 9` block of canonical coherency reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub k: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.k + c) * 9 + ch]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.k, self.k, 9)
    }
}

/// Patch centred on `(row, col)` with mirrored borders.
pub fn extract_patch(img: &PolSARImage, row: usize, col: usize, k: usize) -> Result<Patch> {
    if k % 2 == 0 {
        return invalid(format!("patch size must be odd, got {k}"));
    }
    if row >= img.height || col >= img.width {
        return invalid(format!("patch centre ({row}, {col}) outside {}x{} image", img.height, img.width));
    }
    let r = (k / 2) as isize;
    let mut data = Vec::with_capacity(k * k * 9);
    for dy in -r..=r {
        let y = mirror(row as isize + dy, img.height);
        for dx in -r..=r {
            let x = mirror(col as isize + dx, img.width);
            data.extend_from_slice(&img.pixel(y, x).to_reals());
        }
    }
    Ok(Patch { k, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartClassSpec {
    pub class_id: u16,
    pub sigma: CoherencyMatrix,
    pub looks: u32,
}

impl WishartClassSpec {
    pub fn new(class_id: u16, sigma: Hermitian3, looks: u32) -> Self {
        Self { class_id, sigma: CoherencyMatrix(sigma), looks }
    }
}

/// Class ids `1..=n` drawn from a fixed set of scattering archetypes:
/// surface, double bounce, volume, then mixtures of them.
pub fn default_class_specs(n: usize, looks: u32) -> Vec<WishartClassSpec> {
    let c = |re: f64, im: f64| C64::new(re, im);
    let archetypes = [
        Hermitian3 { m11: 1.0, m22: 0.18, m33: 0.06, m12: c(0.12, 0.02), m13: c(0.0, 0.0), m23: c(0.0, 0.0) },
        Hermitian3 { m11: 0.35, m22: 0.9, m33: 0.1, m12: c(-0.05, 0.08), m13: c(0.0, 0.0), m23: c(0.02, 0.0) },
        Hermitian3 { m11: 0.5, m22: 0.42, m33: 0.36, m12: c(0.03, 0.0), m13: c(0.0, 0.0), m23: c(0.0, 0.0) },
        Hermitian3 { m11: 0.8, m22: 0.5, m33: 0.2, m12: c(0.2, 0.0), m13: c(0.0, 0.05), m23: c(0.05, 0.0) },
        Hermitian3 { m11: 0.3, m22: 0.3, m33: 0.3, m12: c(0.0, 0.0), m13: c(0.0, 0.0), m23: c(0.0, 0.1) },
        Hermitian3 { m11: 1.5, m22: 0.2, m33: 0.25, m12: c(0.0, 0.1), m13: c(0.05, 0.0), m23: c(0.0, 0.0) },
    ];
    (0..n)
        .map(|i| {
            let base = archetypes[i % archetypes.len()];
            // Cycle brightness when classes outnumber archetypes.
            let gain = 1.0 + 0.6 * (i / archetypes.len()) as f64;
            WishartClassSpec::new(i as u16 + 1, base.scale(gain), looks)
        })
        .collect()
}

/// Per-pixel class assignment for synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLayout {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u16>,
}

impl RegionLayout {
    pub fn uniform(height: usize, width: usize, class: u16) -> Self {
        Self { height, width, classes: vec![class; height * width] }
    }

    /// Vertical bands of equal width, classes `1..=n` left to right.
    pub fn bands(height: usize, width: usize, n: usize) -> Self {
        let classes =
            (0..height * width).map(|i| ((i % width) * n / width.max(1)) as u16 + 1).collect();
        Self { height, width, classes }
    }

    /// Nearest-seed regions from `n * seeds_per_class` random seeds; every
    /// class owns at least one seed, so `1..=n` all appear when the image is
    /// larger than the seed count.
    pub fn voronoi(height: usize, width: usize, n: usize, seeds_per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = n * seeds_per_class.max(1);
        let sites: Vec<(f64, f64, u16)> = (0..total)
            .map(|i| {
                let y = rng.random_range(0.0..height as f64);
                let x = rng.random_range(0.0..width as f64);
                (y, x, (i % n) as u16 + 1)
            })
            .collect();
        let classes = (0..height * width)
            .map(|p| {
                let (py, px) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
                sites
                    .iter()
                    .map(|&(y, x, c)| ((y - py).powi(2) + (x - px).powi(2), c))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map_or(1, |(_, c)| c)
            })
            .collect();
        Self { height, width, classes }
    }
}

/// Multi-look complex-Wishart raster. Each pixel averages `L` outer products
/// of `k = L_c z`, where `L_c L_c^H = Sigma_c` and `z` has independent
/// `N(0, 1/2)` real and imaginary parts.
pub fn synthesize_wishart(specs: &[WishartClassSpec], layout: &RegionLayout, seed: u64) -> Result<PolSARImage> {
    if layout.classes.len() != layout.height * layout.width {
        return invalid("region layout size does not match its dimensions");
    }
    let mut factors = std::collections::BTreeMap::new();
    for s in specs {
        if s.looks == 0 {
            return invalid(format!("class {} has zero looks", s.class_id));
        }
        factors.insert(s.class_id, (s.sigma.cholesky()?, s.looks));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut pixels = Vec::with_capacity(layout.classes.len());
    for &class in &layout.classes {
        let (l, looks) =
            factors.get(&class).ok_or_else(|| Error::Invalid(format!("layout uses unknown class id {class}")))?;
        let mut acc = Hermitian3::ZERO;
        for _ in 0..*looks {
            let mut z = [C64::new(0.0, 0.0); 3];
            for zi in &mut z {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *zi = C64::new(re * half, im * half);
            }
            let mut k = [C64::new(0.0, 0.0); 3];
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = (0..=i).map(|j| l[i][j] * z[j]).sum();
            }
            acc = acc.add(&Hermitian3::outer(k));
        }
        pixels.push(CoherencyMatrix(acc.scale(1.0 / f64::from(*looks))));
    }
    PolSARImage::new(layout.height, layout.width, pixels)?.with_labels(layout.classes.clone())
}

/// Voronoi scene where each class owns several regions and every region
/// carries its own brightness gain, so classes differ in polarimetric
/// structure rather than in power.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub regions_per_class: usize,
    pub looks: u32,
    /// 1 keeps the class archetypes, 0 collapses them onto their mean.
    pub contrast: f64,
    /// Region gains are `10^u` with `u` uniform in `[-texture/2, texture/2]`.
    pub texture: f64,
}

impl SceneSpec {
    pub fn new(classes: usize, size: usize) -> Self {
        Self { classes, height: size, width: size, regions_per_class: 3, looks: 2, contrast: 0.5, texture: 1.5 }
    }
}

pub fn synthesize_scene(spec: &SceneSpec, seed: u64) -> Result<PolSARImage> {
    let n = spec.classes;
    if n == 0 || spec.regions_per_class == 0 {
        return invalid("a scene needs at least one class and one region per class");
    }
    if !(0.0..=1.0).contains(&spec.contrast) || !(spec.texture >= 0.0 && spec.texture.is_finite()) {
        return invalid("contrast must be in [0, 1] and texture non-negative");
    }
    let regions = n * spec.regions_per_class;
    if regions > usize::from(u16::MAX) {
        return invalid(format!("{regions} regions exceed the label range"));
    }
    let archetypes = default_class_specs(n, spec.looks);
    let mean = archetypes.iter().fold(Hermitian3::ZERO, |a, s| a.add(&s.sigma)).scale(1.0 / n as f64);
    let shapes: Vec<Hermitian3> = archetypes
        .iter()
        .map(|s| {
            let m = mean.scale(1.0 - spec.contrast).add(&s.sigma.scale(spec.contrast));
            m.scale(1.0 / m.trace())
        })
        .collect();
    let layout = RegionLayout::voronoi(spec.height, spec.width, regions, 1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ce_7e5c_e7e5);
    let specs: Vec<WishartClassSpec> = (0..regions)
        .map(|r| {
            let gain = 10f64.powf(spec.texture * (rng.random::<f64>() - 0.5));
            WishartClassSpec::new(r as u16 + 1, shapes[r % n].scale(gain), spec.looks)
        })
        .collect();
    let img = synthesize_wishart(&specs, &layout, seed)?;
    let labels = layout.classes.iter().map(|&r| (r - 1) % n as u16 + 1).collect();
    img.with_labels(labels)
}
