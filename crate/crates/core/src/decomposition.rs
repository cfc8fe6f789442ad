//! Target decompositions and the per-pixel feature cube.
//!
//! Six groups are computed natively (28 features); further groups can be
//! ingested from other cubes with matching dimensions.

use crate::error::{invalid, Error, Result};
use crate::polsar::{coherency_to_covariance, CoherencyMatrix, CovarianceMatrix, PolSARImage, ScatteringMatrix, C64};

/// Powers below `10^-5` are reported at -50 dB.
pub const DB_FLOOR: f64 = -50.0;

pub fn to_db(power: f64) -> f64 {
    if power > 0.0 {
        (10.0 * power.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HAAlphaResult {
    pub entropy: f64,
    pub anisotropy: f64,
    /// Mean alpha angle, degrees.
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Probability-weighted mean eigenvalue (a power).
    pub lambda: f64,
    pub probabilities: [f64; 3],
}

impl HAAlphaResult {
    /// `[HA, (1-H)A, H(1-A), (1-H)(1-A)]`.
    pub fn combinations(&self) -> [f64; 4] {
        let (h, a) = (self.entropy, self.anisotropy);
        [h * a, (1.0 - h) * a, h * (1.0 - a), (1.0 - h) * (1.0 - a)]
    }

    /// alpha, anisotropy, beta, delta, entropy, gamma, lambda (dB), then the combinations.
    pub fn features(&self) -> [f64; 11] {
        let c = self.combinations();
        [
            self.alpha,
            self.anisotropy,
            self.beta,
            self.delta,
            self.entropy,
            self.gamma,
            to_db(self.lambda),
            c[0],
            c[1],
            c[2],
            c[3],
        ]
    }
}

fn wrap_degrees(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Relative eigenvalue floor in [`haalpha`].
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Eigen-analysis of `T / trace(T)`, so every output except `lambda` is scale
/// invariant. Eigenvectors are parameterised as
/// `e = e^{i phi} [cos a, sin a cos b e^{i d}, sin a sin b e^{i g}]`.
/// A zero matrix yields all-zero features.
pub fn haalpha(t: &CoherencyMatrix) -> Result<HAAlphaResult> {
    t.check_psd()?;
    let trace = t.trace();
    if trace <= 0.0 {
        return Ok(HAAlphaResult {
            entropy: 0.0,
            anisotropy: 0.0,
            alpha: 0.0,
            beta: 0.0,
            delta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            probabilities: [1.0, 0.0, 0.0],
        });
    }
    let eig = t.scale(1.0 / trace).eigen();
    // Eigenvalues at rounding level are zero; otherwise A of a rank-1 matrix is noise.
    let lam = eig.values.map(|v| if v > EIGEN_FLOOR { v } else { 0.0 });
    let total: f64 = lam.iter().sum();
    let p = lam.map(|v| v / total);
    let entropy = (-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() / 3f64.ln()).clamp(0.0, 1.0);
    let anisotropy = if lam[1] + lam[2] > 0.0 { ((lam[1] - lam[2]) / (lam[1] + lam[2])).clamp(0.0, 1.0) } else { 0.0 };
    let (mut alpha, mut beta, mut delta, mut gamma) = (0.0, 0.0, 0.0, 0.0);
    for (pi, e) in p.iter().zip(&eig.vectors) {
        let a = e[0].norm().min(1.0).acos().to_degrees();
        let b = e[2].norm().atan2(e[1].norm()).to_degrees();
        let phase0 = if e[0].norm() > 1e-12 { e[0].arg() } else { 0.0 };
        let rel = |z: C64| if z.norm() > 1e-12 { wrap_degrees((z.arg() - phase0).to_degrees()) } else { 0.0 };
        alpha += pi * a;
        beta += pi * b;
        delta += pi * rel(e[1]);
        gamma += pi * rel(e[2]);
    }
    let lambda = trace * p.iter().map(|x| x * x).sum::<f64>();
    Ok(HAAlphaResult { entropy, anisotropy, alpha: alpha.clamp(0.0, 90.0), beta, delta, gamma, lambda, probabilities: p })
}

/// Linear Freeman-Durden powers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreemanPowers {
    pub odd: f64,
    pub dbl: f64,
    pub vol: f64,
}

impl FreemanPowers {
    /// Two-component split: volume, and the rest of the span as ground.
    pub fn ground(&self) -> f64 {
        self.odd + self.dbl
    }

    /// Freeman2 (Vol, Ground) then Freeman3 (Odd, Dbl, Vol), in dB.
    pub fn features(&self) -> [f64; 5] {
        [to_db(self.vol), to_db(self.ground()), to_db(self.odd), to_db(self.dbl), to_db(self.vol)]
    }
}

/// Three-component split with volume model `f_v [[1,0,1/3],[0,2/3,0],[1/3,0,1]]`.
/// When removing the volume term leaves a non-positive co-pol power the
/// whole span is assigned to volume; negative component powers clamp to 0.
pub fn freeman_powers(c: &CovarianceMatrix) -> FreemanPowers {
    let span = c.trace().max(0.0);
    let fv = 1.5 * c.m22.max(0.0);
    let c11 = c.m11 - fv;
    let c33 = c.m33 - fv;
    let c13 = c.m13 - C64::new(fv / 3.0, 0.0);
    let tol = 1e-12 * span;
    if c11 <= tol || c33 <= tol {
        return FreemanPowers { odd: 0.0, dbl: 0.0, vol: span };
    }
    let rem = c11 + c33;
    let det = c11 * c33 - c13.norm_sqr();
    let (odd, dbl) = if c13.re >= 0.0 {
        // Surface dominant: double-bounce coefficient fixed at -1.
        let fd = det / (rem + 2.0 * c13.re);
        let pd = 2.0 * fd;
        (rem - pd, pd)
    } else {
        // Double-bounce dominant: surface coefficient fixed at 1.
        let fs = det / (rem - 2.0 * c13.re);
        let ps = 2.0 * fs;
        (ps, rem - ps)
    };
    FreemanPowers { odd: odd.max(0.0), dbl: dbl.max(0.0), vol: 8.0 / 3.0 * fv }
}

/// Freeman2 and Freeman3 powers in dB, see [`FreemanPowers::features`].
pub fn freeman(c: &CovarianceMatrix) -> Result<[f64; 5]> {
    c.check_psd()?;
    Ok(freeman_powers(c).features())
}

/// Sphere, diplane and helix amplitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrogagerResult {
    pub sphere: f64,
    pub diplane: f64,
    pub helix: f64,
}

impl KrogagerResult {
    fn from_circular(rl: f64, rr: f64, ll: f64) -> Self {
        Self { sphere: rl, diplane: rr.min(ll), helix: (rr - ll).abs() }
    }

    pub fn features(&self) -> [f64; 3] {
        [self.sphere, self.diplane, self.helix]
    }
}

/// Circular-basis split of a single scattering matrix.
pub fn krogager(s: &ScatteringMatrix) -> KrogagerResult {
    let i = C64::new(0.0, 1.0);
    let hv = (s.shv + s.svh) * 0.5;
    let rr = i * hv + (s.shh - s.svv) * 0.5;
    let ll = i * hv - (s.shh - s.svv) * 0.5;
    let rl = i * (s.shh + s.svv) * 0.5;
    KrogagerResult::from_circular(rl.norm(), rr.norm(), ll.norm())
}

/// Same split from second-order statistics, using the circular-channel
/// powers `|RL|^2 = T11/2` and `|RR|^2, |LL|^2 = (T22 + T33 +- 2 Im T23) / 2`.
/// Agrees with [`krogager`] on single-look matrices.
pub fn krogager_from_coherency(t: &CoherencyMatrix) -> KrogagerResult {
    let base = t.m22 + t.m33;
    let rr = (0.5 * (base + 2.0 * t.m23.im)).max(0.0).sqrt();
    let ll = (0.5 * (base - 2.0 * t.m23.im)).max(0.0).sqrt();
    KrogagerResult::from_circular((0.5 * t.m11).max(0.0).sqrt(), rr, ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagVariant {
    /// Diagonal of the dominant rank-1 term `lambda_1 e_1 e_1^H`.
    Cloude,
    /// Diagonal of the rank-1 target `t_1 t_1^H / T11` built from the first column.
    Huynen,
    /// Co-pol eigenvalues split by the sign of `Re C13` (odd, double), plus `C22` as volume.
    VanZyl,
}

/// Three diagonal powers in dB.
pub fn diag_db_group(t: &CoherencyMatrix, variant: DiagVariant) -> Result<[f64; 3]> {
    t.check_psd()?;
    let p = match variant {
        DiagVariant::Cloude => {
            let e = t.eigen();
            let l1 = e.values[0].max(0.0);
            e.vectors[0].map(|v| l1 * v.norm_sqr())
        }
        DiagVariant::Huynen => {
            if t.m11 > 0.0 {
                [t.m11, t.m12.norm_sqr() / t.m11, t.m13.norm_sqr() / t.m11]
            } else {
                [0.0; 3]
            }
        }
        DiagVariant::VanZyl => {
            let c = coherency_to_covariance(t)?;
            let mid = 0.5 * (c.m11 + c.m33);
            let rad = (0.25 * (c.m11 - c.m33).powi(2) + c.m13.norm_sqr()).sqrt();
            let (hi, lo) = (mid + rad, (mid - rad).max(0.0));
            let (odd, dbl) = if c.m13.re >= 0.0 { (hi, lo) } else { (lo, hi) };
            [odd, dbl, c.m22]
        }
    };
    Ok(p.map(to_db))
}

/// Names and sizes of the natively computed groups, in cube order.
pub const NATIVE_GROUPS: [(&str, usize); 6] =
    [("H/A/alpha", 11), ("Freeman", 5), ("Krogager", 3), ("Cloude", 3), ("Huynen", 3), ("VanZyl", 3)];

pub const NATIVE_FEATURES: usize = 28;

/// All 28 native features of one pixel.
pub fn native_features(t: &CoherencyMatrix) -> Result<[f64; NATIVE_FEATURES]> {
    let mut out = [0.0; NATIVE_FEATURES];
    out[..11].copy_from_slice(&haalpha(t)?.features());
    out[11..16].copy_from_slice(&freeman(&coherency_to_covariance(t)?)?);
    out[16..19].copy_from_slice(&krogager_from_coherency(t).features());
    out[19..22].copy_from_slice(&diag_db_group(t, DiagVariant::Cloude)?);
    out[22..25].copy_from_slice(&diag_db_group(t, DiagVariant::Huynen)?);
    out[25..28].copy_from_slice(&diag_db_group(t, DiagVariant::VanZyl)?);
    Ok(out)
}

/// Per-pixel feature vectors grouped by decomposition, with an active mask
/// and per-feature standardisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    pub height: usize,
    pub width: usize,
    pub group_index: Vec<u16>,
    pub group_names: Vec<String>,
    /// Pixel-major raw values (`n_features` per pixel). Never altered by masking.
    pub data: Vec<f32>,
    mask: Vec<bool>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureCube {
    pub fn new(
        height: usize,
        width: usize,
        group_index: Vec<u16>,
        group_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = group_index.len();
        if height * width == 0 {
            return invalid("feature cube has zero area");
        }
        if n == 0 {
            return invalid("feature cube has no features");
        }
        if data.len() != height * width * n {
            return invalid(format!("{} feature values for {height}x{width}x{n}", data.len()));
        }
        for (g, name) in group_names.iter().enumerate() {
            if group_names[..g].contains(name) {
                return invalid(format!("duplicate group name {name}"));
            }
            if !group_index.iter().any(|&x| x as usize == g) {
                return invalid(format!("group {name} has no features"));
            }
        }
        if let Some(&g) = group_index.iter().find(|&&g| g as usize >= group_names.len()) {
            return invalid(format!("feature references group {g} of {}", group_names.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value for feature {} at pixel {}", i % n, i / n));
        }
        let pixels = (height * width) as f64;
        let mut mean = vec![0.0; n];
        for px in data.chunks(n) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= pixels);
        let mut var = vec![0.0; n];
        for px in data.chunks(n) {
            for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (f64::from(v) - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / pixels).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { height, width, group_index, group_names, data, mask: vec![true; n], mean, std })
    }

    pub fn n_features(&self) -> usize {
        self.group_index.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_features() {
            return invalid(format!("mask has {} entries for {} features", mask.len(), self.n_features()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn is_masked(&self) -> bool {
        self.mask.iter().any(|&m| !m)
    }

    /// Mask with every feature of the `removed` groups switched off.
    pub fn mask_without(&self, removed: &[usize]) -> Vec<bool> {
        self.group_index.iter().map(|&g| !removed.contains(&(g as usize))).collect()
    }

    pub fn active_features(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&f| self.mask[f]).collect()
    }

    /// Groups with at least one active feature.
    pub fn active_groups(&self) -> Vec<usize> {
        (0..self.n_groups()).filter(|&g| self.group_index.iter().zip(&self.mask).any(|(&i, &m)| m && i as usize == g)).collect()
    }

    pub fn group_id(&self, name: &str) -> Option<usize> {
        self.group_names.iter().position(|n| n == name)
    }

    pub fn raw(&self, pixel: usize) -> &[f32] {
        let n = self.n_features();
        &self.data[pixel * n..(pixel + 1) * n]
    }

    /// Raw value with the cube's mask applied: masked features read as 0.
    pub fn value(&self, pixel: usize, feature: usize) -> f32 {
        if self.mask[feature] {
            self.raw(pixel)[feature]
        } else {
            0.0
        }
    }

    pub fn stats(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.std)
    }

    /// Full-length z-scored vector with features outside `mask` set to 0.
    pub fn standardized_into(&self, pixel: usize, mask: &[bool], out: &mut [f32]) {
        for (f, (o, &v)) in out.iter_mut().zip(self.raw(pixel)).enumerate() {
            *o = if mask[f] { ((f64::from(v) - self.mean[f]) / self.std[f]) as f32 } else { 0.0 };
        }
    }

    /// z-scored values of the active features only.
    pub fn compact_standardized_into(&self, pixel: usize, out: &mut [f32]) {
        let raw = self.raw(pixel);
        let mut k = 0;
        for f in 0..self.n_features() {
            if self.mask[f] {
                out[k] = ((f64::from(raw[f]) - self.mean[f]) / self.std[f]) as f32;
                k += 1;
            }
        }
    }
}

/// Native groups of every pixel followed by the groups of each `extra` cube.
pub fn assemble_cube(img: &PolSARImage, extra: &[FeatureCube]) -> Result<FeatureCube> {
    if img.is_empty() {
        return invalid("cannot decompose an empty image");
    }
    let mut names: Vec<String> = NATIVE_GROUPS.iter().map(|(n, _)| n.to_string()).collect();
    let mut index: Vec<u16> =
        NATIVE_GROUPS.iter().enumerate().flat_map(|(g, &(_, size))| std::iter::repeat_n(g as u16, size)).collect();
    for cube in extra {
        if (cube.height, cube.width) != (img.height, img.width) {
            return invalid(format!(
                "ingested cube is {}x{} but image is {}x{}",
                cube.height, cube.width, img.height, img.width
            ));
        }
        let offset = names.len() as u16;
        index.extend(cube.group_index.iter().map(|&g| g + offset));
        names.extend(cube.group_names.iter().cloned());
    }
    let n = index.len();
    let mut data = Vec::with_capacity(img.len() * n);
    for (p, t) in img.pixels.iter().enumerate() {
        let native = native_features(t).map_err(|e| match e {
            Error::NotPsd { .. } => Error::Invalid(format!("pixel {p}: {e}")),
            other => other,
        })?;
        data.extend(native.iter().map(|&v| v as f32));
        for cube in extra {
            data.extend_from_slice(cube.raw(p));
        }
    }
    FeatureCube::new(img.height, img.width, index, names, data)
}
