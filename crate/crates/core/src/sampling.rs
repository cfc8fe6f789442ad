//! Batch samplers for pretraining.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::superpixel::SuperpixelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// One pixel from each of `B` distinct superpixels; ids are superpixel ids.
    Superpixel,
    /// `B` distinct pixels, each its own instance.
    Vanilla,
    /// `B` distinct labeled pixels grouped by their ground-truth class.
    LabelOracle,
}

impl std::str::FromStr for SamplingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "superpixel" => Ok(Self::Superpixel),
            "vanilla" => Ok(Self::Vanilla),
            "label-oracle" => Ok(Self::LabelOracle),
            _ => Err(format!("expected superpixel, vanilla or label-oracle, got {s}")),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Superpixel => "superpixel",
            Self::Vanilla => "vanilla",
            Self::LabelOracle => "label-oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pixels: Vec<usize>,
    /// Group id per member; equal ids are positives of each other.
    pub ids: Vec<u32>,
}

/// `round(fraction * n)` distinct pixel indices (at least one), ascending.
pub fn select_pool<R: Rng + ?Sized>(n_pixels: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("pool fraction must be in (0, 1], got {fraction}"));
    }
    if n_pixels == 0 {
        return invalid("cannot sample from an empty image");
    }
    let k = ((fraction * n_pixels as f64).round() as usize).clamp(1, n_pixels);
    let mut v = sample(rng, n_pixels, k).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Pretraining pool indexed by superpixel and by class.
#[derive(Debug, Clone)]
pub struct SamplingPool {
    pixels: Vec<usize>,
    groups: Vec<(u32, Vec<usize>)>,
    labeled: Vec<(usize, u16)>,
}

impl SamplingPool {
    /// `labels` (per image pixel, 0 = unlabeled) are only needed for
    /// [`SamplingMode::LabelOracle`].
    pub fn new(pixels: Vec<usize>, map: &SuperpixelMap, labels: Option<&[u16]>) -> Result<Self> {
        let n = map.height * map.width;
        if let Some(&p) = pixels.iter().find(|&&p| p >= n) {
            return invalid(format!("pool pixel {p} outside a {n}-pixel map"));
        }
        let mut per_sp = vec![Vec::new(); map.count];
        for &p in &pixels {
            per_sp[map.ids[p] as usize].push(p);
        }
        let groups = per_sp.into_iter().enumerate().filter(|(_, v)| !v.is_empty()).map(|(i, v)| (i as u32, v)).collect();
        let labeled = match labels {
            Some(l) => pixels.iter().filter(|&&p| l[p] != 0).map(|&p| (p, l[p])).collect(),
            None => Vec::new(),
        };
        Ok(Self { pixels, groups, labeled })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Largest batch the mode can draw without repeating a unit.
    pub fn capacity(&self, mode: SamplingMode) -> usize {
        match mode {
            SamplingMode::Superpixel => self.groups.len(),
            SamplingMode::Vanilla => self.pixels.len(),
            SamplingMode::LabelOracle => self.labeled.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, mode: SamplingMode, b: usize, rng: &mut R) -> Result<Batch> {
        let cap = self.capacity(mode);
        if b < 2 || b > cap {
            return invalid(format!("batch size {b} must be in 2..={cap} for {mode} sampling"));
        }
        let picks = sample(rng, cap, b).into_vec();
        Ok(match mode {
            SamplingMode::Superpixel => {
                let mut pixels = Vec::with_capacity(b);
                let mut ids = Vec::with_capacity(b);
                for g in picks {
                    let (id, members) = &self.groups[g];
                    pixels.push(members[rng.random_range(0..members.len())]);
                    ids.push(*id);
                }
                Batch { pixels, ids }
            }
            SamplingMode::Vanilla => {
                Batch { pixels: picks.iter().map(|&i| self.pixels[i]).collect(), ids: (0..b as u32).collect() }
            }
            SamplingMode::LabelOracle => Batch {
                pixels: picks.iter().map(|&i| self.labeled[i].0).collect(),
                ids: picks.iter().map(|&i| u32::from(self.labeled[i].1)).collect(),
            },
        })
    }
}

/// Samples from the whole map.
pub fn sample_batch<R: Rng + ?Sized>(
    map: &SuperpixelMap,
    labels: Option<&[u16]>,
    mode: SamplingMode,
    b: usize,
    rng: &mut R,
) -> Result<Batch> {
    SamplingPool::new((0..map.ids.len()).collect(), map, labels)?.sample(mode, b, rng)
}
