//! Contrastive pretraining, supervised fine-tuning and dense prediction.

use hcl_autodiff::{cosine_lr, Checkpoint, Mode, ParamSet, RngState, Sgd, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::contrastive::superpixel_info_nce_tape;
use crate::decomposition::FeatureCube;
use crate::error::{invalid, Error, Result};
use crate::network::{Architecture, Classifier, ContrastiveNet, HEAD, ONLINE_ENCODER, PATCH_CHANNELS, TARGET};
use crate::polsar::{mirror, PolSARImage};
use crate::sampling::{select_pool, SamplingMode, SamplingPool};
use crate::superpixel::SuperpixelMap;

/// Coherency channels z-scored with image-wide statistics and mirror-padded,
/// ready for `[C, k, k]` patch copies.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub k: usize,
    height: usize,
    width: usize,
    padded_w: usize,
    planes: Vec<Vec<f32>>,
}

impl PatchSource {
    pub fn new(img: &PolSARImage, k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return invalid(format!("patch size must be odd, got {k}"));
        }
        if img.is_empty() {
            return invalid("empty image");
        }
        let (h, w) = (img.height, img.width);
        let r = k / 2;
        let reals: Vec<[f64; 9]> = img.pixels.iter().map(|p| p.to_reals()).collect();
        let n = reals.len() as f64;
        let (pw, ph) = (w + 2 * r, h + 2 * r);
        let mut planes = Vec::with_capacity(PATCH_CHANNELS);
        for ch in 0..PATCH_CHANNELS {
            let mean = reals.iter().map(|v| v[ch]).sum::<f64>() / n;
            let std = (reals.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n).sqrt();
            let std = if std > 1e-12 { std } else { 1.0 };
            let mut plane = Vec::with_capacity(ph * pw);
            for y in 0..ph {
                let sy = mirror(y as isize - r as isize, h);
                for x in 0..pw {
                    let sx = mirror(x as isize - r as isize, w);
                    plane.push(((reals[sy * w + sx][ch] - mean) / std) as f32);
                }
            }
            planes.push(plane);
        }
        Ok(Self { k, height: h, width: w, padded_w: pw, planes })
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Appends the `[9, k, k]` patch centred on `pixel`, optionally rotated by 180 degrees.
    pub fn push_patch(&self, pixel: usize, rotate: bool, out: &mut Vec<f32>) {
        let (row, col) = (pixel / self.width, pixel % self.width);
        let k = self.k;
        for plane in &self.planes {
            let start = out.len();
            for dy in 0..k {
                let base = (row + dy) * self.padded_w + col;
                out.extend_from_slice(&plane[base..base + k]);
            }
            if rotate {
                out[start..].reverse();
            }
        }
    }

    pub fn batch(&self, pixels: &[usize], rotate: bool) -> Tensor<f32> {
        let mut data = Vec::with_capacity(pixels.len() * PATCH_CHANNELS * self.k * self.k);
        for &p in pixels {
            self.push_patch(p, rotate, &mut data);
        }
        Tensor::new(vec![pixels.len(), PATCH_CHANNELS, self.k, self.k], data).expect("patch batch shape")
    }
}

/// z-scored active features of every pixel, `len` values each.
#[derive(Debug, Clone)]
pub struct VectorSource {
    pub len: usize,
    data: Vec<f32>,
}

impl VectorSource {
    pub fn new(cube: &FeatureCube) -> Result<Self> {
        let len = cube.active_features().len();
        if len == 0 {
            return invalid("feature mask selects no features");
        }
        let mut data = vec![0.0; cube.n_pixels() * len];
        for (p, chunk) in data.chunks_mut(len).enumerate() {
            cube.compact_standardized_into(p, chunk);
        }
        Ok(Self { len, data })
    }

    pub fn batch(&self, pixels: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(pixels.len() * self.len);
        for &p in pixels {
            data.extend_from_slice(&self.data[p * self.len..(p + 1) * self.len]);
        }
        Tensor::new(vec![pixels.len(), 1, self.len], data).expect("vector batch shape")
    }
}

pub fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

pub fn restore_rng(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    /// Upper bound; the effective batch is capped by what the sampler can draw.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patch_size: usize,
    pub sampling_mode: SamplingMode,
    pub architecture: Architecture,
    pub unlabeled_fraction: f64,
    pub freeze_target: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            batch_size: 4096,
            epochs: 30,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            patch_size: 15,
            sampling_mode: SamplingMode::Superpixel,
            architecture: Architecture::Heterogeneous,
            unlabeled_fraction: 0.1,
            freeze_target: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub pool_size: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Mean loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
    pub first_step_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: PretrainReport,
}

/// Pretrains both branches. The online branch sees patches, the target branch
/// the active features of `cube` at the same pixels (or, in the Siamese
/// configuration, the online branch sees the patch rotated by 180 degrees).
/// `on_epoch` receives a complete checkpoint after every epoch; passing one of
/// them back as `resume` continues bit-identically.
pub fn pretrain(
    img: &PolSARImage,
    cube: &FeatureCube,
    map: &SuperpixelMap,
    cfg: &PretrainConfig,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    if (cube.height, cube.width) != (img.height, img.width) || (map.height, map.width) != (img.height, img.width) {
        return invalid("image, feature cube and superpixel map dimensions differ");
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config { key: "tau".into(), reason: "must be positive".into() });
    }
    let patches = PatchSource::new(img, cfg.patch_size)?;
    let vectors = VectorSource::new(cube)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::<f32>::new();
    let net = ContrastiveNet::build(cfg.architecture, cfg.patch_size, vectors.len, &mut params, &mut rng)?;
    if cfg.freeze_target {
        params.set_frozen(TARGET, true);
    }
    let pool_pixels = select_pool(img.len(), cfg.unlabeled_fraction, &mut rng)?;
    let pool = SamplingPool::new(pool_pixels, map, img.labels.as_deref())?;
    let capacity = pool.capacity(cfg.sampling_mode);
    let b = cfg.batch_size.min(capacity);
    if b < 2 {
        return invalid(format!(
            "{} sampling can draw at most {capacity} members from a pool of {}; need 2",
            cfg.sampling_mode,
            pool.len()
        ));
    }
    let steps = pool.len().div_ceil(b);
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut start = 0usize;
    if let Some(ck) = resume {
        params.load_prefix(&ck.params, "")?;
        sgd.load_named(&params, &ck.momentum)?;
        rng = restore_rng(&ck.rng);
        start = ck.epoch as usize;
        if start > cfg.epochs {
            return invalid(format!("checkpoint is at epoch {start}, beyond the configured {}", cfg.epochs));
        }
    }
    let mut report =
        PretrainReport { pool_size: pool.len(), batch_size: b, steps_per_epoch: steps, epoch_losses: Vec::new(), first_step_loss: f64::NAN };
    let mut checkpoint = snapshot(&params, &sgd, &rng, start);
    for epoch in start..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr0);
        let mut total = 0.0;
        for step in 0..steps {
            let batch = pool.sample(cfg.sampling_mode, b, &mut rng)?;
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(patches.batch(&batch.pixels, false));
            let h = net.online_encoder.forward(&mut tape, &mut params, x, Mode::Train)?;
            let q = net.projection.forward(&mut tape, &mut params, h, Mode::Train)?;
            let k = match &net.target {
                Some(target) => {
                    let v = tape.constant(vectors.batch(&batch.pixels));
                    target.forward(&mut tape, &mut params, v, Mode::Train)?
                }
                None => {
                    let x2 = tape.constant(patches.batch(&batch.pixels, true));
                    let h2 = net.online_encoder.forward(&mut tape, &mut params, x2, Mode::Train)?;
                    net.projection.forward(&mut tape, &mut params, h2, Mode::Train)?
                }
            };
            let loss = superpixel_info_nce_tape(&mut tape, q, k, &batch.ids, cfg.tau)?;
            let value = f64::from(tape.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Runtime(format!("pretraining loss diverged at epoch {epoch}, step {step}")));
            }
            if epoch == start && step == 0 {
                report.first_step_loss = value;
            }
            total += value;
            let grads = tape.backward(loss)?;
            sgd.step(&mut params, &grads, lr);
        }
        let mean = total / steps as f64;
        log::info!("pretrain epoch {}/{}: loss {mean:.6} (lr {lr:.5})", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
        checkpoint = snapshot(&params, &sgd, &rng, epoch + 1);
        on_epoch(&checkpoint)?;
    }
    Ok(PretrainOutcome { checkpoint, report })
}

fn snapshot(params: &ParamSet<f32>, sgd: &Sgd<f32>, rng: &ChaCha8Rng, epoch: usize) -> Checkpoint {
    Checkpoint { params: params.to_named(), momentum: sgd.to_named(params), rng: rng_state(rng), epoch: epoch as u32 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            patch_size: 15,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

/// Per class, `max(1, round(fraction * count))` pixels for training; every
/// other labeled pixel is returned as the test set. Both lists ascend.
pub fn stratified_split<R: Rng + ?Sized>(labels: &[u16], fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config { key: "label_fraction".into(), reason: format!("must be in (0, 1], got {fraction}") });
    }
    let c = labels.iter().copied().max().unwrap_or(0) as usize;
    if c == 0 {
        return invalid("no labeled pixels");
    }
    let mut by_class = vec![Vec::new(); c];
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize - 1].push(p);
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, pixels) in by_class.iter_mut().enumerate() {
        if pixels.is_empty() {
            return invalid(format!("class {} has no labeled pixels", i + 1));
        }
        let n = ((fraction * pixels.len() as f64).round() as usize).clamp(1, pixels.len());
        pixels.shuffle(rng);
        train.extend_from_slice(&pixels[..n]);
        test.extend_from_slice(&pixels[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub net: Classifier,
    pub params: ParamSet<f32>,
}

impl TrainedClassifier {
    pub fn trainable_scalars(&self) -> usize {
        self.params.trainable_scalars()
    }

    /// Parameters only: no momentum, a zero RNG state, epoch 0.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.to_named(), momentum: Vec::new(), rng: RngState::default(), epoch: 0 }
    }

    /// Rebuilds a classifier saved by [`TrainedClassifier::to_checkpoint`];
    /// the class count comes from the head's shape.
    pub fn from_checkpoint(ck: &Checkpoint, patch: usize) -> Result<Self> {
        let head = ck
            .param(&format!("{HEAD}.0.weight"))
            .ok_or_else(|| Error::Format("checkpoint has no classifier head".into()))?;
        let n_classes = head.shape[0];
        let mut params = ParamSet::<f32>::new();
        let net = Classifier::build(patch, n_classes, &mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
        params.load_prefix(&ck.params, "")?;
        Ok(Self { net, params })
    }
}

/// Batches of at most `b` that never leave a lone trailing sample, which
/// training-mode batch norm cannot normalise.
fn batches(n: usize, b: usize) -> Vec<(usize, usize)> {
    let b = b.max(2);
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + b).min(n);
        out.push((s, e));
        s = e;
    }
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        out.pop();
        let last = out.last_mut().expect("at least one batch");
        last.1 = n;
    }
    out
}

/// Cross-entropy training of the online encoder plus a fresh linear head.
/// With `pretrained`, encoder weights (and batch-norm statistics) come from
/// the checkpoint; otherwise they are randomly initialised.
pub fn finetune(
    pretrained: Option<&Checkpoint>,
    patches: &PatchSource,
    labels: &[u16],
    train_pixels: &[usize],
    n_classes: usize,
    cfg: &FinetuneConfig,
) -> Result<TrainedClassifier> {
    if patches.k != cfg.patch_size {
        return invalid(format!("patch source uses k={} but config says {}", patches.k, cfg.patch_size));
    }
    if train_pixels.len() < 2 {
        return invalid(format!("need at least two training pixels, got {}", train_pixels.len()));
    }
    if let Some(&p) = train_pixels.iter().find(|&&p| labels[p] == 0 || labels[p] as usize > n_classes) {
        return invalid(format!("training pixel {p} has label {} outside 1..={n_classes}", labels[p]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::<f32>::new();
    let net = Classifier::build(cfg.patch_size, n_classes, &mut params, &mut rng)?;
    if let Some(ck) = pretrained {
        params.load_prefix(&ck.params, ONLINE_ENCODER)?;
    }
    if cfg.freeze_encoder {
        params.set_frozen(ONLINE_ENCODER, true);
    }
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut order = train_pixels.to_vec();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr);
        order.shuffle(&mut rng);
        for (s, e) in batches(order.len(), cfg.batch_size) {
            let px = &order[s..e];
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(patches.batch(px, false));
            // A frozen encoder keeps its batch statistics too.
            let enc_mode = if cfg.freeze_encoder { Mode::Eval } else { Mode::Train };
            let h = net.encoder.forward(&mut tape, &mut params, x, enc_mode)?;
            let logits = net.head.forward(&mut tape, &mut params, h, Mode::Train)?;
            let loss = cross_entropy(&mut tape, logits, px.iter().map(|&p| labels[p] as usize - 1), n_classes)?;
            if !tape.value(loss).data()[0].is_finite() {
                return Err(Error::Runtime(format!("fine-tuning loss diverged at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            sgd.step(&mut params, &grads, lr);
        }
    }
    Ok(TrainedClassifier { net, params })
}

/// Mean of `logsumexp(row) - row[target]`.
pub fn cross_entropy(
    tape: &mut Tape<f32>,
    logits: Var,
    targets: impl Iterator<Item = usize>,
    n_classes: usize,
) -> Result<Var> {
    let n = tape.shape(logits)[0];
    let mut mask = vec![false; n * n_classes];
    for (i, t) in targets.enumerate() {
        mask[i * n_classes + t] = true;
    }
    let all = tape.row_logsumexp(logits, None)?;
    let picked = tape.row_logsumexp(logits, Some(&mask))?;
    let gap = tape.sub(all, picked)?;
    Ok(tape.mean(gap))
}

const PREDICT_CHUNK: usize = 256;

/// Class id (`1..=C`) of every listed pixel, in order. Inference runs in eval
/// mode over fixed-size chunks, so results do not depend on thread count.
pub fn predict(clf: &TrainedClassifier, patches: &PatchSource, pixels: &[usize]) -> Result<Vec<u16>> {
    let chunks: Vec<&[usize]> = pixels.chunks(PREDICT_CHUNK).collect();
    let parts: Vec<Result<Vec<u16>>> = chunks
        .par_iter()
        .map(|px| {
            let mut params = clf.params.clone();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(patches.batch(px, false));
            let h = clf.net.encoder.forward(&mut tape, &mut params, x, Mode::Eval)?;
            let logits = clf.net.head.forward(&mut tape, &mut params, h, Mode::Eval)?;
            let c = clf.net.n_classes;
            Ok(tape
                .value(logits)
                .data()
                .chunks(c)
                .map(|row| {
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    best as u16 + 1
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(pixels.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Prediction for every pixel of the image, row-major.
pub fn predict_map(clf: &TrainedClassifier, patches: &PatchSource) -> Result<Vec<u16>> {
    let all: Vec<usize> = (0..patches.n_pixels()).collect();
    predict(clf, patches, &all)
}
