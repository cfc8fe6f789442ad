//! End-to-end orchestration: speckle filtering, decomposition, superpixels,
//! feature filtering, pretraining, fine-tuning and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::decomposition::{assemble_cube, FeatureCube};
use crate::error::{invalid, Result};
use crate::filter::{beam_search, train_filter_classifier, Selection};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::polsar::{speckle_filter, PolSARImage};
use crate::superpixel::{slic, slic_features, SuperpixelMap};
use crate::train::{finetune, predict_map, pretrain, stratified_split, PatchSource, PretrainOutcome, TrainedClassifier};

/// Independent stream seed for a named stage.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with the master seed by splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const AUX_GROUP_SIZES: [usize; 8] = [4, 3, 6, 6, 3, 7, 7, 6];

/// Stand-in for externally supplied decomposition groups: eight groups of
/// standard-normal values carrying no class information. Together with the
/// six native groups they give the 14-group, 70-feature layout.
pub fn auxiliary_groups(height: usize, width: usize, seed: u64) -> Result<FeatureCube> {
    let index: Vec<u16> =
        AUX_GROUP_SIZES.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g as u16, s)).collect();
    let names = (1..=AUX_GROUP_SIZES.len()).map(|i| format!("aux{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * index.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureCube::new(height, width, index, names, data)
}

/// Inputs shared by every training stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Speckle-filtered image, labels kept.
    pub image: PolSARImage,
    pub cube: FeatureCube,
    pub map: SuperpixelMap,
}

pub fn prepare(img: &PolSARImage, extra: &[FeatureCube], cfg: &PipelineConfig) -> Result<Prepared> {
    let image = speckle_filter(img, cfg.speckle_window)?;
    let cube = assemble_cube(&image, extra)?;
    let map = slic(&slic_features(&image), image.height, image.width, &cfg.slic(image.height, image.width))?;
    log::info!("prepared {}x{} image: {} features in {} groups, {} superpixels", image.height, image.width, cube.n_features(), cube.n_groups(), map.count);
    Ok(Prepared { image, cube, map })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Predicted class of every pixel.
    pub map: Vec<u16>,
}

/// Scores `clf` on the labeled pixels listed in `test`.
pub fn evaluate(clf: &TrainedClassifier, patches: &PatchSource, labels: &[u16], test: &[usize], n_classes: usize) -> Result<Evaluation> {
    let map = predict_map(clf, patches)?;
    let truth: Vec<u16> = test.iter().map(|&p| labels[p]).collect();
    let pred: Vec<u16> = test.iter().map(|&p| map[p]).collect();
    let confusion = ConfusionMatrix::from_labels(&truth, &pred, n_classes)?;
    let metrics = confusion.metrics()?;
    Ok(Evaluation { confusion, metrics, map })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub selection: Option<Selection>,
    pub pretrain: PretrainOutcome,
    pub pretrained: Evaluation,
    pub baseline: Evaluation,
    pub train_pixels: Vec<usize>,
    pub test_pixels: Vec<usize>,
}

/// Fine-tuning and test pixels for `cfg`. When every labeled pixel is used
/// for training the test list repeats the training pixels.
pub fn split_labels(labels: &[u16], cfg: &PipelineConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "labels"));
    let (train, mut test) = stratified_split(labels, cfg.label_fraction, &mut rng)?;
    if test.is_empty() {
        log::warn!("every labeled pixel is used for training; scoring on the training set");
        test = train.clone();
    }
    Ok((train, test))
}

/// Feature-group selection from the fine-tuning pixels, or from a separate
/// split when `filter_label_fraction` is set.
pub fn select_features(cube: &FeatureCube, labels: &[u16], train_pixels: &[usize], cfg: &PipelineConfig) -> Result<Selection> {
    let filter_pixels = if cfg.filter_label_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "filter-labels"));
        stratified_split(labels, cfg.filter_label_fraction, &mut rng)?.0
    } else {
        train_pixels.to_vec()
    };
    let labeled: Vec<(usize, u16)> = filter_pixels.iter().map(|&p| (p, labels[p])).collect();
    let fcfg = cfg.filter();
    let clf = train_filter_classifier(cube, &labeled, &fcfg.classifier, derive_seed(cfg.seed, "filter"))?;
    let sel = beam_search(&clf, cube, &fcfg)?;
    log::info!("feature filter kept {} of {} features", sel.theta_n(), cube.n_features());
    Ok(sel)
}

/// Splits labels, optionally filters features, pretrains, then fine-tunes
/// both from the checkpoint and from scratch with the same head seed.
pub fn run_experiment(prepared: &Prepared, cfg: &PipelineConfig) -> Result<Experiment> {
    let labels = match &prepared.image.labels {
        Some(l) => l.as_slice(),
        None => return invalid("experiments need a label raster"),
    };
    let n_classes = prepared.image.num_classes();
    let (train_pixels, test_pixels) = split_labels(labels, cfg)?;
    let mut cube = prepared.cube.clone();
    let selection = if cfg.feature_filter {
        let sel = select_features(&cube, labels, &train_pixels, cfg)?;
        cube.set_mask(sel.mask.clone())?;
        Some(sel)
    } else {
        None
    };
    let outcome = pretrain(&prepared.image, &cube, &prepared.map, &cfg.pretrain(derive_seed(cfg.seed, "pretrain")), None, |_| Ok(()))?;
    let patches = PatchSource::new(&prepared.image, cfg.patch_size)?;
    let ft = cfg.finetune(derive_seed(cfg.seed, "finetune"));
    let (with, without) = rayon::join(
        || finetune(Some(&outcome.checkpoint), &patches, labels, &train_pixels, n_classes, &ft),
        || finetune(None, &patches, labels, &train_pixels, n_classes, &ft),
    );
    let pretrained = evaluate(&with?, &patches, labels, &test_pixels, n_classes)?;
    let baseline = evaluate(&without?, &patches, labels, &test_pixels, n_classes)?;
    log::info!("OA pretrained {:.4} baseline {:.4}", pretrained.metrics.oa, baseline.metrics.oa);
    Ok(Experiment { selection, pretrain: outcome, pretrained, baseline, train_pixels, test_pixels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub labeled_ratio: f64,
    pub unlabeled_ratio: f64,
    pub method: &'static str,
    pub metrics: Metrics,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "labeled_ratio,unlabeled_ratio,method,oa,aa,kappa,seed";

/// One pretrained and one baseline row per `(labeled, unlabeled)` pair. Each
/// pair runs with its own seed derived from the master seed.
pub fn ratio_sweep(prepared: &Prepared, cfg: &PipelineConfig, labeled: &[f64], unlabeled: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(r) = labeled.iter().chain(unlabeled).find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return invalid(format!("ratio {r} outside (0, 1]"));
    }
    let pairs: Vec<(f64, f64)> = labeled.iter().flat_map(|&l| unlabeled.iter().map(move |&u| (l, u))).collect();
    let runs: Vec<Result<Vec<SweepRow>>> = pairs
        .par_iter()
        .map(|&(l, u)| {
            let seed = derive_seed(cfg.seed, &format!("sweep:{l}:{u}"));
            let run_cfg = PipelineConfig { label_fraction: l, unlabeled_fraction: u, seed, ..cfg.clone() };
            let e = run_experiment(prepared, &run_cfg)?;
            Ok(vec![
                SweepRow { labeled_ratio: l, unlabeled_ratio: u, method: "pretrained", metrics: e.pretrained.metrics, seed },
                SweepRow { labeled_ratio: l, unlabeled_ratio: u, method: "baseline", metrics: e.baseline.metrics, seed },
            ])
        })
        .collect();
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.labeled_ratio, r.unlabeled_ratio, r.method, r.metrics.oa, r.metrics.aa, r.metrics.kappa, r.seed
        ));
    }
    out
}
