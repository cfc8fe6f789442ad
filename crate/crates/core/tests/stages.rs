use hcl_autodiff::Checkpoint;
use hclnet::config::PipelineConfig;
use hclnet::decomposition::{assemble_cube, diag_db_group, DiagVariant, FeatureCube};
use hclnet::filter::{evaluate_mask, train_filter_classifier, ClassifierTrainConfig};
use hclnet::pipeline::{prepare, ratio_sweep, sweep_csv};
use hclnet::polsar::*;
use hclnet::superpixel::{default_k, slic, slic_features, SlicParams, SuperpixelMap};
use hclnet::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn two_band(h: usize, w: usize, looks: u32, seed: u64) -> PolSARImage {
    let specs = vec![
        WishartClassSpec::new(1, Hermitian3::diag(1.0, 0.1, 0.05), looks),
        WishartClassSpec::new(2, Hermitian3::diag(0.1, 1.2, 0.3), looks),
    ];
    synthesize_wishart(&specs, &RegionLayout::bands(h, w, 2), seed).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn wishart_sample_mean_matches_sigma() {
    let sigma = Hermitian3 { m11: 1.0, m22: 0.5, m33: 0.8, m12: c(0.2, 0.1), m13: c(0.1, -0.2), m23: c(0.05, 0.15) };
    let img = synthesize_wishart(&[WishartClassSpec::new(1, sigma, 4)], &RegionLayout::uniform(100, 100, 1), 3).unwrap();
    let mean = img.pixels.iter().fold(Hermitian3::ZERO, |a, p| a.add(p)).scale(1.0 / img.len() as f64);
    let (m, s) = (mean.to_reals(), sigma.to_reals());
    for (a, b) in m.iter().zip(&s) {
        // Entries near zero are judged against the diagonal scale.
        assert!((a - b).abs() <= 0.05 * b.abs().max(0.2), "{a} vs {b}");
    }
    assert_eq!(synthesize_wishart(&[WishartClassSpec::new(1, sigma, 4)], &RegionLayout::uniform(100, 100, 1), 3).unwrap(), img);
}

#[test]
fn few_looks_bound_the_rank() {
    let sigma = Hermitian3::diag(1.0, 0.7, 0.4);
    for looks in 1..3u32 {
        let img = synthesize_wishart(&[WishartClassSpec::new(1, sigma, looks)], &RegionLayout::uniform(10, 10, 1), 5).unwrap();
        assert!(img.pixels.iter().all(|p| p.rank(1e-9) <= looks as usize));
    }
}

#[test]
fn cloude_reconstructs_rank_one_targets() {
    let mut r = rng(11);
    for _ in 0..200 {
        let v = [0; 3].map(|_: i32| c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        let t = CoherencyMatrix(Hermitian3::outer(v));
        let got = diag_db_group(&t, DiagVariant::Cloude).unwrap();
        let want = [t.m11, t.m22, t.m33].map(|p| 10.0 * p.max(1e-5).log10());
        for (g, w) in got.iter().zip(&want) {
            let (g, w) = (10f64.powf(g / 10.0), 10f64.powf(w / 10.0));
            assert!((g - w).abs() < 1e-9 * t.trace(), "{g} vs {w}");
        }
    }
}

#[test]
fn slic_separates_two_regions() {
    let img = two_band(64, 64, 4, 2);
    let labels = img.labels.clone().unwrap();
    // Compactness well below the default of 10.
    let map = slic(&slic_features(&img), 64, 64, &SlicParams { k: 16, compactness: 3.0, iters: 10 }).unwrap();
    let pure: usize = map
        .members()
        .iter()
        .filter(|m| m.iter().all(|&p| labels[p] == labels[m[0]]))
        .map(|m| m.len())
        .sum();
    assert!(pure as f64 >= 0.95 * 4096.0, "{pure} pixels in pure superpixels");
}

#[test]
fn sizing_rule_matches_reference_scenes() {
    assert_eq!(default_k(750, 1024), 853);
    assert_eq!(default_k(1200, 1300), 1733);
}

/// Two classes whose first feature group has disjoint supports, a second
/// group of noise.
fn separable_cube(n: usize, seed: u64) -> (FeatureCube, Vec<(usize, u16)>) {
    let mut r = rng(seed);
    let mut data = Vec::new();
    let mut labeled = Vec::new();
    for p in 0..n {
        let class = (p % 2) as u16 + 1;
        let centre = if class == 1 { -2.0 } else { 2.0 };
        for _ in 0..3 {
            data.push(centre + r.random_range(-0.5f32..0.5));
        }
        for _ in 0..4 {
            data.push(r.random_range(-1.0f32..1.0));
        }
        labeled.push((p, class));
    }
    let cube = FeatureCube::new(1, n, vec![0, 0, 0, 1, 1, 1, 1], vec!["signal".into(), "noise".into()], data).unwrap();
    (cube, labeled)
}

#[test]
fn filter_classifier_on_separable_features() {
    let (cube, labeled) = separable_cube(200, 4);
    let cfg = ClassifierTrainConfig::default();
    let clf = train_filter_classifier(&cube, &labeled, &cfg, 9).unwrap();
    assert!(!clf.scored_on_train);
    assert!(clf.validation_accuracy >= 0.99, "{}", clf.validation_accuracy);
    assert_eq!(train_filter_classifier(&cube, &labeled, &cfg, 9).unwrap().validation_accuracy, clf.validation_accuracy);
    assert_eq!(evaluate_mask(&clf, &cube, &[true; 7]).unwrap(), clf.validation_accuracy);

    // Dropping the noise group keeps the score; dropping everything leaves the class prior.
    let noise_off = evaluate_mask(&clf, &cube, &cube.mask_without(&[1])).unwrap();
    assert!((noise_off - clf.validation_accuracy).abs() <= 0.01);
    let prior = {
        let ones = clf.validation.iter().filter(|&&(_, l)| l == 1).count() as f64;
        ones.max(clf.validation.len() as f64 - ones) / clf.validation.len() as f64
    };
    assert!(evaluate_mask(&clf, &cube, &[false; 7]).unwrap() <= prior + 0.05);

    let single: Vec<(usize, u16)> = labeled.iter().map(|&(p, _)| (p, 1)).collect();
    assert!(train_filter_classifier(&cube, &single, &cfg, 9).is_err());
    assert!(train_filter_classifier(&cube, &[], &cfg, 9).is_err());
    assert!(evaluate_mask(&clf, &cube, &[true; 3]).is_err());
}

fn small_cfg(patch: usize, epochs: usize) -> FinetuneConfig {
    FinetuneConfig { patch_size: patch, epochs, ..FinetuneConfig::default() }
}

#[test]
fn full_labels_fit_separable_data() {
    let img = speckle_filter(&two_band(24, 24, 4, 6), 3).unwrap();
    let labels = img.labels.clone().unwrap();
    let patches = PatchSource::new(&img, 7).unwrap();
    let (train, _) = stratified_split(&labels, 1.0, &mut rng(1)).unwrap();
    let clf = finetune(None, &patches, &labels, &train, 2, &small_cfg(7, 50)).unwrap();
    let pred = predict(&clf, &patches, &train).unwrap();
    let acc = train.iter().zip(&pred).filter(|(&p, &y)| labels[p] == y).count() as f64 / train.len() as f64;
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn frozen_encoder_trains_only_the_head() {
    let img = two_band(16, 16, 4, 6);
    let labels = img.labels.clone().unwrap();
    let patches = PatchSource::new(&img, 15).unwrap();
    let train: Vec<usize> = (0..256).step_by(8).collect();
    for classes in [2usize, 3] {
        let cfg = FinetuneConfig { freeze_encoder: true, epochs: 1, ..FinetuneConfig::default() };
        let clf = finetune(None, &patches, &labels, &train, classes, &cfg).unwrap();
        assert_eq!(clf.trainable_scalars(), classes * 129);
    }
}

#[test]
fn finetune_rejects_missing_classes() {
    let img = two_band(16, 16, 4, 6);
    let mut labels = img.labels.clone().unwrap();
    labels.iter_mut().filter(|l| **l == 2).for_each(|l| *l = 0);
    assert!(stratified_split(&labels[..0], 0.5, &mut rng(0)).is_err());
    let holes: Vec<u16> = labels.iter().map(|&l| if l == 1 { 3 } else { l }).collect();
    assert!(stratified_split(&holes, 0.5, &mut rng(0)).is_err());
    assert!(stratified_split(&img.labels.clone().unwrap(), 0.0, &mut rng(0)).is_err());
}

#[test]
fn classifier_checkpoint_round_trip() {
    let img = two_band(12, 12, 4, 3);
    let labels = img.labels.clone().unwrap();
    let patches = PatchSource::new(&img, 7).unwrap();
    let train: Vec<usize> = (0..144).step_by(6).collect();
    let clf = finetune(None, &patches, &labels, &train, 2, &small_cfg(7, 2)).unwrap();
    let bytes = clf.to_checkpoint().to_bytes();
    let back = TrainedClassifier::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap(), 7).unwrap();
    assert_eq!(back.net.n_classes, 2);
    assert_eq!(predict_map(&back, &patches).unwrap(), predict_map(&clf, &patches).unwrap());
    assert!(TrainedClassifier::from_checkpoint(&clf.to_checkpoint(), 15).is_err());
}

#[test]
fn constant_image_predicts_a_constant_map() {
    let t = CoherencyMatrix(Hermitian3::diag(1.0, 0.5, 0.2));
    let img = PolSARImage::new(12, 12, vec![t; 144]).unwrap();
    let labels: Vec<u16> = (0..144).map(|p| (p % 2) as u16 + 1).collect();
    let patches = PatchSource::new(&img, 7).unwrap();
    let clf = finetune(None, &patches, &labels, &(0..20).collect::<Vec<_>>(), 2, &small_cfg(7, 3)).unwrap();
    let map = predict_map(&clf, &patches).unwrap();
    assert_eq!(map.len(), 144);
    assert!(map.iter().all(|&l| l == map[0]));
}

#[test]
fn two_region_map_is_pure_after_finetuning() {
    let img = speckle_filter(&two_band(32, 32, 4, 8), 3).unwrap();
    let labels = img.labels.clone().unwrap();
    let patches = PatchSource::new(&img, 7).unwrap();
    let (train, _) = stratified_split(&labels, 0.05, &mut rng(2)).unwrap();
    let clf = finetune(None, &patches, &labels, &train, 2, &small_cfg(7, 50)).unwrap();
    let map = predict_map(&clf, &patches).unwrap();
    let agree = map.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / 1024.0;
    assert!(agree >= 0.9, "purity {agree}");
}

struct Setup {
    img: PolSARImage,
    cube: FeatureCube,
    map: SuperpixelMap,
}

fn setup(size: usize, seed: u64) -> Setup {
    let cfg = PipelineConfig::default();
    let raw = synthesize_scene(&SceneSpec::new(3, size), seed).unwrap();
    let p = prepare(&raw, &[], &cfg).unwrap();
    Setup { img: p.image, cube: p.cube, map: p.map }
}

fn pretrain_cfg(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig { epochs, seed, ..PretrainConfig::default() }
}

/// Mean loss of random unit embeddings, one pixel per group.
fn monte_carlo_uniform_loss(b: usize, d: usize, tau: f64, trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut unit = || {
        let v: Vec<f64> = (0..d).map(|_| r.sample(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let ids: Vec<u32> = (0..b as u32).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        let q: Vec<Vec<f64>> = (0..b).map(|_| unit()).collect();
        let k: Vec<Vec<f64>> = (0..b).map(|_| unit()).collect();
        total += hclnet::contrastive::superpixel_info_nce(&q, &k, &ids, tau).unwrap();
    }
    total / trials as f64
}

#[test]
fn first_step_loss_is_near_the_uniform_value() {
    let s = setup(64, 3);
    let cfg = PretrainConfig { tau: 1.0, ..pretrain_cfg(1, 5) };
    let out = pretrain(&s.img, &s.cube, &s.map, &cfg, None, |_| Ok(())).unwrap();
    let b = out.report.batch_size;
    let oracle = monte_carlo_uniform_loss(b, 64, 1.0, 400, 1);
    let closed = (b as f64).ln() / (b - 1) as f64;
    assert!((oracle - closed).abs() < 0.1 * closed, "oracle {oracle} vs {closed}");
    let first = out.report.first_step_loss;
    assert!(first >= 0.5 * oracle && first <= 2.0 * oracle, "first loss {first}, oracle {oracle}");
}

#[test]
fn pretraining_loss_falls() {
    let s = setup(128, 4);
    let out = pretrain(&s.img, &s.cube, &s.map, &pretrain_cfg(10, 4), None, |_| Ok(())).unwrap();
    let l = &out.report.epoch_losses;
    assert_eq!(l.len(), 10);
    assert_eq!(out.report.pool_size, 1638);
    assert_eq!(out.report.batch_size, s.map.count.min(4096));
    assert_eq!(out.report.steps_per_epoch, 1638usize.div_ceil(out.report.batch_size));
    let drops = l.windows(2).filter(|w| w[1] < w[0]).count() + usize::from(l[0] < out.report.first_step_loss);
    assert!(drops >= 8, "losses {l:?}");
}

#[test]
fn checkpoints_are_reproducible_and_resumable() {
    let s = setup(48, 6);
    let cfg = pretrain_cfg(4, 2);
    let mut saved = Vec::new();
    let full = pretrain(&s.img, &s.cube, &s.map, &cfg, None, |ck| {
        saved.push(ck.to_bytes());
        Ok(())
    })
    .unwrap();
    let bytes = full.checkpoint.to_bytes();
    assert_eq!(saved.len(), 4);
    assert_eq!(saved[3], bytes);
    let again = pretrain(&s.img, &s.cube, &s.map, &cfg, None, |_| Ok(())).unwrap();
    assert_eq!(again.checkpoint.to_bytes(), bytes);

    let mid = Checkpoint::from_bytes(&saved[1]).unwrap();
    assert_eq!(mid.epoch, 2);
    let resumed = pretrain(&s.img, &s.cube, &s.map, &cfg, Some(&mid), |_| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes(), bytes);
    assert_eq!(resumed.report.epoch_losses, full.report.epoch_losses[2..]);
}

#[test]
fn siamese_and_oracle_modes_run() {
    let s = setup(48, 7);
    for (arch, mode) in [("siamese", "superpixel"), ("heterogeneous", "label-oracle"), ("heterogeneous", "vanilla")] {
        let cfg = PretrainConfig { architecture: arch.parse().unwrap(), sampling_mode: mode.parse().unwrap(), batch_size: 64, ..pretrain_cfg(1, 1) };
        let out = pretrain(&s.img, &s.cube, &s.map, &cfg, None, |_| Ok(())).unwrap();
        assert!(out.report.epoch_losses[0].is_finite());
    }
    let huge = PretrainConfig { tau: 0.0, ..pretrain_cfg(1, 1) };
    assert!(pretrain(&s.img, &s.cube, &s.map, &huge, None, |_| Ok(())).is_err());
}

#[test]
fn trivial_sweep_is_accurate_and_reproducible() {
    let raw = two_band(24, 24, 8, 12);
    let mut cfg = PipelineConfig::default();
    for (k, v) in [("epochs", "2"), ("patch_size", "7"), ("speckle_window", "3"), ("feature_filter", "false"), ("seed", "5"), ("slic_k", "9")] {
        cfg.set(k, v).unwrap();
    }
    let prepared = prepare(&raw, &[], &cfg).unwrap();
    let rows = ratio_sweep(&prepared, &cfg, &[1.0], &[0.5]).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.metrics.oa >= 0.99, "{} OA {}", r.method, r.metrics.oa);
    }
    let csv = sweep_csv(&rows);
    assert_eq!(sweep_csv(&ratio_sweep(&prepared, &cfg, &[1.0], &[0.5]).unwrap()), csv);
    assert!(csv.starts_with("labeled_ratio,unlabeled_ratio,method,oa,aa,kappa,seed\n"));
    assert!(ratio_sweep(&prepared, &cfg, &[0.0], &[0.5]).is_err());
}

#[test]
fn cube_layout_with_ingested_groups() {
    let img = two_band(6, 6, 2, 1);
    let cube = assemble_cube(&img, &[hclnet::pipeline::auxiliary_groups(6, 6, 2).unwrap()]).unwrap();
    assert_eq!((cube.n_features(), cube.n_groups()), (70, 14));
    let wrong = hclnet::pipeline::auxiliary_groups(5, 6, 2).unwrap();
    assert!(assemble_cube(&img, &[wrong]).is_err());
    let dup = hclnet::pipeline::auxiliary_groups(6, 6, 2).unwrap();
    assert!(assemble_cube(&img, &[dup.clone(), dup]).is_err());
}
