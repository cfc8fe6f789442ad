//! `hclnet`: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 2 on invalid input or config, 1 on runtime
//! failure. `HCL_THREADS` caps the worker pool.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcl_autodiff::Checkpoint;
use hclnet::config::PipelineConfig;
use hclnet::decomposition::{assemble_cube, FeatureCube};
use hclnet::error::{Error, Result};
use hclnet::filter::{parse_report_mask, report};
use hclnet::io::{decode_pftc, decode_plbl, decode_pspx, decode_pt3r, encode_pftc, encode_plbl, encode_pspx, encode_pt3r};
use hclnet::metrics::{render_map, ConfusionMatrix, Metrics, DEFAULT_PALETTE};
use hclnet::pipeline::{self, auxiliary_groups, derive_seed, prepare, ratio_sweep, select_features, split_labels, sweep_csv};
use hclnet::polsar::{speckle_filter, synthesize_scene, PolSARImage, SceneSpec};
use hclnet::superpixel::{slic, slic_features};
use hclnet::train::{finetune, pretrain, PatchSource, TrainedClassifier};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "hclnet", version, about = "PolSAR contrastive pretraining and few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable; overrides the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Manifest path [default: first output + .manifest.json].
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a labeled Wishart scene.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Height and width.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        regions_per_class: usize,
        #[arg(long, default_value_t = 2)]
        looks: u32,
        /// 1 keeps the class covariances apart, 0 merges them.
        #[arg(long, default_value_t = 0.5)]
        contrast: f64,
        /// Spread of per-region brightness, in decades.
        #[arg(long, default_value_t = 1.5)]
        texture: f64,
        /// Coherency raster (.pt3r).
        #[arg(long)]
        out: PathBuf,
        /// Label map (.plbl).
        #[arg(long)]
        out_labels: PathBuf,
        /// Also write eight uninformative feature groups (.pftc).
        #[arg(long)]
        out_aux: Option<PathBuf>,
    },
    /// Speckle-filter a raster and build its feature cube.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        /// Externally computed feature groups to append (.pftc), repeatable.
        #[arg(long)]
        extra: Vec<PathBuf>,
        #[arg(long)]
        speckle_window: Option<String>,
        /// Feature cube (.pftc).
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a (speckle-filtered) raster into superpixels.
    Slic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        /// Requested superpixel count; 0 sizes them at about 30x30.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        compactness: Option<String>,
        #[arg(long)]
        iters: Option<String>,
        /// Superpixel map (.pspx).
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-search the feature groups and write a selection report.
    FilterFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        theta: Option<String>,
        /// Beam width per round, comma separated; the last one repeats.
        #[arg(long)]
        beam: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining; the checkpoint is rewritten after every epoch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Filter report whose mask selects the cube features.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Labels, needed only for label-oracle sampling.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<String>,
        /// Checkpoint (.pckp).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a classifier, from a pretraining checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Pretraining checkpoint; omit for the supervised baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        label_fraction: Option<String>,
        /// Classifier checkpoint (.pckp).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a classifier on the held-out labels, or a prediction map on all labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Ground truth (.plbl).
        #[arg(long)]
        labels: PathBuf,
        /// Predicted labels (.plbl) to score directly.
        #[arg(long, conflicts_with_all = ["classifier", "raster"])]
        prediction: Option<PathBuf>,
        #[arg(long, requires = "classifier")]
        raster: Option<PathBuf>,
        #[arg(long, requires = "raster")]
        classifier: Option<PathBuf>,
        /// OA, AA and Kappa as CSV.
        #[arg(long)]
        out_metrics: Option<PathBuf>,
        /// Confusion matrix as CSV.
        #[arg(long)]
        out_confusion: Option<PathBuf>,
        /// Predicted class of every pixel (.plbl).
        #[arg(long)]
        out_map: Option<PathBuf>,
    },
    /// Pretrained versus baseline accuracy over a grid of label ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        extra: Vec<PathBuf>,
        /// Labeled ratios, comma separated.
        #[arg(long, default_value = "0.001,0.005,0.01,0.025,0.05,0.1")]
        labeled: String,
        /// Unlabeled ratios, comma separated.
        #[arg(long, default_value = "0.1")]
        unlabeled: String,
        /// CSV table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Colour a label map as a binary PPM.
    RenderMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HCL_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config {
        key: "HCL_THREADS".into(),
        reason: format!("must be a positive integer, got {v:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))
}

/// Default, then the config file, then `--set` and command flags, then
/// `--seed`. Opens a manifest that records the config file.
fn start(command: &str, common: &Common, flags: &[(&str, &Option<String>)]) -> Result<(PipelineConfig, Manifest)> {
    let mut cfg = PipelineConfig::default();
    let mut m = Manifest::new(command);
    if let Some(path) = &common.config {
        let text = String::from_utf8(m.read(path)?).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config { key: kv.clone(), reason: "expected KEY=VALUE".into() })?;
        cfg.set(k.trim(), v)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    m.set_config(&cfg);
    Ok((cfg, m))
}

fn load_image(m: &mut Manifest, raster: &Path, labels: Option<&Path>) -> Result<PolSARImage> {
    let img = decode_pt3r(&m.read(raster)?)?;
    match labels {
        None => Ok(img),
        Some(p) => {
            let (h, w, l) = decode_plbl(&m.read(p)?)?;
            if (h, w) != (img.height, img.width) {
                return Err(Error::Invalid(format!("label map is {h}x{w} but raster is {}x{}", img.height, img.width)));
            }
            img.with_labels(l)
        }
    }
}

fn load_labels(m: &mut Manifest, path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    decode_plbl(&m.read(path)?)
}

fn load_checkpoint(m: &mut Manifest, path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::read_from(&mut m.read(path)?.as_slice())?)
}

fn parse_ratios(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config { key: key.into(), reason: format!("{t:?} is not a number") })
        })
        .collect()
}

fn metrics_csv(m: &Metrics) -> String {
    format!("oa,aa,kappa\n{:.6},{:.6},{:.6}\n", m.oa, m.aa, m.kappa)
}

fn done(m: &Manifest, common: &Common) -> Result<()> {
    let path = m.finish(common.manifest.as_deref())?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, classes, size, regions_per_class, looks, contrast, texture, out, out_labels, out_aux } => {
            let (cfg, mut m) = start("synth", &common, &[])?;
            let spec = SceneSpec { classes, height: size, width: size, regions_per_class, looks, contrast, texture };
            let img = synthesize_scene(&spec, derive_seed(cfg.seed, "synth"))?;
            m.write(&out, &encode_pt3r(&img))?;
            let labels = img.labels.as_deref().expect("synthetic scenes are labeled");
            m.write(&out_labels, &encode_plbl(size, size, labels))?;
            if let Some(path) = out_aux {
                let aux = auxiliary_groups(size, size, derive_seed(cfg.seed, "aux"))?;
                m.write(&path, &encode_pftc(&aux))?;
            }
            done(&m, &common)
        }
        Command::Decompose { common, raster, extra, speckle_window, out } => {
            let (cfg, mut m) = start("decompose", &common, &[("speckle_window", &speckle_window)])?;
            let img = speckle_filter(&load_image(&mut m, &raster, None)?, cfg.speckle_window)?;
            let extras = extra.iter().map(|p| decode_pftc(&m.read(p)?)).collect::<Result<Vec<FeatureCube>>>()?;
            let cube = assemble_cube(&img, &extras)?;
            println!("{} features in {} groups", cube.n_features(), cube.n_groups());
            m.write(&out, &encode_pftc(&cube))?;
            done(&m, &common)
        }
        Command::Slic { common, raster, k, compactness, iters, out } => {
            let flags = [("slic_k", &k), ("compactness", &compactness), ("slic_iters", &iters)];
            let (cfg, mut m) = start("slic", &common, &flags)?;
            let img = speckle_filter(&load_image(&mut m, &raster, None)?, cfg.speckle_window)?;
            let map = slic(&slic_features(&img), img.height, img.width, &cfg.slic(img.height, img.width))?;
            println!("{} superpixels", map.count);
            m.write(&out, &encode_pspx(&map))?;
            done(&m, &common)
        }
        Command::FilterFeatures { common, cube, labels, theta, beam, out } => {
            let (cfg, mut m) = start("filter-features", &common, &[("theta", &theta), ("beam", &beam)])?;
            let cube = decode_pftc(&m.read(&cube)?)?;
            let (h, w, labels) = load_labels(&mut m, &labels)?;
            if (h, w) != (cube.height, cube.width) {
                return Err(Error::Invalid(format!("label map is {h}x{w} but cube is {}x{}", cube.height, cube.width)));
            }
            let (train, _) = split_labels(&labels, &cfg)?;
            let sel = select_features(&cube, &labels, &train, &cfg)?;
            let text = report(&sel);
            print!("{text}");
            m.write(&out, text.as_bytes())?;
            done(&m, &common)
        }
        Command::Pretrain { common, raster, cube, map, report, labels, resume, epochs, out } => {
            let (cfg, mut m) = start("pretrain", &common, &[("epochs", &epochs)])?;
            let img = speckle_filter(&load_image(&mut m, &raster, labels.as_deref())?, cfg.speckle_window)?;
            let mut cube = decode_pftc(&m.read(&cube)?)?;
            let map = decode_pspx(&m.read(&map)?)?;
            match &report {
                Some(path) => {
                    let text = String::from_utf8_lossy(&m.read(path)?).into_owned();
                    cube.set_mask(parse_report_mask(&text)?)?;
                }
                None => log::info!("no filter report given; using all {} features", cube.n_features()),
            }
            let resume = resume.map(|p| load_checkpoint(&mut m, &p)).transpose()?;
            let pcfg = cfg.pretrain(derive_seed(cfg.seed, "pretrain"));
            let outcome = pretrain(&img, &cube, &map, &pcfg, resume.as_ref(), |ck| {
                hclnet::io::write_atomic(&out, &ck.to_bytes())?;
                log::info!("epoch {} checkpoint written to {}", ck.epoch, out.display());
                Ok(())
            })?;
            let r = &outcome.report;
            println!("pool {} pixels, batch {}, {} steps per epoch", r.pool_size, r.batch_size, r.steps_per_epoch);
            for (i, loss) in r.epoch_losses.iter().enumerate() {
                println!("epoch {} loss {loss:.6}", outcome.checkpoint.epoch as usize - r.epoch_losses.len() + i + 1);
            }
            m.write(&out, &outcome.checkpoint.to_bytes())?;
            done(&m, &common)
        }
        Command::Finetune { common, raster, labels, checkpoint, label_fraction, out } => {
            let (cfg, mut m) = start("finetune", &common, &[("label_fraction", &label_fraction)])?;
            let img = speckle_filter(&load_image(&mut m, &raster, Some(&labels))?, cfg.speckle_window)?;
            let truth = img.labels.clone().expect("labels attached");
            let ck = checkpoint.map(|p| load_checkpoint(&mut m, &p)).transpose()?;
            let (train, _) = split_labels(&truth, &cfg)?;
            let patches = PatchSource::new(&img, cfg.patch_size)?;
            let ft = cfg.finetune(derive_seed(cfg.seed, "finetune"));
            let clf = finetune(ck.as_ref(), &patches, &truth, &train, img.num_classes(), &ft)?;
            println!("fine-tuned on {} labeled pixels ({})", train.len(), if ck.is_some() { "pretrained" } else { "from scratch" });
            m.write(&out, &clf.to_checkpoint().to_bytes())?;
            done(&m, &common)
        }
        Command::Evaluate { common, labels, prediction, raster, classifier, out_metrics, out_confusion, out_map } => {
            let (cfg, mut m) = start("evaluate", &common, &[])?;
            let (h, w, eval) = match (prediction, raster, classifier) {
                (Some(pred_path), _, _) => {
                    let (h, w, truth) = load_labels(&mut m, &labels)?;
                    let (ph, pw, pred) = load_labels(&mut m, &pred_path)?;
                    if (ph, pw) != (h, w) {
                        return Err(Error::Invalid(format!("prediction is {ph}x{pw} but labels are {h}x{w}")));
                    }
                    let test: Vec<usize> = (0..truth.len()).filter(|&p| truth[p] > 0).collect();
                    let n = truth.iter().chain(&pred).copied().max().unwrap_or(0) as usize;
                    let t: Vec<u16> = test.iter().map(|&p| truth[p]).collect();
                    let q: Vec<u16> = test.iter().map(|&p| pred[p]).collect();
                    let confusion = ConfusionMatrix::from_labels(&t, &q, n)?;
                    let metrics = confusion.metrics()?;
                    (h, w, pipeline::Evaluation { confusion, metrics, map: pred })
                }
                (None, Some(raster), Some(clf_path)) => {
                    let img = speckle_filter(&load_image(&mut m, &raster, Some(&labels))?, cfg.speckle_window)?;
                    let truth = img.labels.clone().expect("labels attached");
                    let clf = TrainedClassifier::from_checkpoint(&load_checkpoint(&mut m, &clf_path)?, cfg.patch_size)?;
                    let (_, test) = split_labels(&truth, &cfg)?;
                    let patches = PatchSource::new(&img, cfg.patch_size)?;
                    let n = img.num_classes().max(clf.net.n_classes);
                    (img.height, img.width, pipeline::evaluate(&clf, &patches, &truth, &test, n)?)
                }
                _ => return Err(Error::Invalid("give --prediction, or --raster with --classifier".into())),
            };
            let mt = &eval.metrics;
            println!("OA {:.6} AA {:.6} Kappa {:.6} over {} pixels", mt.oa, mt.aa, mt.kappa, eval.confusion.total());
            if let Some(p) = out_metrics {
                m.write(&p, metrics_csv(mt).as_bytes())?;
            }
            if let Some(p) = out_confusion {
                m.write(&p, eval.confusion.to_csv().as_bytes())?;
            }
            if let Some(p) = out_map {
                m.write(&p, &encode_plbl(h, w, &eval.map))?;
            }
            done(&m, &common)
        }
        Command::Sweep { common, raster, labels, extra, labeled, unlabeled, out } => {
            let (cfg, mut m) = start("sweep", &common, &[])?;
            let labeled = parse_ratios("labeled", &labeled)?;
            let unlabeled = parse_ratios("unlabeled", &unlabeled)?;
            let img = load_image(&mut m, &raster, Some(&labels))?;
            let extras = extra.iter().map(|p| decode_pftc(&m.read(p)?)).collect::<Result<Vec<FeatureCube>>>()?;
            let prepared = prepare(&img, &extras, &cfg)?;
            let csv = sweep_csv(&ratio_sweep(&prepared, &cfg, &labeled, &unlabeled)?);
            print!("{csv}");
            m.write(&out, csv.as_bytes())?;
            done(&m, &common)
        }
        Command::RenderMap { common, labels, out } => {
            let (_, mut m) = start("render-map", &common, &[])?;
            let (h, w, l) = load_labels(&mut m, &labels)?;
            m.write(&out, &render_map(&l, h, w, &DEFAULT_PALETTE)?)?;
            done(&m, &common)
        }
    }
}
