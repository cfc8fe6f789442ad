//! Feature-group selection by beam search, scored with a 1-D convolutional
//! classifier whose inputs have the removed groups zeroed.

use std::collections::HashMap;

use hcl_autodiff::{cosine_lr, LayerSpec, Mode, ParamSet, Sequential, Sgd, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decomposition::FeatureCube;
use crate::error::{invalid, Error, Result};
use crate::network::conv1d_trunk_specs;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.01, momentum: 0.9, weight_decay: 1e-4, batch_size: 32, validation_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    /// Number of groups to keep.
    pub theta: usize,
    /// Beam width per round; the last entry repeats.
    pub schedule: Vec<usize>,
    pub classifier: ClassifierTrainConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { theta: 8, schedule: vec![2, 2, 2, 1], classifier: ClassifierTrainConfig::default() }
    }
}

/// Classifier trained once on all features, with its fixed data split.
#[derive(Debug, Clone)]
pub struct FilterClassifier {
    net: Sequential,
    params: ParamSet<f32>,
    pub n_classes: usize,
    pub train: Vec<(usize, u16)>,
    pub validation: Vec<(usize, u16)>,
    /// Accuracy on `validation` with every feature active.
    pub validation_accuracy: f64,
    /// True when the split left no validation pixels and training pixels are scored instead.
    pub scored_on_train: bool,
}

fn inputs(cube: &FeatureCube, pixels: &[(usize, u16)], mask: &[bool]) -> Tensor<f32> {
    let n = cube.n_features();
    let mut data = vec![0.0; pixels.len() * n];
    for (chunk, &(p, _)) in data.chunks_mut(n).zip(pixels) {
        cube.standardized_into(p, mask, chunk);
    }
    Tensor::new(vec![pixels.len(), 1, n], data).expect("input shape")
}

/// Stratified split: per class `round(fraction * n)` validation pixels,
/// keeping at least one for training.
fn split(labeled: &[(usize, u16)], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<(usize, u16)>, Vec<(usize, u16)>) {
    let c = labeled.iter().map(|&(_, l)| l).max().unwrap_or(0) as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 1..=c as u16 {
        let mut members: Vec<(usize, u16)> = labeled.iter().copied().filter(|&(_, l)| l == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let n_val = ((fraction * members.len() as f64).round() as usize).min(members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    (train, val)
}

/// Trains with a sum-of-squares loss against one-hot targets.
/// `labeled` holds `(pixel, class)` pairs with classes in `1..=C`.
pub fn train_filter_classifier(
    cube: &FeatureCube,
    labeled: &[(usize, u16)],
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<FilterClassifier> {
    if labeled.is_empty() {
        return invalid("feature filter needs labeled pixels");
    }
    if let Some(&(p, l)) = labeled.iter().find(|&&(p, l)| l == 0 || p >= cube.n_pixels()) {
        return invalid(format!("labeled pixel {p} with class {l} is not usable"));
    }
    let n_classes = labeled.iter().map(|&(_, l)| l).max().unwrap_or(0) as usize;
    let distinct = (1..=n_classes as u16).filter(|c| labeled.iter().any(|&(_, l)| l == *c)).count();
    if distinct < 2 {
        return invalid("feature filter needs at least two classes among the labeled pixels");
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config { key: "validation_fraction".into(), reason: "must be in [0, 1)".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, validation) = split(labeled, cfg.validation_fraction, &mut rng);
    if train.len() < 2 {
        return invalid("feature filter needs at least two training pixels");
    }
    let n = cube.n_features();
    let (mut specs, flat) = conv1d_trunk_specs(n);
    specs.push(LayerSpec::Linear { in_features: flat, out_features: n_classes });
    let mut params = ParamSet::<f32>::new();
    let net = Sequential::build(&specs, &[1, n], &mut params, "filter", &mut rng)?;
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let full = vec![true; n];
    let mut order = train.clone();
    let b = cfg.batch_size.max(2);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr);
        order.shuffle(&mut rng);
        let mut s = 0;
        while s < order.len() {
            let mut e = (s + b).min(order.len());
            if order.len() - e == 1 {
                e = order.len();
            }
            let chunk = &order[s..e];
            s = e;
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(inputs(cube, chunk, &full));
            let out = net.forward(&mut tape, &mut params, x, Mode::Train)?;
            let mut target = vec![0.0f32; chunk.len() * n_classes];
            for (i, &(_, l)) in chunk.iter().enumerate() {
                target[i * n_classes + l as usize - 1] = 1.0;
            }
            let t = tape.constant(Tensor::new(vec![chunk.len(), n_classes], target)?);
            let diff = tape.sub(out, t)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / chunk.len() as f32);
            let grads = tape.backward(loss)?;
            sgd.step(&mut params, &grads, lr);
        }
    }
    let scored_on_train = validation.is_empty();
    if scored_on_train {
        log::warn!("label split left no validation pixels; the filter scores on its training pixels");
    }
    let mut clf = FilterClassifier {
        net,
        params,
        n_classes,
        train,
        validation,
        validation_accuracy: 0.0,
        scored_on_train,
    };
    clf.validation_accuracy = evaluate_mask(&clf, cube, &full)?;
    Ok(clf)
}

impl FilterClassifier {
    fn scoring_set(&self) -> &[(usize, u16)] {
        if self.scored_on_train {
            &self.train
        } else {
            &self.validation
        }
    }

    /// Predicted class (`1..=C`) for each pixel under `mask`.
    pub fn predict(&self, cube: &FeatureCube, pixels: &[(usize, u16)], mask: &[bool]) -> Result<Vec<u16>> {
        let mut params = self.params.clone();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(inputs(cube, pixels, mask));
        let out = self.net.forward(&mut tape, &mut params, x, Mode::Eval)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(self.n_classes)
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
    }
}

/// Accuracy on the validation split with features outside `mask` zeroed
/// after standardisation; the input length never changes.
pub fn evaluate_mask(clf: &FilterClassifier, cube: &FeatureCube, mask: &[bool]) -> Result<f64> {
    if mask.len() != cube.n_features() {
        return invalid(format!("mask has {} entries for {} features", mask.len(), cube.n_features()));
    }
    let set = clf.scoring_set();
    let pred = clf.predict(cube, set, mask)?;
    let hits = pred.iter().zip(set).filter(|(p, &(_, l))| **p == l).count();
    Ok(hits as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    /// Removed group ids, ascending.
    pub removed: Vec<usize>,
    pub score: f64,
}

impl BeamState {
    fn max_removed(&self) -> Option<usize> {
        self.removed.last().copied()
    }
}

/// Higher score first, then smaller largest removed id, then the
/// lexicographically smaller removed set.
pub fn beam_order(a: &BeamState, b: &BeamState) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.max_removed().cmp(&b.max_removed())).then(a.removed.cmp(&b.removed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub n_groups: usize,
    pub initial_score: f64,
    /// Surviving states after each round.
    pub rounds: Vec<Vec<BeamState>>,
    pub best: BeamState,
}

impl BeamResult {
    pub fn kept_groups(&self) -> Vec<usize> {
        (0..self.n_groups).filter(|g| !self.best.removed.contains(g)).collect()
    }
}

/// Backward elimination over `n_groups` groups down to `theta`, keeping the
/// best `schedule[r]` states per round (last entry repeats). `score` receives
/// an ascending removed set and is called once per distinct set.
pub fn beam_search_groups(
    n_groups: usize,
    theta: usize,
    schedule: &[usize],
    mut score: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<BeamResult> {
    if theta == 0 || theta >= n_groups {
        return Err(Error::Config {
            key: "theta".into(),
            reason: format!("must be in 1..{n_groups} to leave something to remove, got {theta}"),
        });
    }
    if schedule.is_empty() || schedule.contains(&0) {
        return Err(Error::Config { key: "beam".into(), reason: "every beam width must be at least 1".into() });
    }
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut eval = |removed: &[usize]| -> Result<f64> {
        if let Some(&s) = cache.get(removed) {
            return Ok(s);
        }
        let s = score(removed)?;
        cache.insert(removed.to_vec(), s);
        Ok(s)
    };
    let initial_score = eval(&[])?;
    let mut beam = vec![BeamState { removed: Vec::new(), score: initial_score }];
    let mut rounds = Vec::new();
    for round in 0..n_groups - theta {
        let k = schedule[round.min(schedule.len() - 1)];
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        for state in &beam {
            for g in (0..n_groups).filter(|g| !state.removed.contains(g)) {
                let mut r = state.removed.clone();
                r.push(g);
                r.sort_unstable();
                candidates.push(r);
            }
        }
        candidates.sort();
        candidates.dedup();
        let mut scored = Vec::with_capacity(candidates.len());
        for removed in candidates {
            let score = eval(&removed)?;
            scored.push(BeamState { removed, score });
        }
        scored.sort_by(beam_order);
        scored.truncate(k);
        rounds.push(scored.clone());
        beam = scored;
    }
    let best = beam[0].clone();
    Ok(BeamResult { n_groups, initial_score, rounds, best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub result: BeamResult,
    pub group_names: Vec<String>,
    pub mask: Vec<bool>,
}

impl Selection {
    /// Number of features kept.
    pub fn theta_n(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn beam_search(clf: &FilterClassifier, cube: &FeatureCube, cfg: &FilterConfig) -> Result<Selection> {
    let result =
        beam_search_groups(cube.n_groups(), cfg.theta, &cfg.schedule, |removed| evaluate_mask(clf, cube, &cube.mask_without(removed)))?;
    let mask = cube.mask_without(&result.best.removed);
    Ok(Selection { result, group_names: cube.group_names.clone(), mask })
}

fn names(ids: &[usize], all: &[String]) -> String {
    ids.iter().map(|&g| all[g].as_str()).collect::<Vec<_>>().join(",")
}

/// Text report: one block per round, then the kept groups and the feature mask.
pub fn report(sel: &Selection) -> String {
    let r = &sel.result;
    let mut out = String::from("# feature filter report\n");
    out.push_str(&format!("groups = {}\n", r.n_groups));
    out.push_str(&format!("initial_score = {:.6}\n", r.initial_score));
    for (i, round) in r.rounds.iter().enumerate() {
        out.push_str(&format!("round {}\n", i + 1));
        for s in round {
            out.push_str(&format!("  removed = [{}] score = {:.6}\n", names(&s.removed, &sel.group_names), s.score));
        }
    }
    out.push_str(&format!("selected_groups = {}\n", names(&r.kept_groups(), &sel.group_names)));
    out.push_str(&format!("removed_groups = {}\n", names(&r.best.removed, &sel.group_names)));
    out.push_str(&format!("theta_n = {}\n", sel.theta_n()));
    out.push_str(&format!("mask = {}\n", sel.mask.iter().map(|&m| if m { '1' } else { '0' }).collect::<String>()));
    out
}

/// Feature mask recorded in a [`report`].
pub fn parse_report_mask(text: &str) -> Result<Vec<bool>> {
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("mask = "))
        .ok_or_else(|| Error::Format("filter report has no mask line".into()))?;
    line.trim()
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Format(format!("filter report mask has character {c:?}"))),
        })
        .collect()
}
