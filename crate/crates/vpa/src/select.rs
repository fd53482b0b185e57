//! Plan quality scoring: a 1-step transition classifier, a connected-component
//! object counter, and the combined autoselection score that picks one plan
//! among many.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::cigan::{pairs_to_batch, sample_prior, CiganBundle};
use crate::data::TrajectoryDataset;
use crate::env::ObservationImage;
use crate::error::{Result, VpaError};
use crate::io::{bytes_to_f32s, f32s_to_bytes, param_tag, Container, ContainerWriter};
use crate::nn::{Adam, Conv2d, Dense, ParamStore, Session};
use crate::planner::VisualPlan;

const CLASSIFIER_MAGIC: &[u8; 8] = b"VPACLS\0\0";
const CLASSIFIER_VERSION: u32 = 1;

/// Movable-object intensity threshold for the object counter (> 0.75).
pub const OBJECT_INTENSITY_THRESHOLD: u8 = 192;
/// Default minimum component area in pixels.
pub const DEFAULT_MIN_AREA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    /// Positives: real consecutive pairs. Negatives: frames from distinct
    /// random records.
    Autoselect,
    /// Positives: real consecutive pairs with small additive noise.
    /// Negatives: generator samples with independent latents.
    Prune,
}

impl std::str::FromStr for ClassifierMode {
    type Err = VpaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoselect" => Ok(ClassifierMode::Autoselect),
            "prune" => Ok(ClassifierMode::Prune),
            other => Err(VpaError::Config(format!("unknown classifier mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub resolution: usize,
    #[serde(default = "base_filters_default")]
    pub base_filters: usize,
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    #[serde(default = "lr_default")]
    pub lr: f64,
    /// Amplitude of the uniform pixel perturbation on prune-mode positives.
    #[serde(default = "noise_default")]
    pub positive_noise: f64,
    #[serde(default = "holdout_default")]
    pub holdout_fraction: f64,
}

fn base_filters_default() -> usize {
    16
}
fn epochs_default() -> usize {
    3
}
fn batch_default() -> usize {
    64
}
fn lr_default() -> f64 {
    1e-3
}
fn noise_default() -> f64 {
    0.05
}
fn holdout_default() -> f64 {
    0.1
}

impl ClassifierConfig {
    pub fn new(resolution: usize) -> Self {
        ClassifierConfig {
            resolution,
            base_filters: base_filters_default(),
            epochs: epochs_default(),
            batch_size: batch_default(),
            lr: lr_default(),
            positive_noise: noise_default(),
            holdout_fraction: holdout_default(),
        }
    }
}

/// Pair-scoring network: two stacked frames in, probability of a real 1-step
/// transition out.
#[derive(Debug, Clone)]
pub struct TransitionClassifierParams {
    pub convs: Vec<Conv2d>,
    pub fc: Dense,
    pub store: ParamStore<f32>,
    pub config: ClassifierConfig,
    pub mode: ClassifierMode,
    pub holdout_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierWiring {
    convs: Vec<Conv2d>,
    fc: Dense,
    config: ClassifierConfig,
    mode: ClassifierMode,
    holdout_auc: f64,
    params: Vec<(String, Vec<usize>)>,
}

fn build_net(
    config: &ClassifierConfig,
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
) -> (Vec<Conv2d>, Dense) {
    let depth = (config.resolution / 4).trailing_zeros() as usize;
    let mut convs = Vec::new();
    let mut in_ch = 2;
    let mut ch = config.base_filters;
    for i in 0..depth {
        convs.push(Conv2d::new(store, rng, &format!("cls.c{i}"), in_ch, ch, 4, 2, 1, false));
        in_ch = ch;
        ch *= 2;
    }
    let fc = Dense::new(store, rng, "cls.fc", in_ch * 16, 1);
    (convs, fc)
}

impl TransitionClassifierParams {
    fn logits(&self, batch: &Array4<f32>) -> Vec<f64> {
        let mut sess = Session::new(&self.store);
        let x = sess.input(batch.clone().into_dyn());
        let v = forward_logits(&self.convs, &self.fc, &self.store, &mut sess, x);
        sess.value(v).iter().map(|&l| l as f64).collect()
    }

    /// Scores in [0,1] for a batch of frame pairs.
    pub fn score_pairs(&self, pairs: &[(&ObservationImage, &ObservationImage)]) -> Vec<f64> {
        let batch: Array4<f32> = pairs_to_batch(pairs);
        self.logits(&batch)
            .into_iter()
            .map(|l| 1.0 / (1.0 + (-l).exp()))
            .collect()
    }

    pub fn score(&self, a: &ObservationImage, b: &ObservationImage) -> f64 {
        self.score_pairs(&[(a, b)])[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let wiring = ClassifierWiring {
            convs: self.convs.clone(),
            fc: self.fc.clone(),
            config: self.config.clone(),
            mode: self.mode,
            holdout_auc: self.holdout_auc,
            params: self
                .store
                .iter()
                .map(|(_, n, v)| (n.to_string(), v.shape().to_vec()))
                .collect(),
        };
        let manifest = serde_json::to_string_pretty(&wiring)
            .map_err(|e| VpaError::format("manifest", e.to_string()))?;
        let mut w = ContainerWriter::create(path, CLASSIFIER_MAGIC, CLASSIFIER_VERSION, &manifest)?;
        for (i, (_, _, v)) in self.store.iter().enumerate() {
            let flat: Vec<f32> = v.iter().copied().collect();
            w.section(&param_tag(i), &f32s_to_bytes(&flat))?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::open(path, CLASSIFIER_MAGIC)?;
        let wiring: ClassifierWiring = serde_json::from_str(&c.manifest)
            .map_err(|e| VpaError::format("manifest", e.to_string()))?;
        let mut store = ParamStore::<f32>::new();
        for (i, (name, shape)) in wiring.params.iter().enumerate() {
            let bytes = c.take(&param_tag(i))?;
            let flat = bytes_to_f32s(&bytes, name)?;
            let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), flat)
                .map_err(|e| VpaError::format(name, e.to_string()))?;
            store.add(name.clone(), arr);
        }
        Ok(TransitionClassifierParams {
            convs: wiring.convs,
            fc: wiring.fc,
            store,
            config: wiring.config,
            mode: wiring.mode,
            holdout_auc: wiring.holdout_auc,
        })
    }
}

fn forward_logits(
    convs: &[Conv2d],
    fc: &Dense,
    store: &ParamStore<f32>,
    sess: &mut Session<f32>,
    x: crate::nn::Var,
) -> crate::nn::Var {
    let mut h = x;
    for c in convs {
        let y = c.forward(store, sess, h);
        h = sess.tape.leaky_relu(y, 0.2);
    }
    let b = sess.value(h).shape()[0];
    let flat_len = sess.value(h).len() / b;
    let flat = sess.tape.reshape(h, &[b, flat_len]);
    let logit = fc.forward(store, sess, flat);
    sess.tape.reshape(logit, &[b])
}

struct PairSample {
    pair: Array4<f32>,
    label: f32,
}

/// Balanced 50/50 positive/negative pair sampler over dataset indices.
fn sample_pair(
    dataset: &TrajectoryDataset,
    indices: &[usize],
    mode: ClassifierMode,
    generator: Option<&CiganBundle>,
    noise_amp: f64,
    rng: &mut ChaCha8Rng,
) -> PairSample {
    let res = dataset.resolution();
    let positive = rng.gen_bool(0.5);
    let mut pair = Array4::<f32>::zeros((1, 2, res, res));
    if positive {
        let rec = &dataset.records[indices[rng.gen_range(0..indices.len())]];
        let a = rec.obs.to_f32();
        let b = rec.next_obs.to_f32();
        let noisy = mode == ClassifierMode::Prune;
        for (i, (&x, &y)) in a.iter().zip(&b).enumerate() {
            let (mut x, mut y) = (x, y);
            if noisy {
                x += rng.gen_range(-noise_amp..noise_amp) as f32;
                y += rng.gen_range(-noise_amp..noise_amp) as f32;
            }
            pair[[0, 0, i / res, i % res]] = x.clamp(0.0, 1.0);
            pair[[0, 1, i / res, i % res]] = y.clamp(0.0, 1.0);
        }
    } else {
        match mode {
            ClassifierMode::Autoselect => {
                // Frames from two distinct records.
                let i = indices[rng.gen_range(0..indices.len())];
                let mut j = indices[rng.gen_range(0..indices.len())];
                while j == i {
                    j = indices[rng.gen_range(0..indices.len())];
                }
                let a = dataset.records[i].obs.to_f32();
                let b = dataset.records[j].obs.to_f32();
                for (k, (&x, &y)) in a.iter().zip(&b).enumerate() {
                    pair[[0, 0, k / res, k % res]] = x;
                    pair[[0, 1, k / res, k % res]] = y;
                }
            }
            ClassifierMode::Prune => {
                let bundle = generator.expect("checked in train_transition_classifier");
                let d = bundle.model.config.d_latent;
                let s = sample_prior(d, rng);
                let s_next = sample_prior(d, rng);
                // Context models compose over the record's own context.
                let idx = indices[rng.gen_range(0..indices.len())];
                let ctx = dataset.records[idx].context.as_ref();
                let s_row = Array2::from_shape_fn((1, d), |(_, k)| s[k]);
                let n_row = Array2::from_shape_fn((1, d), |(_, k)| s_next[k]);
                let decoded = bundle.decode_pairs(&s_row, &n_row, ctx);
                pair.assign(&decoded.mapv(|v| v));
            }
        }
    }
    PairSample {
        pair,
        label: positive as u8 as f32,
    }
}

/// Train the pair classifier; the result carries its held-out AUC.
pub fn train_transition_classifier(
    dataset: &TrajectoryDataset,
    mode: ClassifierMode,
    generator: Option<&CiganBundle>,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TransitionClassifierParams> {
    if dataset.is_empty() {
        return Err(VpaError::Empty("classifier dataset".into()));
    }
    if mode == ClassifierMode::Prune && generator.is_none() {
        return Err(VpaError::Config(
            "prune mode requires a trained generator for negatives".into(),
        ));
    }
    if dataset.resolution() != config.resolution {
        return Err(VpaError::Config(format!(
            "dataset resolution {} != classifier resolution {}",
            dataset.resolution(),
            config.resolution
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let (convs, fc) = build_net(config, &mut store, &mut rng);

    let n = dataset.len();
    let holdout = ((n as f64 * config.holdout_fraction) as usize).max(2);
    let train_indices: Vec<usize> = (0..n - holdout).collect();
    let holdout_indices: Vec<usize> = (n - holdout..n).collect();

    let ids: Vec<_> = store.ids().collect();
    let mut adam = Adam::new(&store, ids, config.lr).with_betas(0.9, 0.999);
    let steps = (train_indices.len() * config.epochs / config.batch_size).max(30);
    for step in 0..steps {
        let b = config.batch_size;
        let res = config.resolution;
        let mut batch = Array4::<f32>::zeros((b, 2, res, res));
        let mut labels = Vec::with_capacity(b);
        for bi in 0..b {
            let s = sample_pair(
                dataset,
                &train_indices,
                mode,
                generator,
                config.positive_noise,
                &mut rng,
            );
            batch
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&s.pair.index_axis(ndarray::Axis(0), 0));
            labels.push(s.label);
        }
        let mut sess = Session::new(&store);
        let x = sess.input(batch.into_dyn());
        let logits = forward_logits(&convs, &fc, &store, &mut sess, x);
        // BCE with logits: softplus(l) - y*l, averaged.
        let y = sess.input(ndarray::Array1::from(labels.clone()).into_dyn());
        let sp = sess.tape.softplus(logits);
        let yl = sess.tape.mul(y, logits);
        let per = sess.tape.sub(sp, yl);
        let loss = sess.tape.mean_all(per);
        let loss_v = sess.tape.scalar(loss) as f64;
        if !loss_v.is_finite() {
            return Err(VpaError::Training {
                epoch: step / (train_indices.len() / b).max(1),
                term: "classifier".into(),
                message: format!("non-finite loss {loss_v}"),
            });
        }
        sess.tape.backward(loss);
        adam.step(&mut store, &sess);
    }

    let mut classifier = TransitionClassifierParams {
        convs,
        fc,
        store,
        config: config.clone(),
        mode,
        holdout_auc: 0.0,
    };
    classifier.holdout_auc = holdout_eval(
        &classifier,
        dataset,
        &holdout_indices,
        mode,
        generator,
        &mut rng,
    );
    Ok(classifier)
}

fn holdout_eval(
    classifier: &TransitionClassifierParams,
    dataset: &TrajectoryDataset,
    holdout: &[usize],
    mode: ClassifierMode,
    generator: Option<&CiganBundle>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let n_eval = holdout.len().clamp(16, 256);
    for _ in 0..n_eval {
        let s = sample_pair(
            dataset,
            holdout,
            mode,
            generator,
            classifier.config.positive_noise,
            rng,
        );
        let logit = classifier.logits(&s.pair)[0];
        scored.push((logit, s.label > 0.5));
    }
    auc(&scored)
}

/// Rank-based AUC (Mann-Whitney).
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<_> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n_pos = sorted.iter().filter(|(_, p)| *p).count();
    let n_neg = sorted.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut rank_sum = 0.0;
    for (rank, (_, positive)) in sorted.iter().enumerate() {
        if *positive {
            rank_sum += (rank + 1) as f64;
        }
    }
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// Count 8-connected components of movable-intensity pixels with area at
/// least `min_area`.
pub fn count_objects(obs: &ObservationImage, min_area: usize) -> usize {
    let res = obs.resolution;
    let mut visited = vec![false; res * res];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..res * res {
        if visited[start] || obs.pixels[start] < OBJECT_INTENSITY_THRESHOLD {
            continue;
        }
        let mut area = 0usize;
        stack.push(start);
        visited[start] = true;
        while let Some(p) = stack.pop() {
            area += 1;
            let (r, c) = (p / res, p % res);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= res as i64 || nc >= res as i64 {
                        continue;
                    }
                    let np = nr as usize * res + nc as usize;
                    if !visited[np] && obs.pixels[np] >= OBJECT_INTENSITY_THRESHOLD {
                        visited[np] = true;
                        stack.push(np);
                    }
                }
            }
        }
        if area >= min_area {
            count += 1;
        }
    }
    count
}

/// The per-pair formula in isolation.
pub fn pair_score(c: f64, f: f64, alpha: f64, beta: f64) -> f64 {
    (beta + c) * (beta + c) + alpha * f
}

/// Pair score `(beta + c)^2 + alpha * f` aggregated over consecutive plan
/// frames by mean. `f` is 1 when the object counter agrees with
/// `expected_objects` on both frames.
pub fn autoselect_score(
    classifier: &TransitionClassifierParams,
    plan: &VisualPlan,
    alpha: f64,
    beta: f64,
    expected_objects: usize,
    min_area: usize,
) -> f64 {
    assert!(plan.frames.len() >= 2, "plan needs at least two frames");
    let pairs: Vec<_> = plan.frames.windows(2).map(|w| (&w[0], &w[1])).collect();
    let scores = classifier.score_pairs(&pairs);
    let mut total = 0.0;
    for (i, w) in plan.frames.windows(2).enumerate() {
        let c = scores[i];
        let f = (count_objects(&w[0], min_area) == expected_objects
            && count_objects(&w[1], min_area) == expected_objects) as u8 as f64;
        total += pair_score(c, f, alpha, beta);
    }
    total / pairs.len() as f64
}

/// Argmax plan by autoselection score; ties broken by shorter plan, then
/// first index. Returns the winning index plus all scores.
pub fn select_best_plan(
    classifier: &TransitionClassifierParams,
    plans: &[VisualPlan],
    alpha: f64,
    beta: f64,
    expected_objects: usize,
    min_area: usize,
) -> Result<(usize, Vec<f64>)> {
    if plans.is_empty() {
        return Err(VpaError::Empty("plan list".into()));
    }
    let scores: Vec<f64> = plans
        .iter()
        .map(|p| autoselect_score(classifier, p, alpha, beta, expected_objects, min_area))
        .collect();
    let mut best = 0usize;
    for i in 1..plans.len() {
        let better = scores[i] > scores[best] + 1e-12
            || ((scores[i] - scores[best]).abs() <= 1e-12
                && plans[i].frames.len() < plans[best].frames.len());
        if better {
            best = i;
        }
    }
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvConfig, EnvKind};

    #[test]
    fn pair_score_examples() {
        assert_eq!(pair_score(1.0, 1.0, 3.0, 1.0), 7.0);
        assert_eq!(pair_score(0.0, 0.0, 3.0, 1.0), 1.0);
        assert_eq!(pair_score(0.5, 1.0, 3.0, 1.0), 5.25);
    }

    #[test]
    fn count_objects_on_rendered_states() {
        let cfg = EnvConfig::new(EnvKind::TwoBlock).with_resolution(32);
        let zeros = ObservationImage::zeros(32);
        assert_eq!(count_objects(&zeros, 4), 0);

        // Separated blocks: two components.
        let state = crate::env::WorldState {
            block_centers: vec![[0.3, 0.3], [1.2, 1.2]],
            obstacle_spec: vec![],
            table_side: env::TABLE_SIDE,
        };
        let img = env::render(&cfg, &state);
        assert_eq!(count_objects(&img, 4), 2);

        // Overlapping blocks merge into one component.
        let overlapping = crate::env::WorldState {
            block_centers: vec![[0.7, 0.7], [0.8, 0.75]],
            obstacle_spec: vec![],
            table_side: env::TABLE_SIDE,
        };
        let img = env::render(&cfg, &overlapping);
        assert_eq!(count_objects(&img, 4), 1);

        // Obstacles render at half intensity and never count.
        let wall_cfg = EnvConfig::new(EnvKind::BlockWall).with_resolution(32);
        let s = env::reset(&wall_cfg, 3).unwrap();
        let ctx = env::render_context(&wall_cfg, &s);
        assert_eq!(count_objects(&ctx, 4), 0);
    }

    #[test]
    fn count_objects_translation_invariant() {
        let cfg = EnvConfig::new(EnvKind::TwoBlock).with_resolution(32);
        for shift in 0..6 {
            let state = crate::env::WorldState {
                block_centers: vec![[0.3 + 0.1 * shift as f64, 0.4], [1.2, 1.1]],
                obstacle_spec: vec![],
                table_side: env::TABLE_SIDE,
            };
            let img = env::render(&cfg, &state);
            assert_eq!(count_objects(&img, 4), 2);
        }
    }

    #[test]
    fn auc_ranks_perfect_separation() {
        let scored = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(auc(&scored), 1.0);
        let mixed = vec![(0.9, false), (0.8, true), (0.2, false), (0.1, true)];
        assert!(auc(&mixed) < 0.6);
    }
}
