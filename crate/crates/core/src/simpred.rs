//! The similarity predictor: a two-branch network scoring how closely an
//! agent observation matches a demonstration frame, on a 1–5 scale.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvAction, EnvState, ACTION_DIM, STATE_DIM, STATE_SCALE};
use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, Activation, DenseNet, GradientSet, SgdConfig, N_CLASSES};
use crate::render::{frame_features, Frame, FEATURE_SIZE};
use crate::seed;

pub const OBS_DIM: usize = STATE_DIM + ACTION_DIM;
pub const VISUAL_DIM: usize = 128;
pub const STANDARD_DIM: usize = 64;
pub const HEAD_HIDDEN: usize = 64;

/// Agent state followed by the action taken in it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub values: [f64; OBS_DIM],
}

impl Observation {
    pub fn new(state: &EnvState, action: &EnvAction) -> Self {
        let mut values = [0.0; OBS_DIM];
        values[..STATE_DIM].copy_from_slice(&state.to_array());
        values[STATE_DIM..].copy_from_slice(&action.to_array());
        Self { values }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let values: [f64; OBS_DIM] = values.try_into().map_err(|_| Error::Dimension {
            context: "Observation",
            expected: OBS_DIM,
            actual: values.len(),
        })?;
        Ok(Self { values })
    }

    /// Network input: states divided by their typical magnitudes, actions as is.
    pub fn scaled(&self) -> [f64; OBS_DIM] {
        let mut out = self.values;
        for (v, s) in out.iter_mut().zip(STATE_SCALE) {
            *v /= s;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainVariant {
    RandomSampling,
    SamplingEqually,
    ClassWeights,
    EqualPlusWeights,
    AdditionalLayer,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 5] = [
        TrainVariant::RandomSampling,
        TrainVariant::SamplingEqually,
        TrainVariant::ClassWeights,
        TrainVariant::EqualPlusWeights,
        TrainVariant::AdditionalLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::RandomSampling => "random-sampling",
            TrainVariant::SamplingEqually => "sampling-equally",
            TrainVariant::ClassWeights => "class-weights",
            TrainVariant::EqualPlusWeights => "equal-plus-weights",
            TrainVariant::AdditionalLayer => "additional-layer",
        }
    }

    pub fn stratified(self) -> bool {
        !matches!(self, TrainVariant::RandomSampling | TrainVariant::ClassWeights)
    }

    pub fn weighted(self) -> bool {
        matches!(self, TrainVariant::ClassWeights | TrainVariant::EqualPlusWeights)
    }

    pub fn extra_layer(self) -> bool {
        self == TrainVariant::AdditionalLayer
    }
}

impl fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// One per-step training example. Frames are shared because every sample of
/// a clip points into the same demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSample {
    pub frame: Arc<Frame>,
    pub observation: Observation,
    pub rating: u8,
}

impl AnnotationSample {
    pub fn new(frame: Arc<Frame>, observation: Observation, rating: u8) -> Result<Self> {
        if !(1..=5).contains(&rating) {
            return Err(Error::InvalidRating(rating as i64));
        }
        Ok(Self { frame, observation, rating })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub f1_345: f64,
    pub f1_45: f64,
    pub abs_error_hist: [usize; N_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPredictor {
    pub visual: DenseNet,
    pub standard: DenseNet,
    pub head: DenseNet,
    pub variant: TrainVariant,
}

struct Caches {
    visual: crate::nn::ForwardCache,
    standard: crate::nn::ForwardCache,
    head: crate::nn::ForwardCache,
}

#[derive(Debug, Clone)]
struct Grads {
    visual: GradientSet,
    standard: GradientSet,
    head: GradientSet,
}

impl SimilarityPredictor {
    pub fn new(variant: TrainVariant, seed: u64) -> Result<Self> {
        let visual = DenseNet::new(&[FEATURE_SIZE, VISUAL_DIM], &[Activation::Relu], seed::derive(seed, 1))?;
        let standard = DenseNet::new(
            &[OBS_DIM, STANDARD_DIM, STANDARD_DIM],
            &[Activation::Relu, Activation::Relu],
            seed::derive(seed, 2),
        )?;
        let joint = VISUAL_DIM + STANDARD_DIM;
        let head = if variant.extra_layer() {
            DenseNet::new(
                &[joint, HEAD_HIDDEN, N_CLASSES],
                &[Activation::Relu, Activation::Identity],
                seed::derive(seed, 3),
            )?
        } else {
            DenseNet::new(&[joint, N_CLASSES], &[Activation::Identity], seed::derive(seed, 3))?
        };
        Self::from_parts(visual, standard, head, variant)
    }

    pub fn from_parts(visual: DenseNet, standard: DenseNet, head: DenseNet, variant: TrainVariant) -> Result<Self> {
        let expect = |what: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::Dimension { context: what, expected, actual })
            }
        };
        expect("visual branch input", FEATURE_SIZE, visual.input_dim())?;
        expect("standard branch input", OBS_DIM, standard.input_dim())?;
        expect("head input", visual.output_dim() + standard.output_dim(), head.input_dim())?;
        expect("head output", N_CLASSES, head.output_dim())?;
        let head_layers = if variant.extra_layer() { 2 } else { 1 };
        expect("head depth", head_layers, head.layers.len())?;
        Ok(Self { visual, standard, head, variant })
    }

    pub fn num_params(&self) -> usize {
        self.visual.num_params() + self.standard.num_params() + self.head.num_params()
    }

    /// Output of the visual branch for a frame. Constant for a fixed frame
    /// and parameter set, so callers scoring many observations against the
    /// same demonstration can compute it once.
    pub fn visual_embedding(&self, frame: &Frame) -> Result<Vec<f64>> {
        self.visual.predict(&frame_features(frame)?)
    }

    pub fn predict_embedded(&self, embedding: &[f64], obs: &Observation) -> Result<[f64; N_CLASSES]> {
        if embedding.len() != self.visual.output_dim() {
            return Err(Error::Dimension {
                context: "visual embedding",
                expected: self.visual.output_dim(),
                actual: embedding.len(),
            });
        }
        let mut joint = embedding.to_vec();
        joint.extend(self.standard.predict(&obs.scaled())?);
        let p = softmax(&self.head.predict(&joint)?);
        Ok(p.try_into().expect("five classes"))
    }

    pub fn predict(&self, frame: &Frame, obs: &Observation) -> Result<[f64; N_CLASSES]> {
        self.predict_embedded(&self.visual_embedding(frame)?, obs)
    }

    pub fn predict_class(&self, frame: &Frame, obs: &Observation) -> Result<u8> {
        Ok(argmax(&self.predict(frame, obs)?) as u8 + 1)
    }

    fn forward(&self, features: &[f64], obs: &Observation) -> Result<(Vec<f64>, Caches)> {
        let (v, visual) = self.visual.forward(features)?;
        let (s, standard) = self.standard.forward(&obs.scaled())?;
        let mut joint = v;
        joint.extend(s);
        let (logits, head) = self.head.forward(&joint)?;
        Ok((logits, Caches { visual, standard, head }))
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            visual: GradientSet::zeros_like(&self.visual),
            standard: GradientSet::zeros_like(&self.standard),
            head: GradientSet::zeros_like(&self.head),
        }
    }

    /// Cross-entropy of one sample, accumulating parameter gradients.
    fn accumulate(&self, features: &[f64], obs: &Observation, rating: u8, weight: f64, g: &mut Grads) -> Result<f64> {
        let (logits, c) = self.forward(features, obs)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, rating, weight)?;
        let djoint = self.head.backward_into(&c.head, &dlogits, &mut g.head)?;
        let nv = self.visual.output_dim();
        self.visual.accumulate_grads(&c.visual, &djoint[..nv], &mut g.visual)?;
        self.standard.accumulate_grads(&c.standard, &djoint[nv..], &mut g.standard)?;
        Ok(loss)
    }

    fn apply(&mut self, g: &Grads, sgd: &SgdConfig) -> Result<()> {
        if !(g.visual.is_finite() && g.standard.is_finite() && g.head.is_finite()) {
            return Err(Error::NonFinite("predictor gradients"));
        }
        self.visual.sgd_step(&g.visual, sgd)?;
        self.standard.sgd_step(&g.standard, sgd)?;
        self.head.sgd_step(&g.head, sgd)
    }

    /// Mean weighted cross-entropy over `samples` and its gradient, for tests.
    pub fn loss_and_grad(&self, samples: &[AnnotationSample], weights: &[f64; N_CLASSES]) -> Result<(f64, Vec<f64>)> {
        let mut g = self.zero_grads();
        let mut total = 0.0;
        for s in samples {
            let f = frame_features(&s.frame)?;
            total += self.accumulate(&f, &s.observation, s.rating, weights[s.rating as usize - 1], &mut g)?;
        }
        let k = 1.0 / samples.len().max(1) as f64;
        let mut flat = g.visual.to_flat();
        flat.extend(g.standard.to_flat());
        flat.extend(g.head.to_flat());
        flat.iter_mut().for_each(|v| *v *= k);
        Ok((total * k, flat))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.visual.params_flat();
        p.extend(self.standard.params_flat());
        p.extend(self.head.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let (a, b) = (self.visual.num_params(), self.standard.num_params());
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "predictor parameters",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        self.visual.set_params_flat(&flat[..a])?;
        self.standard.set_params_flat(&flat[a..a + b])?;
        self.head.set_params_flat(&flat[a + b..])
    }

    /// Writes `visual.vnn`, `standard.vnn`, `head.vnn` and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.visual.save(dir.join("visual.vnn"))?;
        self.standard.save(dir.join("standard.vnn"))?;
        self.head.save(dir.join("head.vnn"))?;
        let manifest = Manifest {
            variant: self.variant,
            feature_dim: FEATURE_SIZE,
            observation_dim: OBS_DIM,
            visual_dim: self.visual.output_dim(),
            standard_dim: self.standard.output_dim(),
            head_layers: self.head.layers.len(),
            classes: N_CLASSES,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            context: "predictor manifest".into(),
            source: e,
        })?;
        crate::render::write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let missing: Vec<String> = [MANIFEST, "visual.vnn", "standard.vnn", "head.vnn"]
            .into_iter()
            .filter(|f| !dir.join(f).is_file())
            .map(String::from)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingRunFiles { dir: dir.into(), missing });
        }
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        if m.feature_dim != FEATURE_SIZE || m.observation_dim != OBS_DIM || m.classes != N_CLASSES {
            return Err(Error::format("manifest", "dimensions do not match this build"));
        }
        let p = Self::from_parts(
            DenseNet::load(dir.join("visual.vnn"))?,
            DenseNet::load(dir.join("standard.vnn"))?,
            DenseNet::load(dir.join("head.vnn"))?,
            m.variant,
        )?;
        if p.visual.output_dim() != m.visual_dim || p.standard.output_dim() != m.standard_dim || p.head.layers.len() != m.head_layers {
            return Err(Error::format("manifest", "branch shapes disagree with the manifest"));
        }
        Ok(p)
    }
}

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    variant: TrainVariant,
    feature_dim: usize,
    observation_dim: usize,
    visual_dim: usize,
    standard_dim: usize,
    head_layers: usize,
    classes: usize,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(dist: &[f64; N_CLASSES]) -> Result<()> {
    let sum: f64 = dist.iter().sum();
    if !dist.iter().all(|p| p.is_finite() && *p >= 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("not a probability distribution: {dist:?}")));
    }
    Ok(())
}

pub fn expected_rating(dist: &[f64; N_CLASSES]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(dist.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum::<f64>().clamp(1.0, 5.0))
}

pub fn reward_from_rating(dist: &[f64; N_CLASSES]) -> Result<f64> {
    Ok((expected_rating(dist)? - 1.0) / 4.0)
}

/// w_c = N / (5·N_c); classes without samples get weight 0.
pub fn class_weights(dataset: &[AnnotationSample]) -> Result<[f64; N_CLASSES]> {
    if dataset.is_empty() {
        return Err(Error::domain("class weights need a non-empty dataset"));
    }
    let counts = class_counts(dataset);
    let n = dataset.len() as f64;
    Ok(counts.map(|c| if c == 0 { 0.0 } else { n / (N_CLASSES as f64 * c as f64) }))
}

pub fn class_counts(dataset: &[AnnotationSample]) -> [usize; N_CLASSES] {
    let mut counts = [0usize; N_CLASSES];
    for s in dataset {
        counts[s.rating as usize - 1] += 1;
    }
    counts
}

/// Batches of dataset indices for one epoch. Uniform variants shuffle and
/// chunk; stratified variants draw ⌊B/k⌋ per present class (k present
/// classes), handing the remainder out round-robin from a shuffled class
/// order, and produce ⌈N/B⌉ batches.
pub fn make_batches(
    dataset: &[AnnotationSample],
    variant: TrainVariant,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if dataset.is_empty() {
        return Err(Error::domain("cannot batch an empty dataset"));
    }
    if batch_size == 0 || (variant.stratified() && batch_size < N_CLASSES) {
        return Err(Error::Config(format!(
            "batch size {batch_size} too small for {variant}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Group by label in an order that does not depend on storage order.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_cached_key(|&i| sample_key(&dataset[i]));
    order.shuffle(&mut rng);
    if !variant.stratified() {
        return Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for &i in &order {
        by_class[dataset[i].rating as usize - 1].push(i);
    }
    let present: Vec<usize> = (0..N_CLASSES).filter(|&c| !by_class[c].is_empty()).collect();
    let quota = batch_size / present.len();
    let mut cursors = vec![0usize; N_CLASSES];
    let n_batches = dataset.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut classes = present.clone();
        classes.shuffle(&mut rng);
        let extra = batch_size - quota * present.len();
        let mut batch = Vec::with_capacity(batch_size);
        for (k, &c) in classes.iter().enumerate() {
            let take = quota + usize::from(k < extra);
            let pool = &by_class[c];
            for _ in 0..take {
                if pool.len() >= batch_size {
                    // Large classes are walked without replacement.
                    batch.push(pool[cursors[c] % pool.len()]);
                    cursors[c] += 1;
                } else {
                    batch.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        }
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// Content key used to canonicalise storage order before seeded shuffles.
fn sample_key(s: &AnnotationSample) -> (u8, Vec<u64>, Vec<u8>) {
    (s.rating, s.observation.values.iter().map(|v| v.to_bits()).collect(), s.frame.pixels.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Features of each distinct frame, computed once per training call.
struct FeatureCache {
    index: Vec<usize>,
    features: Vec<Vec<f64>>,
}

impl FeatureCache {
    fn build(dataset: &[AnnotationSample]) -> Result<Self> {
        let mut seen: Vec<(*const Frame, usize)> = Vec::new();
        let mut features = Vec::new();
        let mut index = Vec::with_capacity(dataset.len());
        for s in dataset {
            let ptr = Arc::as_ptr(&s.frame);
            let slot = match seen.iter().find(|(p, _)| *p == ptr) {
                Some(&(_, k)) => k,
                None => {
                    features.push(frame_features(&s.frame)?);
                    seen.push((ptr, features.len() - 1));
                    features.len() - 1
                }
            };
            index.push(slot);
        }
        Ok(Self { index, features })
    }

    fn get(&self, i: usize) -> &[f64] {
        &self.features[self.index[i]]
    }
}

/// Minibatch SGD on the (optionally class-weighted) cross-entropy. Returns
/// the parameters with the best validation accuracy (the latest on ties;
/// the initial parameters when `epochs == 0`).
pub fn train(
    pred: &SimilarityPredictor,
    train_set: &[AnnotationSample],
    val_set: &[AnnotationSample],
    variant: TrainVariant,
    sgd: &SgdConfig,
    epochs: usize,
    seed: u64,
) -> Result<(SimilarityPredictor, Vec<EpochMetrics>)> {
    sgd.validate()?;
    if epochs == 0 {
        return Ok((pred.clone(), Vec::new()));
    }
    if train_set.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let weights = if variant.weighted() {
        class_weights(train_set)?
    } else {
        [1.0; N_CLASSES]
    };
    let cache = FeatureCache::build(train_set)?;
    let val_cache = FeatureCache::build(val_set)?;
    let mut net = pred.clone();
    net.variant = variant;
    let mut best: Option<(f64, SimilarityPredictor)> = None;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = make_batches(train_set, variant, sgd.batch_size, seed::derive(seed, epoch as u64))?;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches {
            let mut g = net.zero_grads();
            for &i in &batch {
                let s = &train_set[i];
                let w = weights[s.rating as usize - 1];
                total += net.accumulate(cache.get(i), &s.observation, s.rating, w, &mut g)?;
            }
            count += batch.len();
            let k = 1.0 / batch.len() as f64;
            g.visual.scale(k);
            g.standard.scale(k);
            g.head.scale(k);
            net.apply(&g, sgd)?;
        }
        let val_accuracy = if val_set.is_empty() {
            f64::NAN
        } else {
            accuracy_cached(&net, val_set, &val_cache)?
        };
        history.push(EpochMetrics { epoch, train_loss: total / count as f64, val_accuracy });
        let score = if val_accuracy.is_nan() { f64::NEG_INFINITY } else { val_accuracy };
        if best.as_ref().is_none_or(|(b, _)| score >= *b) {
            best = Some((score, net.clone()));
        }
    }
    Ok((best.map(|(_, p)| p).expect("at least one epoch"), history))
}

/// Continues training all parameters at a tenth of the learning rate.
pub fn fine_tune(
    pred: &SimilarityPredictor,
    new_samples: &[AnnotationSample],
    sgd: &SgdConfig,
    epochs: usize,
    seed: u64,
) -> Result<SimilarityPredictor> {
    if new_samples.is_empty() {
        return Err(Error::domain("fine-tuning needs samples"));
    }
    let slow = SgdConfig {
        learning_rate: sgd.learning_rate * 0.1,
        ..*sgd
    };
    // No held-out split here: the final parameters are returned.
    let (p, _) = train_last(pred, new_samples, pred.variant, &slow, epochs, seed)?;
    Ok(p)
}

/// Training without validation-based selection; returns the final epoch.
pub fn train_last(
    pred: &SimilarityPredictor,
    train_set: &[AnnotationSample],
    variant: TrainVariant,
    sgd: &SgdConfig,
    epochs: usize,
    seed: u64,
) -> Result<(SimilarityPredictor, Vec<EpochMetrics>)> {
    train(pred, train_set, &[], variant, sgd, epochs, seed)
}

fn accuracy_cached(pred: &SimilarityPredictor, data: &[AnnotationSample], cache: &FeatureCache) -> Result<f64> {
    let mut embeds: Vec<Option<Vec<f64>>> = vec![None; cache.features.len()];
    let mut hits = 0usize;
    for (i, s) in data.iter().enumerate() {
        let slot = cache.index[i];
        if embeds[slot].is_none() {
            embeds[slot] = Some(pred.visual.predict(&cache.features[slot])?);
        }
        let p = pred.predict_embedded(embeds[slot].as_deref().expect("filled"), &s.observation)?;
        hits += usize::from(argmax(&p) as u8 + 1 == s.rating);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Argmax predictions for every sample, reusing visual embeddings per frame.
pub fn predict_classes(pred: &SimilarityPredictor, data: &[AnnotationSample]) -> Result<Vec<u8>> {
    let cache = FeatureCache::build(data)?;
    let mut embeds: Vec<Option<Vec<f64>>> = vec![None; cache.features.len()];
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let slot = cache.index[i];
            if embeds[slot].is_none() {
                embeds[slot] = Some(pred.visual.predict(&cache.features[slot])?);
            }
            let p = pred.predict_embedded(embeds[slot].as_deref().expect("filled"), &s.observation)?;
            Ok(argmax(&p) as u8 + 1)
        })
        .collect()
}

pub fn evaluate(pred: &SimilarityPredictor, dataset: &[AnnotationSample]) -> Result<EvalMetrics> {
    let predicted = predict_classes(pred, dataset)?;
    let truth: Vec<u8> = dataset.iter().map(|s| s.rating).collect();
    metrics_from_labels(&predicted, &truth)
}

/// Metrics for predicted vs true 1-based labels.
pub fn metrics_from_labels(predicted: &[u8], truth: &[u8]) -> Result<EvalMetrics> {
    if truth.is_empty() || predicted.len() != truth.len() {
        return Err(Error::domain("metrics need equal, non-empty label lists"));
    }
    let mut hist = [0usize; N_CLASSES];
    let mut hits = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        hist[(p as i32 - t as i32).unsigned_abs() as usize] += 1;
        hits += usize::from(p == t);
    }
    Ok(EvalMetrics {
        accuracy: hits as f64 / truth.len() as f64,
        f1_345: binary_f1(predicted, truth, 3),
        f1_45: binary_f1(predicted, truth, 4),
        abs_error_hist: hist,
    })
}

/// F1 with labels ≥ `threshold` as positives. With no true positives the
/// score is 1 when nothing was predicted positive and 0 otherwise.
fn binary_f1(predicted: &[u8], truth: &[u8], threshold: u8) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p >= threshold, t >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fneg == 0 {
        return if fp == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Fraction of the most common label.
pub fn majority_frequency(dataset: &[AnnotationSample]) -> f64 {
    let counts = class_counts(dataset);
    *counts.iter().max().unwrap_or(&0) as f64 / dataset.len().max(1) as f64
}
