//! Synthetic relation-triplet task with planted spatial and temporal biases,
//! plus a small softmax relation predictor that can be trained on it.
//!
//! Every triplet carries a latent feature vector: the unit prototype of its
//! predicate scaled by `signal_scale`, plus isotropic Gaussian noise of
//! standard deviation `feature_noise`. The feature alone determines the
//! label when the noise is zero, so the unbiased predictor is realizable.
//!
//! In the training split the label is biased: with probability
//! `spatial_bias` it is the majority predicate of the video's
//! subject-object pair, otherwise with probability `temporal_bias` it is the
//! majority successor of the previous predicate, otherwise it is uniform.
//! The two test splits draw labels that either follow those majority rules
//! (consistent) or avoid them (contradicting).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{DifferentiableModel, Featurizer, ParamVector};
use crate::metrics::{InstanceTag, PredictionSet};
use crate::rng::stream_rng;
use crate::triplet::{CategoryId, Dataset, TripletInstance, VideoSample, VocabKind, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_predicates: usize,
    pub n_objects: usize,
    pub n_videos: usize,
    pub n_test_videos: usize,
    pub triplets_per_video: usize,
    pub spatial_bias: f64,
    pub temporal_bias: f64,
    pub feature_noise: f64,
    /// Latent feature dimension; also the model's feature-head width.
    pub feature_dim: usize,
    /// Norm of the noiseless feature.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 5,
            n_predicates: 6,
            n_objects: 5,
            n_videos: 200,
            n_test_videos: 100,
            triplets_per_video: 12,
            spatial_bias: 0.9,
            temporal_bias: 0.9,
            feature_noise: 0.1,
            feature_dim: 8,
            signal_scale: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("spatial_bias", self.spatial_bias), ("temporal_bias", self.temporal_bias)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.feature_noise >= 0.0) || !(self.signal_scale > 0.0) {
            return Err(Error::validation("feature noise must be >= 0 and signal scale > 0"));
        }
        if self.n_subjects == 0 || self.n_objects == 0 || self.n_predicates < 2 {
            return Err(Error::validation("need at least one subject, one object and two predicates"));
        }
        if self.n_videos == 0 || self.triplets_per_video == 0 || self.feature_dim == 0 {
            return Err(Error::validation("video count, triplets per video and feature dim must be positive"));
        }
        Ok(())
    }
}

/// Generated splits plus the hidden structure that produced them.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub config: SynthConfig,
    pub train: Dataset,
    pub test_consistent: Dataset,
    pub test_contradicting: Dataset,
    /// Majority predicate per `subject * n_objects + object`.
    pub spatial_map: Vec<CategoryId>,
    /// Majority successor per predicate; never maps a predicate to itself.
    pub transition_map: Vec<CategoryId>,
    /// Unit prototype per predicate.
    pub prototypes: Vec<Vec<f64>>,
}

impl SynthTask {
    pub fn majority_predicate(&self, subject: CategoryId, object: CategoryId) -> CategoryId {
        self.spatial_map[subject * self.config.n_objects + object]
    }
}

#[derive(Clone, Copy)]
enum LabelMode {
    Train,
    Consistent,
    Contradicting,
}

fn vocab(kind: VocabKind, prefix: &str, n: usize) -> Vocabulary {
    Vocabulary::new(kind, (0..n).map(|i| format!("{prefix}{i}")).collect()).expect("generated names are unique")
}

fn random_derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    spatial_map: &'a [CategoryId],
    transition_map: &'a [CategoryId],
    prototypes: &'a [Vec<f64>],
}

impl Generator<'_> {
    fn label(&self, mode: LabelMode, pair: usize, prev: Option<CategoryId>, rng: &mut ChaCha8Rng) -> CategoryId {
        let n_p = self.cfg.n_predicates;
        let spatial = self.spatial_map[pair];
        let temporal = prev.map(|p| self.transition_map[p]);
        match mode {
            LabelMode::Train => {
                let base = rng.random_range(0..n_p);
                if rng.random::<f64>() < self.cfg.spatial_bias {
                    spatial
                } else if let (Some(t), true) = (temporal, rng.random::<f64>() < self.cfg.temporal_bias) {
                    t
                } else {
                    base
                }
            }
            LabelMode::Consistent => {
                if self.cfg.spatial_bias > 0.0 {
                    spatial
                } else if let (Some(t), true) = (temporal, self.cfg.temporal_bias > 0.0) {
                    t
                } else {
                    rng.random_range(0..n_p)
                }
            }
            LabelMode::Contradicting => {
                let allowed: Vec<CategoryId> = (0..n_p)
                    .filter(|&c| !(self.cfg.spatial_bias > 0.0 && c == spatial))
                    .filter(|&c| !(self.cfg.temporal_bias > 0.0 && Some(c) == temporal))
                    .collect();
                allowed[rng.random_range(0..allowed.len())]
            }
        }
    }

    fn features(&self, label: CategoryId, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.prototypes[label]
            .iter()
            .map(|&m| {
                let noise: f64 = StandardNormal.sample(rng);
                self.cfg.signal_scale * m + self.cfg.feature_noise * noise
            })
            .collect()
    }

    fn videos(&self, mode: LabelMode, prefix: &str, count: usize, rng: &mut ChaCha8Rng) -> Vec<VideoSample> {
        let cfg = self.cfg;
        (0..count)
            .map(|i| {
                let subject = rng.random_range(0..cfg.n_subjects);
                let object = rng.random_range(0..cfg.n_objects);
                let pair = subject * cfg.n_objects + object;
                let mut prev = None;
                let triplets = (0..cfg.triplets_per_video)
                    .map(|t| {
                        let label = self.label(mode, pair, prev, rng);
                        prev = Some(label);
                        TripletInstance::new(subject, label, object, t as u64).with_features(self.features(label, rng))
                    })
                    .collect();
                VideoSample::new(format!("{prefix}_{i:05}"), triplets).expect("videos are nonempty")
            })
            .collect()
    }
}

pub fn generate_biased_dataset(config: &SynthConfig) -> Result<SynthTask> {
    config.validate()?;
    let n_pairs = config.n_subjects * config.n_objects;
    let mut rng = stream_rng(config.seed, &[0x51]);

    // Balanced majority assignment: a shuffled list of pairs cycles through predicates.
    let mut pairs: Vec<usize> = (0..n_pairs).collect();
    pairs.shuffle(&mut rng);
    let mut spatial_map = vec![0; n_pairs];
    let offset = rng.random_range(0..config.n_predicates);
    for (i, &pair) in pairs.iter().enumerate() {
        spatial_map[pair] = (i + offset) % config.n_predicates;
    }
    let transition_map = random_derangement(config.n_predicates, &mut rng);
    let prototypes: Vec<Vec<f64>> = (0..config.n_predicates)
        .map(|_| unit_vector(config.feature_dim, &mut rng))
        .collect();

    let generator = Generator {
        cfg: config,
        spatial_map: &spatial_map,
        transition_map: &transition_map,
        prototypes: &prototypes,
    };
    let split = |mode, prefix, count, tag: u64| {
        let mut rng = stream_rng(config.seed, &[0x52, tag]);
        Dataset::new(
            vocab(VocabKind::Subject, "subject_", config.n_subjects),
            vocab(VocabKind::Predicate, "predicate_", config.n_predicates),
            vocab(VocabKind::Object, "object_", config.n_objects),
            generator.videos(mode, prefix, count, &mut rng),
        )
    };
    let train = split(LabelMode::Train, "train", config.n_videos, 0)?;
    let test_consistent = split(LabelMode::Consistent, "consistent", config.n_test_videos, 1)?;
    let test_contradicting = split(LabelMode::Contradicting, "contradicting", config.n_test_videos, 2)?;

    Ok(SynthTask {
        config: config.clone(),
        train,
        test_consistent,
        test_contradicting,
        spatial_map,
        transition_map,
        prototypes,
    })
}

/// Flattened instances for [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    pub subjects: Vec<CategoryId>,
    pub objects: Vec<CategoryId>,
    /// Previous predicate under the same pair, or `None` for the first one.
    pub prev: Vec<Option<CategoryId>>,
    /// Row-major `len × feature_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<CategoryId>,
}

impl ToyBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tags(&self) -> Vec<InstanceTag> {
        (0..self.len())
            .map(|i| InstanceTag {
                subject: self.subjects[i],
                object: self.objects[i],
                prev_predicate: self.prev[i],
            })
            .collect()
    }
}

/// Multinomial logistic predictor over predicates.
///
/// Parameter layout, each block row-major with `n_p` columns:
///
/// | block            | rows          |
/// |------------------|---------------|
/// | subject table    | `n_s`         |
/// | object table     | `n_o`         |
/// | prev-predicate   | `n_p + 1` (last row is the null token) |
/// | feature head     | `feature_dim` |
/// | bias             | 1             |
///
/// `logit_c = S[s,c] + O[o,c] + P[prev,c] + Σ_j f_j W[j,c] + b_c`
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub n_subjects: usize,
    pub n_predicates: usize,
    pub n_objects: usize,
    pub feature_dim: usize,
}

impl ToyModel {
    pub fn new(n_subjects: usize, n_predicates: usize, n_objects: usize, feature_dim: usize) -> Self {
        Self {
            n_subjects,
            n_predicates,
            n_objects,
            feature_dim,
        }
    }

    pub fn for_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.n_subjects, cfg.n_predicates, cfg.n_objects, cfg.feature_dim)
    }

    /// Shape inferred from a dataset whose triplets carry features.
    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        let first = dataset
            .videos
            .first()
            .ok_or_else(|| Error::validation("dataset has no videos"))?;
        let dim = first.triplets[0]
            .features
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(first.id.clone()))?
            .len();
        Ok(Self::new(
            dataset.subject_vocab.size(),
            dataset.predicate_vocab.size(),
            dataset.object_vocab.size(),
            dim,
        ))
    }

    fn offsets(&self) -> [usize; 5] {
        let n_p = self.n_predicates;
        let obj = self.n_subjects * n_p;
        let prev = obj + self.n_objects * n_p;
        let feat = prev + (n_p + 1) * n_p;
        let bias = feat + self.feature_dim * n_p;
        [0, obj, prev, feat, bias]
    }

    pub fn init_params(&self, seed: u64, scale: f64) -> ParamVector {
        let mut rng = stream_rng(seed, &[0x1417]);
        ParamVector::from_raw(
            (0..self.dim())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>(),
        )
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.dim() {
            return Err(Error::validation(format!(
                "parameter vector has {} entries, model expects {}",
                params.dim(),
                self.dim()
            )));
        }
        params.check_finite("parameter")
    }

    fn logits_into(&self, w: &[f64], batch: &ToyBatch, i: usize, out: &mut [f64]) {
        let n_p = self.n_predicates;
        let [so, oo, po, fo, bo] = self.offsets();
        let prev_row = batch.prev[i].unwrap_or(n_p);
        let s = &w[so + batch.subjects[i] * n_p..][..n_p];
        let o = &w[oo + batch.objects[i] * n_p..][..n_p];
        let p = &w[po + prev_row * n_p..][..n_p];
        let b = &w[bo..][..n_p];
        for ((((l, s), o), p), b) in out.iter_mut().zip(s).zip(o).zip(p).zip(b) {
            *l = s + o + p + b;
        }
        let f = &batch.features[i * self.feature_dim..][..self.feature_dim];
        let head = &w[fo..][..self.feature_dim * n_p];
        for (&fj, row) in f.iter().zip(head.chunks_exact(n_p)) {
            for (l, r) in out.iter_mut().zip(row) {
                *l += fj * r;
            }
        }
    }

    /// In-place softmax; returns the log partition function.
    fn softmax(logits: &mut [f64]) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
        max + z.ln()
    }

    pub fn predict(&self, params: &ParamVector, batch: &ToyBatch) -> Result<PredictionSet> {
        self.check_params(params)?;
        let mut scores = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let mut l = vec![0.0; self.n_predicates];
            self.logits_into(params.as_slice(), batch, i, &mut l);
            scores.push(l);
        }
        PredictionSet::new(self.n_predicates, scores, batch.labels.clone())?.with_tags(batch.tags())
    }

    pub fn accuracy(&self, params: &ParamVector, batch: &ToyBatch) -> Result<f64> {
        crate::metrics::recall_at_k(&self.predict(params, batch)?, 1)
    }
}

impl DifferentiableModel for ToyModel {
    type Batch = ToyBatch;

    fn dim(&self) -> usize {
        (self.n_subjects + self.n_objects + self.n_predicates + 1 + self.feature_dim + 1) * self.n_predicates
    }

    /// Mean cross-entropy.
    fn loss(&self, params: &ParamVector, batch: &ToyBatch) -> f64 {
        let mut l = vec![0.0; self.n_predicates];
        let mut total = 0.0;
        for i in 0..batch.len() {
            self.logits_into(params.as_slice(), batch, i, &mut l);
            let target = l[batch.labels[i]];
            let log_z = Self::softmax(&mut l);
            total += log_z - target;
        }
        total / batch.len() as f64
    }

    fn grad(&self, params: &ParamVector, batch: &ToyBatch) -> ParamVector {
        let n_p = self.n_predicates;
        let d = self.feature_dim;
        let [so, oo, po, fo, bo] = self.offsets();
        let mut g = vec![0.0; self.dim()];
        let mut l = vec![0.0; n_p];
        for i in 0..batch.len() {
            self.logits_into(params.as_slice(), batch, i, &mut l);
            Self::softmax(&mut l);
            l[batch.labels[i]] -= 1.0;
            let prev_row = batch.prev[i].unwrap_or(n_p);
            for base in [
                so + batch.subjects[i] * n_p,
                oo + batch.objects[i] * n_p,
                po + prev_row * n_p,
                bo,
            ] {
                for (gc, r) in g[base..][..n_p].iter_mut().zip(&l) {
                    *gc += r;
                }
            }
            let f = &batch.features[i * d..][..d];
            for (&fj, row) in f.iter().zip(g[fo..][..d * n_p].chunks_exact_mut(n_p)) {
                for (gc, r) in row.iter_mut().zip(&l) {
                    *gc += fj * r;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for v in &mut g {
            *v *= scale;
        }
        ParamVector::from_raw(g)
    }
}

/// Builds [`ToyBatch`]es from videos that carry latent features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyFeaturizer {
    pub feature_dim: usize,
}

impl Featurizer for ToyFeaturizer {
    type Batch = ToyBatch;

    fn featurize(&self, videos: &[&VideoSample]) -> Result<Option<ToyBatch>> {
        let batch = featurize(videos, self.feature_dim)?;
        Ok((!batch.is_empty()).then_some(batch))
    }
}

/// One instance per triplet. The previous predicate is that of the nearest
/// strictly earlier triplet with the same subject-object pair.
pub fn featurize(videos: &[&VideoSample], feature_dim: usize) -> Result<ToyBatch> {
    let mut batch = ToyBatch {
        subjects: Vec::new(),
        objects: Vec::new(),
        prev: Vec::new(),
        features: Vec::new(),
        labels: Vec::new(),
    };
    for video in videos {
        let mut last: std::collections::HashMap<(CategoryId, CategoryId), CategoryId> = Default::default();
        let mut pending: Vec<((CategoryId, CategoryId), CategoryId)> = Vec::new();
        let mut current_time = None;
        for t in &video.triplets {
            if current_time != Some(t.time_index) {
                last.extend(pending.drain(..));
                current_time = Some(t.time_index);
            }
            let features = t
                .features
                .as_ref()
                .ok_or_else(|| Error::MissingFeatures(video.id.clone()))?;
            if features.len() != feature_dim {
                return Err(Error::validation(format!(
                    "video `{}` has {}-dimensional features, expected {feature_dim}",
                    video.id,
                    features.len()
                )));
            }
            let pair = (t.subject, t.object);
            batch.subjects.push(t.subject);
            batch.objects.push(t.object);
            batch.prev.push(last.get(&pair).copied());
            batch.features.extend_from_slice(features);
            batch.labels.push(t.predicate);
            pending.push((pair, t.predicate));
        }
    }
    Ok(batch)
}

pub fn featurize_dataset(dataset: &Dataset, feature_dim: usize) -> Result<ToyBatch> {
    let refs: Vec<&VideoSample> = dataset.videos.iter().collect();
    featurize(&refs, feature_dim)
}

/// Full-batch gradient descent on the training loss, for `steps` steps.
pub fn erm_baseline<M: DifferentiableModel>(
    model: &M,
    batch: &M::Batch,
    init: ParamVector,
    lr: f64,
    steps: u64,
    divergence_limit: f64,
) -> Result<ParamVector> {
    let mut w = init;
    for step in 0..steps {
        let g = model.grad(&w, batch);
        g.check_finite("gradient")?;
        w = w.add_scaled(-lr, &g);
        if step % 256 == 0 || step + 1 == steps {
            let loss = model.loss(&w, batch);
            if !loss.is_finite() || loss > divergence_limit {
                return Err(Error::Divergence {
                    epoch: 0,
                    iter: step as usize,
                    what: "ERM loss".to_string(),
                    value: loss,
                });
            }
        }
    }
    Ok(w)
}

/// Scores each instance by the dot product of its latent feature with each
/// predicate prototype; ignores all context.
pub fn oracle_predictions(task: &SynthTask, batch: &ToyBatch) -> Result<PredictionSet> {
    let d = task.config.feature_dim;
    let scores = (0..batch.len())
        .map(|i| {
            let f = &batch.features[i * d..][..d];
            task.prototypes
                .iter()
                .map(|m| m.iter().zip(f).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    PredictionSet::new(task.config.n_predicates, scores, batch.labels.clone())
}
