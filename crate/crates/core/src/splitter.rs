//! Per-epoch episode construction: a random support set plus one query set
//! per bias type, filled with the candidate videos whose own conditional
//! distribution diverges most from the support set's.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bias::{
    conditional_distribution, distribution_divergence, enumerate_bias_types, BiasGroup, BiasType,
    ConditionalDistribution, DEFAULT_EPSILON,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::stream_rng;
use crate::triplet::{Dataset, VideoSample};

/// Fraction of training videos drawn into the support set each epoch.
pub const DEFAULT_SUPPORT_FRACTION: f64 = 0.6;
/// Query-set size used for video-level (VidVRD-style) data.
pub const QUERY_SIZE_VIDEO_LEVEL: usize = 100;
/// Query-set size used for frame-level (Action Genome-style) data.
pub const QUERY_SIZE_FRAME_LEVEL: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub support_fraction: f64,
    /// Videos per query set.
    pub query_size: usize,
    pub epsilon: f64,
    /// Drop bias types whose target vocabulary has one category.
    pub skip_degenerate: bool,
    pub seed: u64,
    /// Bias-type groups excluded from episode construction.
    pub ablate: Vec<BiasGroup>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            support_fraction: DEFAULT_SUPPORT_FRACTION,
            query_size: QUERY_SIZE_VIDEO_LEVEL,
            epsilon: DEFAULT_EPSILON,
            skip_degenerate: true,
            seed: 0,
            ablate: Vec::new(),
        }
    }
}

impl SplitConfig {
    pub fn support_count(&self, n_videos: usize) -> usize {
        (self.support_fraction * n_videos as f64).floor() as usize
    }

    pub fn validate(&self, n_videos: usize) -> Result<()> {
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::validation(format!(
                "support fraction {} is outside (0, 1)",
                self.support_fraction
            )));
        }
        if self.support_count(n_videos) < 1 {
            return Err(Error::validation(format!(
                "support fraction {} of {n_videos} videos leaves an empty support set",
                self.support_fraction
            )));
        }
        if self.query_size == 0 {
            return Err(Error::validation("query size must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon must be positive"));
        }
        Ok(())
    }

    /// Bias types active for `dataset` after degenerate-target skipping and ablations.
    pub fn bias_types(&self, dataset: &Dataset) -> Vec<BiasType> {
        enumerate_bias_types(dataset, self.skip_degenerate)
            .into_iter()
            .filter(|bt| !self.ablate.iter().any(|g| g.contains(bt)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuerySet {
    pub bias_type: BiasType,
    pub videos: Vec<String>,
    /// Mean candidate score of the selected videos.
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSplit {
    pub epoch: usize,
    #[serde(rename = "support")]
    pub support_ids: Vec<String>,
    #[serde(rename = "queries")]
    pub query_sets: Vec<QuerySet>,
}

impl EpisodeSplit {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("episode serialization is infallible");
        s.push('\n');
        s
    }
}

/// Seeded shuffle of the dataset; the first `⌊fraction·n⌋` videos form the support set.
pub fn split_support(dataset: &Dataset, config: &SplitConfig, epoch: usize) -> Result<(Vec<String>, Vec<String>)> {
    config.validate(dataset.videos.len())?;
    let mut ids = dataset.video_ids();
    let mut rng = stream_rng(config.seed, &[0x5u64, epoch as u64]);
    ids.shuffle(&mut rng);
    let candidates = ids.split_off(config.support_count(ids.len()));
    Ok((ids, candidates))
}

fn target_size(dataset: &Dataset, bias_type: &BiasType) -> usize {
    dataset.vocab(bias_type.target().vocab_kind()).size()
}

pub fn score_candidates<S: AsRef<str> + Sync>(
    candidate_ids: &[S],
    dataset: &Dataset,
    phi_s: &ConditionalDistribution,
    bias_type: &BiasType,
    epsilon: f64,
) -> Result<Vec<(String, f64)>> {
    let size = target_size(dataset, bias_type);
    let videos = dataset.lookup(candidate_ids)?;
    par::try_map(&videos, |video| {
        let phi_c = conditional_distribution([*video], bias_type, size);
        Ok((video.id.clone(), distribution_divergence(&phi_c, phi_s, epsilon)?))
    })
}

/// Ids of the `query_size` highest scores; ties go to the smaller id.
pub fn construct_query_set(scores: &[(String, f64)], query_size: usize) -> Vec<String> {
    let mut ranked: Vec<&(String, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(query_size).map(|(id, _)| id.clone()).collect()
}

/// Divergence between the pooled distribution of `video_ids` and `phi_s`.
pub fn query_set_divergence<S: AsRef<str>>(
    dataset: &Dataset,
    video_ids: &[S],
    phi_s: &ConditionalDistribution,
    epsilon: f64,
) -> Result<f64> {
    let bias_type = phi_s.bias_type();
    let videos = dataset.lookup(video_ids)?;
    let phi_q = conditional_distribution(videos, &bias_type, target_size(dataset, &bias_type));
    distribution_divergence(&phi_q, phi_s, epsilon)
}

pub fn support_distribution(support: &[&VideoSample], dataset: &Dataset, bias_type: &BiasType) -> ConditionalDistribution {
    conditional_distribution(support.iter().copied(), bias_type, target_size(dataset, bias_type))
}

pub fn build_episode(dataset: &Dataset, config: &SplitConfig, epoch: usize) -> Result<EpisodeSplit> {
    let (support_ids, candidate_ids) = split_support(dataset, config, epoch)?;
    if config.query_size > candidate_ids.len() {
        warn!(
            "query size {} exceeds the {} candidate videos; query sets are saturated",
            config.query_size,
            candidate_ids.len()
        );
    }
    let support = dataset.lookup(&support_ids)?;
    let bias_types = config.bias_types(dataset);
    let query_sets = par::try_map(&bias_types, |bias_type| {
        let phi_s = support_distribution(&support, dataset, bias_type);
        let scores = score_candidates(&candidate_ids, dataset, &phi_s, bias_type, config.epsilon)?;
        let videos = construct_query_set(&scores, config.query_size);
        let selected: f64 = scores
            .iter()
            .filter(|(id, _)| videos.contains(id))
            .map(|(_, s)| s)
            .sum();
        let mean_kl = if videos.is_empty() { 0.0 } else { selected / videos.len() as f64 };
        Ok::<_, Error>(QuerySet {
            bias_type: *bias_type,
            videos,
            mean_kl,
        })
    })?;
    Ok(EpisodeSplit {
        epoch,
        support_ids,
        query_sets,
    })
}
