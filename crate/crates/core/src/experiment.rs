//! Seeded head-to-head runs: meta-training versus the ERM baseline on the
//! synthetic task, evaluated on the consistent and contradicting test splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bias::BiasGroup;
use crate::error::Result;
use crate::meta::{train, History, MetaConfig, ParamVector};
use crate::metrics::{bias_gap, MetricsReport};
use crate::splitter::SplitConfig;
use crate::synth::{erm_baseline, featurize_dataset, generate_biased_dataset, SynthConfig, ToyFeaturizer, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub meta: MetaConfig,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub with_baseline: bool,
    /// ERM learning rate; the meta-optimization rate when unset.
    pub baseline_lr: Option<f64>,
    /// Standard deviation of the shared random initialisation.
    pub init_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            meta: MetaConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            ks: vec![1, 3],
            with_baseline: true,
            baseline_lr: None,
            init_scale: 0.01,
        }
    }
}

impl ExperimentConfig {
    /// Five-seed head-to-head on a 900-video synthetic task with three
    /// triplets per video. Both learners step at rate 1.0.
    pub fn benchmark() -> Self {
        Self {
            synth: SynthConfig {
                n_videos: 900,
                triplets_per_video: 3,
                ..SynthConfig::default()
            },
            split: SplitConfig {
                query_size: 20,
                ..SplitConfig::default()
            },
            meta: MetaConfig {
                beta: 1.0,
                epochs: 60,
                support_batch: 60,
                query_batch: 20,
                early_stop_window: 0,
                ..MetaConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, groups: &[BiasGroup]) -> Self {
        self.split.ablate = groups.to_vec();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub consistent: MetricsReport,
    pub contradicting: MetricsReport,
    pub bias_gap: BTreeMap<usize, f64>,
}

impl EvalSummary {
    /// Contradicting-split mean recall at `k`.
    pub fn contradicting_mr(&self, k: usize) -> f64 {
        self.contradicting.mean_recall_at_k[&k]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(skip)]
    pub params: ParamVector,
    #[serde(skip)]
    pub history: History,
    pub grad_evals: u64,
    pub meta: EvalSummary,
    #[serde(skip)]
    pub baseline_params: Option<ParamVector>,
    pub baseline: Option<EvalSummary>,
}

pub fn evaluate(
    model: &ToyModel,
    params: &ParamVector,
    consistent: &crate::synth::ToyBatch,
    contradicting: &crate::synth::ToyBatch,
    ks: &[usize],
) -> Result<EvalSummary> {
    let pc = model.predict(params, consistent)?;
    let px = model.predict(params, contradicting)?;
    let gaps = ks
        .iter()
        .map(|&k| Ok((k, bias_gap(&pc, &px, k)?)))
        .collect::<Result<_>>()?;
    Ok(EvalSummary {
        consistent: MetricsReport::new(&pc, ks)?,
        contradicting: MetricsReport::new(&px, ks)?,
        bias_gap: gaps,
    })
}

/// One seed: generate data, meta-train, optionally run ERM with the same
/// number of gradient evaluations, evaluate both.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let synth = SynthConfig {
        seed,
        ..config.synth.clone()
    };
    let split = SplitConfig {
        seed,
        ..config.split.clone()
    };
    let task = generate_biased_dataset(&synth)?;
    let model = ToyModel::for_config(&synth);
    let featurizer = ToyFeaturizer {
        feature_dim: synth.feature_dim,
    };
    let init = model.init_params(seed, config.init_scale);
    let (params, history) = train(&model, &featurizer, &task.train, &split, &config.meta, init.clone())?;

    let consistent = featurize_dataset(&task.test_consistent, synth.feature_dim)?;
    let contradicting = featurize_dataset(&task.test_contradicting, synth.feature_dim)?;
    let meta = evaluate(&model, &params, &consistent, &contradicting, &config.ks)?;

    let (baseline_params, baseline) = if config.with_baseline {
        let full = featurize_dataset(&task.train, synth.feature_dim)?;
        let lr = config.baseline_lr.unwrap_or(config.meta.beta);
        let w = erm_baseline(&model, &full, init, lr, history.grad_evals, config.meta.divergence_limit)?;
        let summary = evaluate(&model, &w, &consistent, &contradicting, &config.ks)?;
        (Some(w), Some(summary))
    } else {
        (None, None)
    };

    Ok(SeedRun {
        seed,
        grad_evals: history.grad_evals,
        params,
        history,
        meta,
        baseline_params,
        baseline,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    config.seeds.iter().map(|&s| run_seed(config, s)).collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}
