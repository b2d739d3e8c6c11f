#![allow(dead_code)]

use meta_debias::meta::{DifferentiableModel, ParamVector};
use meta_debias::synth::{featurize, generate_biased_dataset, SynthConfig, ToyBatch, ToyModel};
use meta_debias::triplet::VideoSample;

/// `L(ω; c) = ½ Σ_i d_i (ω_i − c_i)²`
pub struct Quadratic {
    pub diag: Vec<f64>,
}

impl DifferentiableModel for Quadratic {
    type Batch = Vec<f64>;

    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn loss(&self, w: &ParamVector, c: &Vec<f64>) -> f64 {
        w.as_slice()
            .iter()
            .zip(c)
            .zip(&self.diag)
            .map(|((w, c), d)| 0.5 * d * (w - c).powi(2))
            .sum()
    }

    fn grad(&self, w: &ParamVector, c: &Vec<f64>) -> ParamVector {
        ParamVector::from_raw(
            w.as_slice()
                .iter()
                .zip(c)
                .zip(&self.diag)
                .map(|((w, c), d)| d * (w - c))
                .collect(),
        )
    }
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn numeric_gradient(f: impl Fn(&ParamVector) -> f64, w: &ParamVector, h: f64) -> Vec<f64> {
    (0..w.dim())
        .map(|i| {
            let mut plus = w.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            (f(&ParamVector::from_raw(plus)) - f(&ParamVector::from_raw(minus))) / (2.0 * h)
        })
        .collect()
}

/// Componentwise `|a − b| ≤ rtol·|b| + atol`; `atol` absorbs differencing
/// noise on components that are zero.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            (a - n).abs() <= rtol * n.abs() + atol,
            "component {i}: analytic {a} vs numeric {n}"
        );
    }
}

/// A 2 subject, 3 predicate, 2 object task with 2-d features: 30 parameters.
pub fn small_toy(seed: u64) -> (ToyModel, Vec<ToyBatch>) {
    let cfg = SynthConfig {
        n_subjects: 2,
        n_predicates: 3,
        n_objects: 2,
        feature_dim: 2,
        n_videos: 12,
        n_test_videos: 2,
        triplets_per_video: 4,
        seed,
        ..SynthConfig::default()
    };
    let task = generate_biased_dataset(&cfg).unwrap();
    let model = ToyModel::for_config(&cfg);
    let videos: Vec<&VideoSample> = task.train.videos.iter().collect();
    let batches = videos
        .chunks(4)
        .map(|c| featurize(c, cfg.feature_dim).unwrap())
        .collect();
    (model, batches)
}
