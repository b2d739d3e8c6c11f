//! Meta training, meta testing and second-order meta-optimization.
//!
//! One meta-update on parameters `ω` with support batch `S` and query
//! batches `Q_1..Q_N`:
//!
//! ```text
//! ω'  = ω − α ∇L(S; ω)                          (virtual step, ω untouched)
//! J   = L(S; ω) + Σ_n L(Q_n; ω')                (meta objective)
//! ∇J  = ∇L(S; ω) + Σ_n (I − α H_S(ω)) ∇L(Q_n; ω')
//! ω  ← ω − β ∇J
//! ```
//!
//! `H_S(ω)·v` is taken by central differences of the model gradient, so a
//! model only has to provide a loss and its first derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::stream_rng;
use crate::splitter::{build_episode, SplitConfig};
use crate::triplet::{Dataset, VideoSample};
use rand::seq::{IndexedRandom, SliceRandom};

/// Meta-training (inner, virtual) learning rate.
pub const DEFAULT_ALPHA: f64 = 0.0005;
/// Meta-optimization (outer) learning rate.
pub const DEFAULT_BETA: f64 = 0.01;

/// Flat parameter vector `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let v = ParamVector(values);
        v.check_finite("parameter")?;
        Ok(v)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    /// Wraps values without the finiteness check; for model-internal use.
    pub fn from_raw(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self + scale · other`
    pub fn add_scaled(&self, scale: f64, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + scale * b).collect())
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { what, index }),
            None => Ok(()),
        }
    }
}

/// Loss and gradient over an opaque batch type. Both must be pure.
pub trait DifferentiableModel: Sync {
    type Batch: Sync;

    fn dim(&self) -> usize;

    fn loss(&self, params: &ParamVector, batch: &Self::Batch) -> f64;

    fn grad(&self, params: &ParamVector, batch: &Self::Batch) -> ParamVector;
}

/// Turns a set of videos into a model batch; `None` when the videos yield no
/// usable instances.
pub trait Featurizer: Sync {
    type Batch;

    fn featurize(&self, videos: &[&VideoSample]) -> Result<Option<Self::Batch>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Exact meta-gradient (with the Hessian-vector term) versus the
    /// first-order approximation.
    pub second_order: bool,
    /// Relative finite-difference step for Hessian-vector products.
    pub hvp_step: f64,
    pub epochs: usize,
    /// Support videos per meta-update.
    pub support_batch: usize,
    /// Videos sampled from each query set per meta-update.
    pub query_batch: usize,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    /// Abort when any loss exceeds this value.
    pub divergence_limit: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            second_order: true,
            hvp_step: 1e-5,
            epochs: 30,
            support_batch: 20,
            query_batch: 20,
            early_stop_window: 5,
            early_stop_tol: 1e-6,
            divergence_limit: 1e6,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("hvp_step", self.hvp_step),
            ("divergence_limit", self.divergence_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.support_batch == 0 || self.query_batch == 0 {
            return Err(Error::validation("batch sizes must be positive"));
        }
        Ok(())
    }
}

fn finite_loss(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what: "loss", index: 0 })
    }
}

fn checked_grad<M: DifferentiableModel>(model: &M, params: &ParamVector, batch: &M::Batch) -> Result<ParamVector> {
    let g = model.grad(params, batch);
    g.check_finite("gradient")?;
    Ok(g)
}

/// `ω' = ω − α ∇L(support; ω)`. Returns a new vector; `omega` is never touched.
pub fn meta_train_step<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    support_batch: &M::Batch,
    alpha: f64,
) -> Result<ParamVector> {
    let g = checked_grad(model, omega, support_batch)?;
    Ok(omega.add_scaled(-alpha, &g))
}

pub fn meta_test_loss<M: DifferentiableModel>(model: &M, omega_prime: &ParamVector, query_batch: &M::Batch) -> Result<f64> {
    omega_prime.check_finite("parameter")?;
    finite_loss(model.loss(omega_prime, query_batch))
}

/// `L(S; ω) + Σ_n L(Q_n; ω − α∇L(S; ω))`
pub fn meta_objective<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    support_batch: &M::Batch,
    query_batches: &[&M::Batch],
    alpha: f64,
) -> Result<f64> {
    let train = finite_loss(model.loss(omega, support_batch))?;
    let omega_prime = meta_train_step(model, omega, support_batch, alpha)?;
    let mut total = train;
    for q in query_batches {
        total += meta_test_loss(model, &omega_prime, q)?;
    }
    Ok(total)
}

/// Central-difference Hessian-vector product `H(ω)·v`.
pub fn hessian_vector_product<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    batch: &M::Batch,
    v: &ParamVector,
    hvp_step: f64,
) -> Result<ParamVector> {
    let v_norm = v.norm();
    if !v_norm.is_finite() {
        return Err(Error::NonFinite { what: "HVP direction", index: 0 });
    }
    if v_norm == 0.0 {
        return Ok(ParamVector::zeros(v.dim()));
    }
    let h = hvp_step * omega.norm().max(1.0) / v_norm.max(f64::MIN_POSITIVE);
    let plus = model.grad(&omega.add_scaled(h, v), batch);
    let minus = model.grad(&omega.add_scaled(-h, v), batch);
    let hv = ParamVector(
        plus.0
            .iter()
            .zip(&minus.0)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect(),
    );
    hv.check_finite("Hessian-vector product")?;
    Ok(hv)
}

/// Everything produced while evaluating one meta-gradient.
#[derive(Debug, Clone)]
pub struct MetaStep {
    pub gradient: ParamVector,
    pub train_loss: f64,
    /// `L(Q_n; ω')` per query batch, in input order.
    pub test_losses: Vec<f64>,
    /// Model gradient evaluations spent.
    pub grad_evals: u64,
}

impl MetaStep {
    pub fn objective(&self) -> f64 {
        self.train_loss + self.test_losses.iter().sum::<f64>()
    }
}

pub fn meta_step<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    support_batch: &M::Batch,
    query_batches: &[&M::Batch],
    config: &MetaConfig,
) -> Result<MetaStep> {
    let train_loss = finite_loss(model.loss(omega, support_batch))?;
    // ∇L_tr is evaluated once and reused for both the virtual step and the
    // committed update; the model is pure so the two are identical.
    let g_train = checked_grad(model, omega, support_batch)?;
    let omega_prime = omega.add_scaled(-config.alpha, &g_train);

    let per_query = par::try_map(query_batches, |q| {
        let loss = meta_test_loss(model, &omega_prime, q)?;
        let g_test = checked_grad(model, &omega_prime, q)?;
        if config.second_order {
            let hv = hessian_vector_product(model, omega, support_batch, &g_test, config.hvp_step)?;
            Ok::<_, Error>((loss, g_test.add_scaled(-config.alpha, &hv)))
        } else {
            Ok((loss, g_test))
        }
    })?;

    let mut gradient = g_train;
    let mut test_losses = Vec::with_capacity(per_query.len());
    for (loss, g) in &per_query {
        gradient.add_assign(g);
        test_losses.push(*loss);
    }
    let per_query_evals = if config.second_order { 3 } else { 1 };
    Ok(MetaStep {
        gradient,
        train_loss,
        test_losses,
        grad_evals: 1 + per_query_evals * query_batches.len() as u64,
    })
}

pub fn meta_gradient<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    support_batch: &M::Batch,
    query_batches: &[&M::Batch],
    config: &MetaConfig,
) -> Result<ParamVector> {
    Ok(meta_step(model, omega, support_batch, query_batches, config)?.gradient)
}

/// `ω − β ∇J`; the only operation that commits a parameter change.
pub fn meta_update<M: DifferentiableModel>(
    model: &M,
    omega: &ParamVector,
    support_batch: &M::Batch,
    query_batches: &[&M::Batch],
    config: &MetaConfig,
) -> Result<ParamVector> {
    let g = meta_gradient(model, omega, support_batch, query_batches, config)?;
    Ok(omega.add_scaled(-config.beta, &g))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iter: usize,
    pub train_loss: f64,
    /// One slot per active bias type; `None` when the query batch was empty.
    pub test_losses: Vec<Option<f64>>,
    pub meta_grad_norm: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct History {
    pub bias_types: Vec<String>,
    pub records: Vec<IterationRecord>,
    pub grad_evals: u64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

impl History {
    /// Mean meta-objective of each completed epoch.
    pub fn epoch_objectives(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = vec![(0.0, 0); self.epochs_run];
        for r in &self.records {
            out[r.epoch].0 += r.objective;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// CSV with columns `epoch, iter, L_tr, L_te_1..L_te_N, meta_grad_norm`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["epoch".to_string(), "iter".to_string(), "L_tr".to_string()];
        header.extend((1..=self.bias_types.len()).map(|n| format!("L_te_{n}")));
        header.push("meta_grad_norm".to_string());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.iter.to_string(), r.train_loss.to_string()];
            row.extend(r.test_losses.iter().map(|l| l.map(|v| v.to_string()).unwrap_or_default()));
            row.push(r.meta_grad_norm.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("history.csv", e))?;
        Ok(())
    }
}

fn guard(limit: f64, epoch: usize, iter: usize, what: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value > limit {
        return Err(Error::Divergence {
            epoch,
            iter,
            what: what.to_string(),
            value,
        });
    }
    Ok(())
}

/// Episodic meta-training: every epoch re-splits the data, then walks the
/// support set in shuffled batches, pairing each with one sampled batch per
/// query set.
pub fn train<M, F>(
    model: &M,
    featurizer: &F,
    dataset: &Dataset,
    split_config: &SplitConfig,
    meta_config: &MetaConfig,
    init: ParamVector,
) -> Result<(ParamVector, History)>
where
    M: DifferentiableModel,
    F: Featurizer<Batch = M::Batch>,
    M::Batch: Send,
{
    meta_config.validate()?;
    if init.dim() != model.dim() {
        return Err(Error::LengthMismatch {
            left: init.dim(),
            right: model.dim(),
        });
    }
    init.check_finite("parameter")?;
    let bias_types = split_config.bias_types(dataset);
    let mut history = History {
        bias_types: bias_types.iter().map(|b| b.tag()).collect(),
        ..History::default()
    };
    let mut omega = init;
    let mut epoch_objectives: Vec<f64> = Vec::new();

    for epoch in 0..meta_config.epochs {
        let episode = build_episode(dataset, split_config, epoch)?;
        let mut support = dataset.lookup(&episode.support_ids)?;
        let queries = episode
            .query_sets
            .iter()
            .map(|q| dataset.lookup(&q.videos))
            .collect::<Result<Vec<_>>>()?;
        support.shuffle(&mut stream_rng(split_config.seed, &[0xB, epoch as u64]));

        let mut objective_sum = 0.0;
        let mut iters = 0;
        for (iter, chunk) in support.chunks(meta_config.support_batch).enumerate() {
            let Some(support_batch) = featurizer.featurize(chunk)? else {
                continue;
            };
            let mut rng = stream_rng(split_config.seed, &[0xC, epoch as u64, iter as u64]);
            let mut slots = Vec::with_capacity(queries.len());
            let mut batches = Vec::new();
            for videos in &queries {
                let sampled: Vec<&VideoSample> = videos
                    .choose_multiple(&mut rng, meta_config.query_batch)
                    .copied()
                    .collect();
                match featurizer.featurize(&sampled)? {
                    Some(b) => {
                        slots.push(Some(batches.len()));
                        batches.push(b);
                    }
                    None => slots.push(None),
                }
            }
            let refs: Vec<&M::Batch> = batches.iter().collect();
            let step = meta_step(model, &omega, &support_batch, &refs, meta_config)?;

            let limit = meta_config.divergence_limit;
            guard(limit, epoch, iter, "L_tr", step.train_loss)?;
            for (n, l) in step.test_losses.iter().enumerate() {
                guard(limit, epoch, iter, &format!("L_te_{}", n + 1), *l)?;
            }
            omega = omega.add_scaled(-meta_config.beta, &step.gradient);
            omega.check_finite("parameter")?;

            let objective = step.objective();
            history.grad_evals += step.grad_evals;
            history.records.push(IterationRecord {
                epoch,
                iter,
                train_loss: step.train_loss,
                test_losses: slots.iter().map(|s| s.map(|i| step.test_losses[i])).collect(),
                meta_grad_norm: step.gradient.norm(),
                objective,
            });
            objective_sum += objective;
            iters += 1;
        }
        history.epochs_run = epoch + 1;
        epoch_objectives.push(objective_sum / iters.max(1) as f64);

        let window = meta_config.early_stop_window;
        if window > 0 && epoch_objectives.len() > window {
            let base = epoch_objectives[epoch_objectives.len() - 1 - window];
            let best_recent = epoch_objectives[epoch_objectives.len() - window..]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if base - best_recent < meta_config.early_stop_tol {
                history.early_stopped = true;
                break;
            }
        }
    }
    Ok((omega, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `L(ω; c) = ½ Σ_i d_i (ω_i − c_i)²`
    struct Quadratic {
        diag: Vec<f64>,
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

    fn scalar() -> Quadratic {
        Quadratic { diag: vec![1.0] }
    }

    fn p(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn cfg() -> MetaConfig {
        MetaConfig {
            alpha: 0.1,
            beta: 0.01,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn virtual_step() {
        let m = scalar();
        let w = p(&[2.0]);
        let w1 = meta_train_step(&m, &w, &vec![0.0], 0.1).unwrap();
        assert_abs_diff_eq!(w1.as_slice()[0], 1.8, epsilon = 1e-15);
        assert_eq!(w, p(&[2.0]));
        assert_eq!(meta_train_step(&m, &w, &vec![2.0], 0.1).unwrap(), w);
    }

    #[test]
    fn scalar_quadratic_oracle() {
        let m = scalar();
        let w = p(&[2.0]);
        let (tr, te) = (vec![0.0], vec![1.0]);
        assert_abs_diff_eq!(meta_test_loss(&m, &p(&[1.8]), &te).unwrap(), 0.32, epsilon = 1e-12);
        assert_abs_diff_eq!(meta_objective(&m, &w, &tr, &[&te], 0.1).unwrap(), 2.32, epsilon = 1e-12);
        assert_abs_diff_eq!(meta_objective(&m, &w, &tr, &[], 0.1).unwrap(), 2.0, epsilon = 1e-15);
        let g = meta_gradient(&m, &w, &tr, &[&te], &cfg()).unwrap();
        assert_abs_diff_eq!(g.as_slice()[0], 2.72, epsilon = 1e-12);
        let first = MetaConfig {
            second_order: false,
            ..cfg()
        };
        assert_abs_diff_eq!(meta_gradient(&m, &w, &tr, &[&te], &first).unwrap().as_slice()[0], 2.8, epsilon = 1e-12);
        let w_new = meta_update(&m, &w, &tr, &[&te], &cfg()).unwrap();
        assert_abs_diff_eq!(w_new.as_slice()[0], 1.9728, epsilon = 1e-12);
    }

    #[test]
    fn hvp_cases() {
        let id = Quadratic { diag: vec![1.0, 1.0, 1.0] };
        let v = p(&[0.3, -2.0, 5.0]);
        let hv = hessian_vector_product(&id, &p(&[1.0, 2.0, 3.0]), &vec![0.0; 3], &v, 1e-5).unwrap();
        for (a, b) in hv.as_slice().iter().zip(v.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        let diag = Quadratic { diag: vec![1.0, 4.0] };
        let hv = hessian_vector_product(&diag, &p(&[0.5, -0.5]), &vec![0.0; 2], &p(&[1.0, 1.0]), 1e-5).unwrap();
        assert_abs_diff_eq!(hv.as_slice()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(hv.as_slice()[1], 4.0, epsilon = 1e-6);
        let zero = hessian_vector_product(&diag, &p(&[0.5, -0.5]), &vec![0.0; 2], &p(&[0.0, 0.0]), 1e-5).unwrap();
        assert_eq!(zero, ParamVector::zeros(2));
    }

    #[test]
    fn no_queries_is_plain_gradient_descent() {
        let m = Quadratic { diag: vec![1.0, 3.0] };
        let w = p(&[0.7, -1.3]);
        let c = vec![0.1, 0.2];
        let w_new = meta_update(&m, &w, &c, &[], &cfg()).unwrap();
        let g = m.grad(&w, &c);
        let expected: Vec<f64> = w.as_slice().iter().zip(g.as_slice()).map(|(w, g)| w - 0.01 * g).collect();
        assert_eq!(w_new.as_slice(), expected.as_slice());
    }

    struct Exploding;

    impl DifferentiableModel for Exploding {
        type Batch = ();
        fn dim(&self) -> usize {
            2
        }
        fn loss(&self, _: &ParamVector, _: &()) -> f64 {
            f64::INFINITY
        }
        fn grad(&self, _: &ParamVector, _: &()) -> ParamVector {
            ParamVector::from_raw(vec![0.0, f64::NAN])
        }
    }

    #[test]
    fn non_finite_values_are_reported() {
        let w = p(&[0.0, 0.0]);
        assert!(matches!(
            meta_train_step(&Exploding, &w, &(), 0.1),
            Err(Error::NonFinite { what: "gradient", index: 1 })
        ));
        assert!(matches!(meta_test_loss(&Exploding, &w, &()), Err(Error::NonFinite { .. })));
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let d = MetaConfig::default();
        assert_eq!((d.alpha, d.beta), (0.0005, 0.01));
        assert!(d.second_order);
        assert!(MetaConfig { beta: 0.0, ..d.clone() }.validate().is_err());
        assert!(MetaConfig { hvp_step: -1.0, ..d }.validate().is_err());
    }

    #[test]
    fn csv_leaves_skipped_terms_blank() {
        let h = History {
            bias_types: vec!["a".into(), "b".into()],
            records: vec![IterationRecord {
                epoch: 0,
                iter: 1,
                train_loss: 0.5,
                test_losses: vec![Some(0.25), None],
                meta_grad_norm: 2.0,
                objective: 0.75,
            }],
            grad_evals: 3,
            epochs_run: 1,
            early_stopped: false,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,iter,L_tr,L_te_1,L_te_2,meta_grad_norm\n0,1,0.5,0.25,,2\n");
    }
}
