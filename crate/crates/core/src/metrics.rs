//! Recall@K, Mean Recall@K and the consistent/contradicting bias gap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::triplet::CategoryId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstanceTag {
    pub subject: CategoryId,
    pub object: CategoryId,
    /// Previous predicate under the same subject-object pair, if any.
    pub prev_predicate: Option<CategoryId>,
}

/// Predicate scores and ground truth per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    n_classes: usize,
    scores: Vec<Vec<f64>>,
    truth: Vec<CategoryId>,
    tags: Vec<InstanceTag>,
}

impl PredictionSet {
    pub fn new(n_classes: usize, scores: Vec<Vec<f64>>, truth: Vec<CategoryId>) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: truth.len(),
            });
        }
        for (i, (s, &t)) in scores.iter().zip(&truth).enumerate() {
            if s.len() != n_classes {
                return Err(Error::validation(format!(
                    "instance {i} has {} scores, expected {n_classes}",
                    s.len()
                )));
            }
            if t >= n_classes {
                return Err(Error::validation(format!("instance {i} ground truth {t} out of range")));
            }
        }
        Ok(Self {
            n_classes,
            scores,
            truth,
            tags: Vec::new(),
        })
    }

    pub fn with_tags(mut self, tags: Vec<InstanceTag>) -> Result<Self> {
        if tags.len() != self.truth.len() {
            return Err(Error::LengthMismatch {
                left: tags.len(),
                right: self.truth.len(),
            });
        }
        self.tags = tags;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn truth(&self) -> &[CategoryId] {
        &self.truth
    }

    pub fn tags(&self) -> &[InstanceTag] {
        &self.tags
    }

    /// Zero-based rank of the ground truth; equal scores rank the lower class first.
    fn rank(&self, i: usize) -> usize {
        let s = &self.scores[i];
        let t = self.truth[i];
        s.iter()
            .enumerate()
            .filter(|&(j, &v)| v > s[t] || (v == s[t] && j < t))
            .count()
    }

    fn hits(&self, k: usize) -> impl Iterator<Item = (CategoryId, bool)> + '_ {
        (0..self.len()).map(move |i| (self.truth[i], self.rank(i) < k))
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::validation("prediction set is empty"));
        }
        Ok(())
    }
}

pub fn recall_at_k(preds: &PredictionSet, k: usize) -> Result<f64> {
    preds.check(k)?;
    let hit = preds.hits(k).filter(|(_, h)| *h).count();
    Ok(100.0 * hit as f64 / preds.len() as f64)
}

/// Recall@k per class; `None` for classes absent from the ground truth.
pub fn per_class_recall(preds: &PredictionSet, k: usize) -> Result<Vec<Option<f64>>> {
    preds.check(k)?;
    let mut hit = vec![0usize; preds.n_classes];
    let mut total = vec![0usize; preds.n_classes];
    for (c, h) in preds.hits(k) {
        total[c] += 1;
        hit[c] += h as usize;
    }
    Ok(hit
        .into_iter()
        .zip(total)
        .map(|(h, n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
        .collect())
}

pub fn mean_recall_at_k(preds: &PredictionSet, k: usize) -> Result<f64> {
    let present: Vec<f64> = per_class_recall(preds, k)?.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `MR@k(consistent) − MR@k(contradicting)`
pub fn bias_gap(consistent: &PredictionSet, contradicting: &PredictionSet, k: usize) -> Result<f64> {
    Ok(mean_recall_at_k(consistent, k)? - mean_recall_at_k(contradicting, k)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mean_recall_at_k: BTreeMap<usize, f64>,
    pub per_class_recall: BTreeMap<usize, Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_gap: Option<BTreeMap<usize, f64>>,
}

impl MetricsReport {
    pub fn new(preds: &PredictionSet, ks: &[usize]) -> Result<Self> {
        let mut report = MetricsReport {
            instances: preds.len(),
            recall_at_k: BTreeMap::new(),
            mean_recall_at_k: BTreeMap::new(),
            per_class_recall: BTreeMap::new(),
            bias_gap: None,
        };
        for &k in ks {
            report.recall_at_k.insert(k, recall_at_k(preds, k)?);
            report.mean_recall_at_k.insert(k, mean_recall_at_k(preds, k)?);
            report.per_class_recall.insert(k, per_class_recall(preds, k)?);
        }
        Ok(report)
    }

    pub fn with_bias_gap(mut self, consistent: &PredictionSet, contradicting: &PredictionSet) -> Result<Self> {
        let gaps = self
            .recall_at_k
            .keys()
            .map(|&k| Ok((k, bias_gap(consistent, contradicting, k)?)))
            .collect::<Result<_>>()?;
        self.bias_gap = Some(gaps);
        Ok(self)
    }

    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>6} {:>10} {:>10} {:>10}", "K", "R@K", "MR@K", "gap@K");
        for (k, r) in &self.recall_at_k {
            let gap = self
                .bias_gap
                .as_ref()
                .and_then(|g| g.get(k))
                .map_or_else(|| "-".to_string(), |g| format!("{g:.2}"));
            let _ = writeln!(out, "{:>6} {:>10.2} {:>10.2} {:>10}", k, r, self.mean_recall_at_k[k], gap);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// One-hot style scores that put `predicted` first.
    fn preds(n: usize, pairs: &[(usize, usize)]) -> PredictionSet {
        let scores = pairs
            .iter()
            .map(|&(_, p)| (0..n).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
            .collect();
        PredictionSet::new(n, scores, pairs.iter().map(|&(t, _)| t).collect()).unwrap()
    }

    #[test]
    fn recall_cases() {
        let perfect = preds(4, &[(0, 0), (1, 1), (3, 3)]);
        assert_eq!(recall_at_k(&perfect, 1).unwrap(), 100.0);
        let imperfect = preds(4, &[(0, 0), (1, 1), (2, 2), (3, 0)]);
        assert_eq!(recall_at_k(&imperfect, 1).unwrap(), 75.0);
        assert_eq!(recall_at_k(&imperfect, 4).unwrap(), 100.0);
        assert_eq!(recall_at_k(&imperfect, 9).unwrap(), 100.0);
        let empty = PredictionSet::new(3, vec![], vec![]).unwrap();
        assert!(recall_at_k(&empty, 1).is_err());
        assert!(recall_at_k(&imperfect, 0).is_err());
    }

    #[test]
    fn mean_recall_cases() {
        // class 0: 3 of 4 hit, class 1: 1 of 2 hit
        let p = preds(2, &[(0, 0), (0, 0), (0, 0), (0, 1), (1, 1), (1, 0)]);
        assert_abs_diff_eq!(mean_recall_at_k(&p, 1).unwrap(), 62.5, epsilon = 1e-12);
        assert_eq!(per_class_recall(&p, 1).unwrap(), vec![Some(75.0), Some(50.0)]);

        let sym = preds(3, &[(0, 0), (0, 1), (2, 2), (2, 0)]);
        assert_abs_diff_eq!(mean_recall_at_k(&sym, 1).unwrap(), 50.0, epsilon = 1e-12);
        assert_eq!(per_class_recall(&sym, 1).unwrap()[1], None);

        let single = preds(3, &[(1, 1), (1, 0), (1, 1)]);
        assert_eq!(mean_recall_at_k(&single, 1).unwrap(), recall_at_k(&single, 1).unwrap());
    }

    #[test]
    fn ties_rank_lower_class_first() {
        let flat = PredictionSet::new(3, vec![vec![0.0; 3]; 3], vec![0, 1, 2]).unwrap();
        assert_eq!(per_class_recall(&flat, 1).unwrap(), vec![Some(100.0), Some(0.0), Some(0.0)]);
        assert_eq!(recall_at_k(&flat, 2).unwrap(), 200.0 / 3.0);
    }

    #[test]
    fn gap_cases() {
        let a = preds(2, &[(0, 0), (1, 1)]);
        assert_eq!(bias_gap(&a, &a, 1).unwrap(), 0.0);
        // perfect vs chance over 6 classes: each class hit once in six
        let perfect = preds(6, &(0..6).map(|c| (c, c)).collect::<Vec<_>>());
        let chance_pairs: Vec<(usize, usize)> = (0..6)
            .flat_map(|c| (0..6).map(move |p| (c, p)))
            .collect();
        let chance = preds(6, &chance_pairs);
        assert_abs_diff_eq!(bias_gap(&perfect, &chance, 1).unwrap(), 100.0 - 100.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn report_and_table() {
        let a = preds(2, &[(0, 0), (1, 0)]);
        let r = MetricsReport::new(&a, &[1, 2]).unwrap().with_bias_gap(&a, &a).unwrap();
        assert_eq!(r.recall_at_k[&1], 50.0);
        assert_eq!(r.bias_gap.as_ref().unwrap()[&2], 0.0);
        let table = r.to_table();
        assert!(table.lines().count() == 3 && table.contains("MR@K"));
    }
}
