//! Conditional-bias taxonomy and the statistics used to score it.
//!
//! There are 15 bias types. Nine are spatial: each triplet component
//! (subject, predicate, object) is predicted from both of the other two, or
//! from either one alone. Six are temporal: each component is predicted from
//! the same component of the nearest earlier (forward) or later (backward)
//! triplet that shares the other two components.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triplet::{CategoryId, Dataset, TripletInstance, VideoSample, VocabKind};

/// Smoothing constant used for KL scores unless configured otherwise.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Subject,
    Predicate,
    Object,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Subject, Component::Predicate, Component::Object];

    pub fn of(self, t: &TripletInstance) -> CategoryId {
        match self {
            Component::Subject => t.subject,
            Component::Predicate => t.predicate,
            Component::Object => t.object,
        }
    }

    pub fn vocab_kind(self) -> VocabKind {
        match self {
            Component::Subject => VocabKind::Subject,
            Component::Predicate => VocabKind::Predicate,
            Component::Object => VocabKind::Object,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Subject => "subject",
            Component::Predicate => "predicate",
            Component::Object => "object",
        }
    }

    /// The two components other than `self`, in canonical order.
    pub fn others(self) -> [Component; 2] {
        match self {
            Component::Subject => [Component::Predicate, Component::Object],
            Component::Predicate => [Component::Subject, Component::Object],
            Component::Object => [Component::Subject, Component::Predicate],
        }
    }

    fn bit(self) -> u8 {
        match self {
            Component::Subject => 1,
            Component::Predicate => 2,
            Component::Object => 4,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "subject" => Some(Component::Subject),
            "predicate" => Some(Component::Predicate),
            "object" => Some(Component::Object),
            _ => None,
        }
    }
}

/// A set of triplet components, iterated in subject, predicate, object order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub fn of(components: &[Component]) -> Self {
        ComponentSet(components.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn contains(self, c: Component) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    None,
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BiasType {
    target: Component,
    conditioning: ComponentSet,
    direction: Direction,
}

impl BiasType {
    /// Spatial type predicting `target` from `given` (one or both other components).
    pub fn spatial(target: Component, given: &[Component]) -> Result<Self> {
        let conditioning = ComponentSet::of(given);
        if conditioning.is_empty() || conditioning.contains(target) {
            return Err(Error::validation(format!(
                "spatial conditioning for {} must be a nonempty subset of the other components",
                target.name()
            )));
        }
        Ok(Self {
            target,
            conditioning,
            direction: Direction::None,
        })
    }

    pub fn temporal(target: Component, direction: Direction) -> Result<Self> {
        if direction == Direction::None {
            return Err(Error::validation("temporal bias types need a direction"));
        }
        Ok(Self {
            target,
            conditioning: ComponentSet::of(&target.others()),
            direction,
        })
    }

    /// All 15 types: the 9 spatial ones, then forward and backward temporal.
    pub fn all() -> Vec<BiasType> {
        let mut out = Vec::with_capacity(15);
        for target in Component::ALL {
            let [a, b] = target.others();
            for given in [&[a, b][..], &[a][..], &[b][..]] {
                out.push(BiasType::spatial(target, given).expect("valid by construction"));
            }
        }
        for direction in [Direction::Forward, Direction::Backward] {
            for target in Component::ALL {
                out.push(BiasType::temporal(target, direction).expect("valid by construction"));
            }
        }
        out
    }

    pub fn level(&self) -> Level {
        match self.direction {
            Direction::None => Level::Spatial,
            _ => Level::Temporal,
        }
    }

    pub fn target(&self) -> Component {
        self.target
    }

    pub fn conditioning(&self) -> ComponentSet {
        self.conditioning
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Stable string tag, e.g. `spatial:predicate|subject,object` or
    /// `forward:object|subject,predicate`.
    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.direction {
            Direction::None => "spatial",
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        };
        let given: Vec<&str> = self.conditioning.iter().map(Component::name).collect();
        write!(f, "{level}:{}|{}", self.target.name(), given.join(","))
    }
}

impl FromStr for BiasType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("unrecognised bias type tag `{s}`"));
        let (level, rest) = s.split_once(':').ok_or_else(bad)?;
        let (target, given) = rest.split_once('|').ok_or_else(bad)?;
        let target = Component::parse(target).ok_or_else(bad)?;
        let given = given
            .split(',')
            .map(|g| Component::parse(g).ok_or_else(bad))
            .collect::<Result<Vec<_>>>()?;
        let bt = match level {
            "spatial" => BiasType::spatial(target, &given)?,
            "forward" => BiasType::temporal(target, Direction::Forward)?,
            "backward" => BiasType::temporal(target, Direction::Backward)?,
            _ => return Err(bad()),
        };
        if bt.conditioning != ComponentSet::of(&given) {
            return Err(bad());
        }
        Ok(bt)
    }
}

impl Serialize for BiasType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Named groups of bias types, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasGroup {
    SpatialAll,
    TemporalAll,
    PredicateCentered,
    SubjectCentered,
    ObjectCentered,
    Forward,
    Backward,
}

impl BiasGroup {
    pub const ALL: [BiasGroup; 7] = [
        BiasGroup::SpatialAll,
        BiasGroup::TemporalAll,
        BiasGroup::PredicateCentered,
        BiasGroup::SubjectCentered,
        BiasGroup::ObjectCentered,
        BiasGroup::Forward,
        BiasGroup::Backward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BiasGroup::SpatialAll => "spatial-all",
            BiasGroup::TemporalAll => "temporal-all",
            BiasGroup::PredicateCentered => "predicate-centered",
            BiasGroup::SubjectCentered => "subject-centered",
            BiasGroup::ObjectCentered => "object-centered",
            BiasGroup::Forward => "forward",
            BiasGroup::Backward => "backward",
        }
    }

    /// The centered groups are subdivisions of the spatial level.
    pub fn contains(self, bt: &BiasType) -> bool {
        let spatial = bt.level() == Level::Spatial;
        match self {
            BiasGroup::SpatialAll => spatial,
            BiasGroup::TemporalAll => !spatial,
            BiasGroup::PredicateCentered => spatial && bt.target == Component::Predicate,
            BiasGroup::SubjectCentered => spatial && bt.target == Component::Subject,
            BiasGroup::ObjectCentered => spatial && bt.target == Component::Object,
            BiasGroup::Forward => bt.direction == Direction::Forward,
            BiasGroup::Backward => bt.direction == Direction::Backward,
        }
    }
}

impl fmt::Display for BiasGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BiasGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BiasGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown ablation group `{s}`")))
    }
}

/// Whether `bt` predicts a component whose vocabulary has a single category.
pub fn is_degenerate(dataset: &Dataset, bt: &BiasType) -> bool {
    dataset.vocab(bt.target.vocab_kind()).size() == 1
}

pub fn enumerate_bias_types(dataset: &Dataset, skip_degenerate: bool) -> Vec<BiasType> {
    BiasType::all()
        .into_iter()
        .filter(|bt| !(skip_degenerate && is_degenerate(dataset, bt)))
        .collect()
}

/// Conditioning ids in subject, predicate, object order; temporal keys append
/// the target id of the paired earlier (or later) triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ConditionKey(pub Vec<CategoryId>);

pub type Event = (ConditionKey, CategoryId);

pub fn spatial_events(video: &VideoSample, bias_type: &BiasType) -> Vec<Event> {
    assert_eq!(bias_type.level(), Level::Spatial, "spatial_events needs a spatial type");
    video
        .triplets
        .iter()
        .map(|t| {
            let key = bias_type.conditioning.iter().map(|c| c.of(t)).collect();
            (ConditionKey(key), bias_type.target.of(t))
        })
        .collect()
}

pub fn temporal_events(video: &VideoSample, bias_type: &BiasType) -> Vec<Event> {
    assert_eq!(bias_type.level(), Level::Temporal, "temporal_events needs a temporal type");
    let mut order: Vec<&TripletInstance> = video.triplets.iter().collect();
    if bias_type.direction == Direction::Backward {
        // reverse time only; order within a time group stays canonical
        order.sort_by_key(|t| (std::cmp::Reverse(t.time_index), t.subject, t.predicate, t.object));
    }
    let [a, b] = bias_type.target.others();
    let target = bias_type.target;
    let mut last_seen: HashMap<(CategoryId, CategoryId), CategoryId> = HashMap::new();
    let mut events = Vec::new();
    let mut start = 0;
    // Triplets sharing a time index are not each other's predecessors, so the
    // map is only updated after a whole time group has emitted its events.
    while start < order.len() {
        let time = order[start].time_index;
        let end = start + order[start..].iter().take_while(|t| t.time_index == time).count();
        let group = &order[start..end];
        for t in group {
            if let Some(&prev) = last_seen.get(&(a.of(t), b.of(t))) {
                events.push((ConditionKey(vec![a.of(t), b.of(t), prev]), target.of(t)));
            }
        }
        for t in group {
            last_seen.insert((a.of(t), b.of(t)), target.of(t));
        }
        start = end;
    }
    events
}

pub fn events(video: &VideoSample, bias_type: &BiasType) -> Vec<Event> {
    match bias_type.level() {
        Level::Spatial => spatial_events(video, bias_type),
        Level::Temporal => temporal_events(video, bias_type),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEntry {
    counts: Vec<u64>,
    total: u64,
    probs: Vec<f64>,
}

impl ConditionEntry {
    fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self { counts, total, probs }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of events behind this row.
    pub fn support_count(&self) -> u64 {
        self.total
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Per-condition distribution over the target vocabulary (φ).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistribution {
    bias_type: BiasType,
    target_size: usize,
    table: BTreeMap<ConditionKey, ConditionEntry>,
}

impl ConditionalDistribution {
    pub fn from_events(bias_type: BiasType, target_size: usize, events: impl IntoIterator<Item = Event>) -> Self {
        let mut raw: BTreeMap<ConditionKey, Vec<u64>> = BTreeMap::new();
        for (key, target) in events {
            raw.entry(key).or_insert_with(|| vec![0; target_size])[target] += 1;
        }
        Self {
            bias_type,
            target_size,
            table: raw
                .into_iter()
                .map(|(k, c)| (k, ConditionEntry::from_counts(c)))
                .collect(),
        }
    }

    pub fn bias_type(&self) -> BiasType {
        self.bias_type
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn get(&self, key: &ConditionKey) -> Option<&ConditionEntry> {
        self.table.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ConditionKey, &ConditionEntry)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn total_events(&self) -> u64 {
        self.table.values().map(|e| e.total).sum()
    }

    /// Sums the raw counts of two distributions of the same bias type.
    pub fn merge(&self, other: &ConditionalDistribution) -> Result<ConditionalDistribution> {
        check_same_type(self, other)?;
        let mut raw: BTreeMap<ConditionKey, Vec<u64>> =
            self.table.iter().map(|(k, e)| (k.clone(), e.counts.clone())).collect();
        for (k, e) in &other.table {
            let row = raw.entry(k.clone()).or_insert_with(|| vec![0; self.target_size]);
            for (r, c) in row.iter_mut().zip(&e.counts) {
                *r += c;
            }
        }
        Ok(Self {
            bias_type: self.bias_type,
            target_size: self.target_size,
            table: raw
                .into_iter()
                .map(|(k, c)| (k, ConditionEntry::from_counts(c)))
                .collect(),
        })
    }

    /// JSON report with category names resolved against `dataset`.
    pub fn to_report(&self, dataset: &Dataset) -> DistributionReport {
        let vocab = dataset.vocab(self.bias_type.target.vocab_kind());
        DistributionReport {
            bias_type: self.bias_type.tag(),
            entries: self
                .table
                .iter()
                .map(|(key, e)| ReportEntry {
                    key: key.0.clone(),
                    counts: e.total,
                    probs: vocab
                        .names()
                        .iter()
                        .zip(&e.probs)
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(n, &p)| (n.clone(), p))
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionReport {
    pub bias_type: String,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub key: Vec<CategoryId>,
    pub counts: u64,
    pub probs: BTreeMap<String, f64>,
}

pub fn conditional_distribution<'a, I>(videos: I, bias_type: &BiasType, target_size: usize) -> ConditionalDistribution
where
    I: IntoIterator<Item = &'a VideoSample>,
{
    ConditionalDistribution::from_events(
        *bias_type,
        target_size,
        videos.into_iter().flat_map(|v| events(v, bias_type)),
    )
}

/// Convenience wrapper reading the target vocabulary size from `dataset`.
pub fn dataset_distribution(dataset: &Dataset, bias_type: &BiasType) -> ConditionalDistribution {
    let size = dataset.vocab(bias_type.target.vocab_kind()).size();
    conditional_distribution(&dataset.videos, bias_type, size)
}

/// `D_KL(p ‖ q)` in nats after additive smoothing `(v + ε) / (1 + len·ε)`.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::validation("KL smoothing epsilon must be positive"));
    }
    let norm = 1.0 + p.len() as f64 * epsilon;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let ps = (pi + epsilon) / norm;
            let qs = (qi + epsilon) / norm;
            ps * (ps / qs).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

fn check_same_type(a: &ConditionalDistribution, b: &ConditionalDistribution) -> Result<()> {
    if a.bias_type != b.bias_type {
        return Err(Error::BiasTypeMismatch {
            left: a.bias_type.tag(),
            right: b.bias_type.tag(),
        });
    }
    Ok(())
}

/// Event-count-weighted mean over `phi_a`'s keys of `KL(phi_a[k] ‖ phi_b[k])`.
/// Keys missing from `phi_b` are compared against the uniform distribution.
pub fn distribution_divergence(
    phi_a: &ConditionalDistribution,
    phi_b: &ConditionalDistribution,
    epsilon: f64,
) -> Result<f64> {
    check_same_type(phi_a, phi_b)?;
    let total = phi_a.total_events();
    if total == 0 {
        return Ok(0.0);
    }
    let uniform = vec![1.0 / phi_a.target_size as f64; phi_a.target_size];
    let mut acc = 0.0;
    for (key, entry) in &phi_a.table {
        let q = phi_b.table.get(key).map_or(uniform.as_slice(), |e| e.probs.as_slice());
        acc += entry.total as f64 * kl_divergence(&entry.probs, q, epsilon)?;
    }
    Ok(acc / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplet::{Vocabulary, VocabKind};
    use approx::assert_abs_diff_eq;

    // person=0 bear=1 | hold=0 drink_from=1 play=2 bite=3 | bottle=0 ball=1
    fn video(id: &str, triplets: &[(usize, usize, usize, u64)]) -> VideoSample {
        VideoSample::new(
            id,
            triplets.iter().map(|&(s, p, o, t)| TripletInstance::new(s, p, o, t)).collect(),
        )
        .unwrap()
    }

    fn dataset(subjects: &[&str]) -> Dataset {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Dataset::new(
            Vocabulary::new(VocabKind::Subject, v(subjects)).unwrap(),
            Vocabulary::new(VocabKind::Predicate, v(&["hold", "drink_from", "play", "bite"])).unwrap(),
            Vocabulary::new(VocabKind::Object, v(&["bottle", "ball"])).unwrap(),
            vec![video("v", &[(0, 0, 0, 0)])],
        )
        .unwrap()
    }

    fn pred_given(given: &[Component]) -> BiasType {
        BiasType::spatial(Component::Predicate, given).unwrap()
    }

    #[test]
    fn taxonomy_counts() {
        let all = enumerate_bias_types(&dataset(&["person", "bear"]), false);
        assert_eq!(all.len(), 15);
        assert_eq!(all.iter().filter(|b| b.level() == Level::Spatial).count(), 9);
        assert_eq!(all.iter().filter(|b| b.level() == Level::Temporal).count(), 6);
        assert_eq!(enumerate_bias_types(&dataset(&["person", "bear"]), true).len(), 15);

        let ag = enumerate_bias_types(&dataset(&["person"]), true);
        assert_eq!(ag.len(), 10);
        assert!(ag.iter().all(|b| b.target() != Component::Subject));
        assert_eq!(enumerate_bias_types(&dataset(&["person"]), false).len(), 15);
    }

    #[test]
    fn tags_round_trip_and_are_unique() {
        let all = BiasType::all();
        let tags: std::collections::HashSet<String> = all.iter().map(BiasType::tag).collect();
        assert_eq!(tags.len(), 15);
        for bt in all {
            assert_eq!(bt.tag().parse::<BiasType>().unwrap(), bt);
        }
        assert!("spatial:predicate|predicate".parse::<BiasType>().is_err());
        assert!("forward:predicate|subject".parse::<BiasType>().is_err());
    }

    #[test]
    fn spatial_event_projection() {
        let v = video("v", &[(0, 0, 0, 0)]);
        let ev = spatial_events(&v, &pred_given(&[Component::Subject, Component::Object]));
        assert_eq!(ev, vec![(ConditionKey(vec![0, 0]), 0)]);

        let bear = video("b", &[(1, 2, 1, 0)]);
        let ev = spatial_events(&bear, &pred_given(&[Component::Subject]));
        assert_eq!(ev, vec![(ConditionKey(vec![1]), 2)]);
    }

    #[test]
    fn temporal_event_forward_and_backward() {
        let v = video("v", &[(0, 0, 0, 0), (0, 1, 0, 1)]);
        let fwd = BiasType::temporal(Component::Predicate, Direction::Forward).unwrap();
        let bwd = BiasType::temporal(Component::Predicate, Direction::Backward).unwrap();
        assert_eq!(temporal_events(&v, &fwd), vec![(ConditionKey(vec![0, 0, 0]), 1)]);
        assert_eq!(temporal_events(&v, &bwd), vec![(ConditionKey(vec![0, 0, 1]), 0)]);

        let single = video("s", &[(0, 0, 0, 0)]);
        assert!(temporal_events(&single, &fwd).is_empty());
    }

    #[test]
    fn temporal_pairs_nearest_earlier_and_skips_same_time() {
        // hold@0, play@1 (other pair), bite@1 and drink@1 simultaneous, hold@4
        let v = video("v", &[(0, 0, 0, 0), (1, 2, 1, 1), (0, 3, 0, 1), (0, 1, 0, 1), (0, 0, 0, 4)]);
        let fwd = BiasType::temporal(Component::Predicate, Direction::Forward).unwrap();
        let mut ev = temporal_events(&v, &fwd);
        ev.sort();
        // both t=1 triplets pair with hold@0; hold@4 pairs with the last t=1 one in order
        assert_eq!(
            ev,
            vec![
                (ConditionKey(vec![0, 0, 0]), 1),
                (ConditionKey(vec![0, 0, 0]), 3),
                (ConditionKey(vec![0, 0, 3]), 0),
            ]
        );
    }

    #[test]
    fn distribution_counting() {
        let v = video("v", &[(1, 2, 1, 0), (1, 2, 1, 1), (1, 3, 1, 2)]);
        let phi = conditional_distribution([&v], &pred_given(&[Component::Subject]), 4);
        let e = phi.get(&ConditionKey(vec![1])).unwrap();
        assert_eq!(e.support_count(), 3);
        assert_abs_diff_eq!(e.probs()[2], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.probs()[3], 1.0 / 3.0, epsilon = 1e-15);

        let one = video("o", &[(0, 0, 0, 0)]);
        let phi = conditional_distribution([&one], &pred_given(&[Component::Subject, Component::Object]), 4);
        assert_eq!(phi.get(&ConditionKey(vec![0, 0])).unwrap().probs(), &[1.0, 0.0, 0.0, 0.0]);

        let none: [&VideoSample; 0] = [];
        assert!(conditional_distribution(none, &pred_given(&[Component::Subject]), 4).is_empty());
    }

    #[test]
    fn kl_closed_forms() {
        assert_abs_diff_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7], 1e-6).unwrap(), 0.0, epsilon = 1e-12);
        // 0.75 ln 1.5 + 0.25 ln 0.5
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_abs_diff_eq!(expected, 0.130812, epsilon = 1e-6);
        assert_abs_diff_eq!(kl_divergence(&[0.75, 0.25], &[0.5, 0.5], 1e-9).unwrap(), 0.130812, epsilon = 1e-5);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 1e-6).unwrap(), 2f64.ln(), epsilon = 1e-4);
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5], 1e-6),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn divergence_between_distributions() {
        let bt = pred_given(&[Component::Subject]);
        let play = video("a", &[(1, 2, 1, 0)]);
        let mixed = video("b", &[(1, 2, 1, 0), (1, 3, 1, 1)]);
        let phi_a = conditional_distribution([&play], &bt, 4);
        let phi_b = conditional_distribution([&mixed], &bt, 4);
        assert_abs_diff_eq!(distribution_divergence(&phi_a, &phi_a, 1e-6).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(distribution_divergence(&phi_a, &phi_b, 1e-6).unwrap(), 2f64.ln(), epsilon = 1e-4);

        // uniform fallback over a 2-category target vocabulary
        let binary = video("c", &[(1, 1, 1, 0)]);
        let phi_a2 = conditional_distribution([&binary], &bt, 2);
        let phi_missing = ConditionalDistribution::from_events(bt, 2, Vec::new());
        assert_abs_diff_eq!(
            distribution_divergence(&phi_a2, &phi_missing, 1e-6).unwrap(),
            2f64.ln(),
            epsilon = 1e-4
        );

        let other = conditional_distribution([&play], &pred_given(&[Component::Object]), 4);
        assert!(matches!(
            distribution_divergence(&phi_a, &other, 1e-6),
            Err(Error::BiasTypeMismatch { .. })
        ));
    }

    #[test]
    fn ablation_groups_partition_the_taxonomy() {
        let all = BiasType::all();
        let count = |g: BiasGroup| all.iter().filter(|b| g.contains(b)).count();
        assert_eq!(count(BiasGroup::SpatialAll), 9);
        assert_eq!(count(BiasGroup::TemporalAll), 6);
        assert_eq!(count(BiasGroup::PredicateCentered), 3);
        assert_eq!(count(BiasGroup::SubjectCentered), 3);
        assert_eq!(count(BiasGroup::ObjectCentered), 3);
        assert_eq!(count(BiasGroup::Forward), 3);
        assert_eq!(count(BiasGroup::Backward), 3);
        for g in BiasGroup::ALL {
            assert_eq!(g.name().parse::<BiasGroup>().unwrap(), g);
        }
    }
}
