//! Relation-triplet data model and annotation-file ingestion.
//!
//! A [`Dataset`] is a set of videos, each holding `subject predicate object`
//! triplets stamped with an ordinal `time_index`. The time index is only an
//! ordering: frame numbers and segment start indices are both valid.
//!
//! The on-disk format is a single JSON document:
//!
//! ```json
//! { "subjects": ["person"], "predicates": ["hold"], "objects": ["cup"],
//!   "videos": [ { "id": "v0", "triplets": [ {"s": 0, "p": 0, "o": 0, "t": 0} ] } ] }
//! ```
//!
//! Triplets may additionally carry a `"features"` float list (written by the
//! synthetic task generator). Unknown fields are ignored on load.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CategoryId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Subject,
    Predicate,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(kind: VocabKind, names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::validation(format!("{kind:?} vocabulary is empty")));
        }
        let mut seen = HashSet::with_capacity(names.len());
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate {kind:?} category `{name}`"
                )));
            }
        }
        Ok(Self { kind, names })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: CategoryId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        id < self.names.len()
    }
}

/// One `subject predicate object` occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletInstance {
    #[serde(rename = "s")]
    pub subject: CategoryId,
    #[serde(rename = "p")]
    pub predicate: CategoryId,
    #[serde(rename = "o")]
    pub object: CategoryId,
    #[serde(rename = "t")]
    pub time_index: u64,
    /// Latent feature vector attached by the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl TripletInstance {
    pub fn new(subject: CategoryId, predicate: CategoryId, object: CategoryId, time_index: u64) -> Self {
        Self {
            subject,
            predicate,
            object,
            time_index,
            features: None,
        }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }

    fn sort_key(&self) -> (u64, CategoryId, CategoryId, CategoryId) {
        (self.time_index, self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: String,
    pub triplets: Vec<TripletInstance>,
}

impl VideoSample {
    /// Builds a video, ordering triplets by `(t, s, p, o)`.
    pub fn new(id: impl Into<String>, mut triplets: Vec<TripletInstance>) -> Result<Self> {
        let id = id.into();
        if triplets.is_empty() {
            return Err(Error::validation(format!("video `{id}` has no triplets")));
        }
        triplets.sort_by_key(TripletInstance::sort_key);
        Ok(Self { id, triplets })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subject_vocab: Vocabulary,
    pub predicate_vocab: Vocabulary,
    pub object_vocab: Vocabulary,
    pub videos: Vec<VideoSample>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    subjects: Vec<String>,
    predicates: Vec<String>,
    objects: Vec<String>,
    videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn new(
        subject_vocab: Vocabulary,
        predicate_vocab: Vocabulary,
        object_vocab: Vocabulary,
        videos: Vec<VideoSample>,
    ) -> Result<Self> {
        let dataset = Self {
            subject_vocab,
            predicate_vocab,
            object_vocab,
            videos,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.videos.len());
        for video in &self.videos {
            if !ids.insert(video.id.as_str()) {
                return Err(Error::validation(format!("duplicate video id `{}`", video.id)));
            }
            if video.triplets.is_empty() {
                return Err(Error::validation(format!("video `{}` has no triplets", video.id)));
            }
            for (index, t) in video.triplets.iter().enumerate() {
                let checks = [
                    ("subject", t.subject, &self.subject_vocab),
                    ("predicate", t.predicate, &self.predicate_vocab),
                    ("object", t.object, &self.object_vocab),
                ];
                for (field, id, vocab) in checks {
                    if !vocab.contains(id) {
                        return Err(Error::validation(format!(
                            "video `{}` triplet {index}: {field} id {id} out of range (vocabulary size {})",
                            video.id,
                            vocab.size()
                        )));
                    }
                }
            }
            if video
                .triplets
                .windows(2)
                .any(|w| w[0].sort_key() > w[1].sort_key())
            {
                return Err(Error::validation(format!(
                    "video `{}` triplets are not in (t, s, p, o) order",
                    video.id
                )));
            }
        }
        Ok(())
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }

    pub fn num_triplets(&self) -> usize {
        self.videos.iter().map(|v| v.triplets.len()).sum()
    }

    pub fn vocab(&self, kind: VocabKind) -> &Vocabulary {
        match kind {
            VocabKind::Subject => &self.subject_vocab,
            VocabKind::Predicate => &self.predicate_vocab,
            VocabKind::Object => &self.object_vocab,
        }
    }

    /// Resolves video ids to references, preserving the requested order.
    pub fn lookup<'a, S: AsRef<str>>(&'a self, video_ids: &[S]) -> Result<Vec<&'a VideoSample>> {
        let index: HashMap<&str, &VideoSample> =
            self.videos.iter().map(|v| (v.id.as_str(), v)).collect();
        video_ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownVideo(id.as_ref().to_string()))
            })
            .collect()
    }

    /// A new dataset holding exactly the named videos, in the given order.
    pub fn subset<S: AsRef<str>>(&self, video_ids: &[S]) -> Result<Dataset> {
        let videos = self.lookup(video_ids)?.into_iter().cloned().collect();
        Ok(Dataset {
            subject_vocab: self.subject_vocab.clone(),
            predicate_vocab: self.predicate_vocab.clone(),
            object_vocab: self.object_vocab.clone(),
            videos,
        })
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let videos = raw
            .videos
            .into_iter()
            .map(|v| VideoSample::new(v.id, v.triplets))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(
            Vocabulary::new(VocabKind::Subject, raw.subjects)?,
            Vocabulary::new(VocabKind::Predicate, raw.predicates)?,
            Vocabulary::new(VocabKind::Object, raw.objects)?,
            videos,
        )
    }

    /// Canonical serialization: fixed key order, triplets in `(t, s, p, o)` order.
    pub fn to_canonical_json(&self) -> String {
        let mut videos = self.videos.clone();
        for v in &mut videos {
            v.triplets.sort_by_key(TripletInstance::sort_key);
        }
        let file = AnnotationFile {
            subjects: self.subject_vocab.names.clone(),
            predicates: self.predicate_vocab.names.clone(),
            objects: self.object_vocab.names.clone(),
            videos,
        };
        let mut out = serde_json::to_string(&file).expect("dataset serialization is infallible");
        out.push('\n');
        out
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json_str(&text, path)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(dataset.to_canonical_json().as_bytes())
        .map_err(|e| Error::io(path, e))
}
