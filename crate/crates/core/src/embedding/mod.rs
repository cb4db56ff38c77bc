//! Embedding vectors, sample metadata and datasets.
//!
//! Comparisons everywhere in the crate use the squared Euclidean distance
//! between L2-normalized embeddings, which lies in `[0, 4]`.

pub(crate) mod io;

pub use io::{load_embeddings, save_embeddings, EmbeddingFormat};

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding width of common face-recognition backbones.
pub const DEFAULT_DIM: usize = 512;

const ZERO_NORM: f64 = 1e-12;

/// A finite, fixed-length feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "embedding entry {pos} is not finite"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit length.
///
/// A vector already within 1e-12 of unit norm is returned unchanged, which
/// makes the operation idempotent bit-for-bit.
pub fn normalize(v: &Embedding) -> Result<Embedding> {
    normalize_slice(&v.0).map(Embedding)
}

pub fn normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    if (norm - 1.0).abs() <= 1e-12 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Squared Euclidean distance `sum_i (a_i - b_i)^2`.
pub fn sq_dist(a: &Embedding, b: &Embedding) -> Result<f64> {
    sq_dist_slice(&a.0, &b.0)
}

pub fn sq_dist_slice(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(sq_dist_unchecked(a, b))
}

#[inline]
pub(crate) fn sq_dist_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleKind {
    Reference,
    Probe,
    Morph,
}

impl SampleKind {
    pub fn token(self) -> &'static str {
        match self {
            SampleKind::Reference => "ref",
            SampleKind::Probe => "probe",
            SampleKind::Morph => "morph",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "ref" => Some(SampleKind::Reference),
            "probe" => Some(SampleKind::Probe),
            "morph" => Some(SampleKind::Morph),
            _ => None,
        }
    }

    pub fn is_bona_fide(self) -> bool {
        !matches!(self, SampleKind::Morph)
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One sample: an embedding plus identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub kind: SampleKind,
    pub subject_a: String,
    /// Second contributing subject; present iff `kind == Morph`.
    pub subject_b: Option<String>,
    pub tool: Option<String>,
    pub embedding: Embedding,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::InvariantViolation("empty sample_id".into()));
        }
        if self.subject_a.is_empty() {
            return Err(Error::InvariantViolation(format!(
                "sample {} has empty subject_a",
                self.sample_id
            )));
        }
        match (self.kind, &self.subject_b) {
            (SampleKind::Morph, None) => Err(Error::InvariantViolation(format!(
                "morph {} has no second subject",
                self.sample_id
            ))),
            (SampleKind::Morph, Some(b)) if b == &self.subject_a || b.is_empty() => {
                Err(Error::InvariantViolation(format!(
                    "morph {} must blend two different subjects",
                    self.sample_id
                )))
            }
            (SampleKind::Reference | SampleKind::Probe, Some(_)) => {
                Err(Error::InvariantViolation(format!(
                    "bona fide sample {} carries a second subject",
                    self.sample_id
                )))
            }
            _ => Ok(()),
        }
    }

    /// Subjects whose identity this sample carries (one, or two for morphs).
    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.subject_a.as_str()).chain(self.subject_b.as_deref())
    }

    pub fn involves(&self, subject: &str) -> bool {
        self.subjects().any(|s| s == subject)
    }
}

/// A validated collection of samples sharing one embedding dimension.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<SampleRecord>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingSet {
    pub fn new(dim: usize, records: Vec<SampleRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvariantViolation("dimension must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate()?;
            if rec.embedding.dim() != dim {
                return Err(Error::dims(dim, rec.embedding.dim()));
            }
            if by_id.insert(rec.sample_id.clone(), i).is_some() {
                return Err(Error::InvariantViolation(format!(
                    "duplicate sample_id {}",
                    rec.sample_id
                )));
            }
        }
        Ok(EmbeddingSet { dim, records, by_id })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&SampleRecord> {
        self.records.get(index)
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.by_id.get(sample_id).copied()
    }

    pub fn by_id(&self, sample_id: &str) -> Result<&SampleRecord> {
        self.index_of(sample_id)
            .map(|i| &self.records[i])
            .ok_or_else(|| Error::UnknownSampleId(sample_id.to_string()))
    }

    pub fn count(&self, kind: SampleKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    /// Subjects appearing as `subject_a` of bona fide samples, sorted.
    pub fn bona_fide_subjects(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.kind.is_bona_fide())
            .map(|r| r.subject_a.as_str())
            .collect()
    }

    /// All subjects mentioned anywhere in the set, sorted.
    pub fn all_subjects(&self) -> BTreeSet<&str> {
        self.records.iter().flat_map(|r| r.subjects()).collect()
    }

    /// New set with the records satisfying `keep`, in original order.
    pub fn filter<F>(&self, mut keep: F) -> EmbeddingSet
    where
        F: FnMut(&SampleRecord) -> bool,
    {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        EmbeddingSet::new(self.dim, records).expect("subset of a valid set is valid")
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }
}
