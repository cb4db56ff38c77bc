//! Quadruplet construction and epoch batching.
//!
//! A quadruplet ties a morph to one of its contributing subjects `s`: the
//! anchor is a reference of `s`, the positive a probe of `s`, and the
//! negative a bona fide sample of a subject that took no part in the morph.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::embedding::{EmbeddingSet, SampleKind};
use crate::error::{Error, Result};
use crate::seeding::{stream, Domain};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadrupletRef {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub morph_id: String,
    /// Contributing subjects in the morph's own order.
    pub pair: (String, String),
    pub anchor_subject: String,
    /// `(reference, probe)` of the other contributing subject, when it has both.
    pub partner: Option<(String, String)>,
}

impl QuadrupletRef {
    pub fn other_subject(&self) -> &str {
        if self.anchor_subject == self.pair.0 {
            &self.pair.1
        } else {
            &self.pair.0
        }
    }

    pub fn resolve(&self, set: &EmbeddingSet) -> Result<QuadIndices> {
        let idx = |id: &str| set.index_of(id).ok_or_else(|| Error::UnknownSampleId(id.to_string()));
        Ok(QuadIndices {
            anchor: idx(&self.anchor_id)?,
            positive: idx(&self.positive_id)?,
            negative: idx(&self.negative_id)?,
            morph: idx(&self.morph_id)?,
            partner: match &self.partner {
                Some((a, p)) => Some((idx(a)?, idx(p)?)),
                None => None,
            },
        })
    }
}

/// A quadruplet as row indices into its [`EmbeddingSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuadIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub morph: usize,
    pub partner: Option<(usize, usize)>,
}

struct SubjectIndex<'a> {
    references: HashMap<&'a str, Vec<usize>>,
    probes: HashMap<&'a str, Vec<usize>>,
    bona_fide: Vec<usize>,
}

impl<'a> SubjectIndex<'a> {
    fn new(set: &'a EmbeddingSet) -> Self {
        let mut references: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut probes: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut bona_fide = Vec::new();
        for (i, r) in set.records().iter().enumerate() {
            match r.kind {
                SampleKind::Reference => references.entry(&r.subject_a).or_default().push(i),
                SampleKind::Probe => probes.entry(&r.subject_a).or_default().push(i),
                SampleKind::Morph => continue,
            }
            bona_fide.push(i);
        }
        SubjectIndex { references, probes, bona_fide }
    }

    fn refs(&self, s: &str) -> &[usize] {
        self.references.get(s).map_or(&[], Vec::as_slice)
    }

    fn probes(&self, s: &str) -> &[usize] {
        self.probes.get(s).map_or(&[], Vec::as_slice)
    }

    /// Uniform bona fide sample whose subject is neither `s1` nor `s2`.
    fn draw_negative<R: Rng>(&self, set: &EmbeddingSet, s1: &str, s2: &str, rng: &mut R) -> Option<usize> {
        let ok = |i: usize| {
            let s = set.records()[i].subject_a.as_str();
            s != s1 && s != s2
        };
        if self.bona_fide.is_empty() {
            return None;
        }
        for _ in 0..64 {
            let i = self.bona_fide[rng.random_range(0..self.bona_fide.len())];
            if ok(i) {
                return Some(i);
            }
        }
        let eligible: Vec<usize> = self.bona_fide.iter().copied().filter(|&i| ok(i)).collect();
        if eligible.is_empty() {
            None
        } else {
            Some(eligible[rng.random_range(0..eligible.len())])
        }
    }
}

/// Every `(reference, probe)` combination of every contributing subject of
/// every morph, each with a seeded-random negative.
pub fn build_quadruplets(set: &EmbeddingSet, seed: u64) -> Result<Vec<QuadrupletRef>> {
    build_with_domain(set, seed, Domain::Mining)
}

pub(crate) fn build_with_domain(set: &EmbeddingSet, seed: u64, domain: Domain) -> Result<Vec<QuadrupletRef>> {
    let index = SubjectIndex::new(set);
    let mut rng = stream(seed, domain, 0);
    let records = set.records();
    let mut out = Vec::new();
    for morph in records.iter().filter(|r| r.kind == SampleKind::Morph) {
        let s1 = morph.subject_a.as_str();
        let s2 = morph.subject_b.as_deref().expect("validated morph has two subjects");
        for (s, other) in [(s1, s2), (s2, s1)] {
            let other_refs = index.refs(other);
            let other_probes = index.probes(other);
            for &a in index.refs(s) {
                for &p in index.probes(s) {
                    let Some(n) = index.draw_negative(set, s1, s2, &mut rng) else {
                        continue;
                    };
                    let partner = if other_refs.is_empty() || other_probes.is_empty() {
                        None
                    } else {
                        let a2 = other_refs[rng.random_range(0..other_refs.len())];
                        let p2 = other_probes[rng.random_range(0..other_probes.len())];
                        Some((records[a2].sample_id.clone(), records[p2].sample_id.clone()))
                    };
                    out.push(QuadrupletRef {
                        anchor_id: records[a].sample_id.clone(),
                        positive_id: records[p].sample_id.clone(),
                        negative_id: records[n].sample_id.clone(),
                        morph_id: morph.sample_id.clone(),
                        pair: (s1.to_string(), s2.to_string()),
                        anchor_subject: s.to_string(),
                        partner,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidQuadruplets(format!(
            "{} morphs, {} references, {} probes: no morph has a contributing subject with both a \
             reference and a probe plus an unrelated bona fide sample",
            set.count(SampleKind::Morph),
            set.count(SampleKind::Reference),
            set.count(SampleKind::Probe),
        )));
    }
    Ok(out)
}

/// Replaces every negative with a fresh draw for `epoch`.
pub fn redraw_negatives(quads: &mut [QuadrupletRef], set: &EmbeddingSet, seed: u64, epoch: u64) -> Result<()> {
    let index = SubjectIndex::new(set);
    let mut rng = stream(seed, Domain::Negatives, epoch);
    for q in quads.iter_mut() {
        let n = index
            .draw_negative(set, &q.pair.0, &q.pair.1, &mut rng)
            .ok_or_else(|| Error::NoValidQuadruplets(format!("no negative available for morph {}", q.morph_id)))?;
        q.negative_id = set.records()[n].sample_id.clone();
    }
    Ok(())
}

pub fn validate_quadruplet(q: &QuadrupletRef, set: &EmbeddingSet) -> Result<bool> {
    let anchor = set.by_id(&q.anchor_id)?;
    let positive = set.by_id(&q.positive_id)?;
    let negative = set.by_id(&q.negative_id)?;
    let morph = set.by_id(&q.morph_id)?;
    let partner = match &q.partner {
        Some((a, p)) => Some((set.by_id(a)?, set.by_id(p)?)),
        None => None,
    };

    let (s1, s2) = (q.pair.0.as_str(), q.pair.1.as_str());
    let morph_pair_matches = morph.kind == SampleKind::Morph
        && morph.subject_a == s1
        && morph.subject_b.as_deref() == Some(s2);
    let anchor_ok = anchor.kind == SampleKind::Reference
        && positive.kind == SampleKind::Probe
        && anchor.subject_a == q.anchor_subject
        && positive.subject_a == q.anchor_subject
        && (q.anchor_subject == s1 || q.anchor_subject == s2);
    let negative_ok = !negative.involves(s1) && !negative.involves(s2);
    let partner_ok = partner.is_none_or(|(a2, p2)| {
        let other = q.other_subject();
        a2.kind == SampleKind::Reference
            && p2.kind == SampleKind::Probe
            && a2.subject_a == other
            && p2.subject_a == other
    });
    Ok(morph_pair_matches && anchor_ok && negative_ok && partner_ok)
}

/// Seeded shuffle of `0..count` cut into batches. A trailing batch with fewer
/// than two elements is dropped because batch normalization needs two rows.
pub fn sample_epoch_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream(seed, Domain::Batches, epoch));
    order
        .chunks(batch_size)
        .filter(|c| c.len() == batch_size || c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}
