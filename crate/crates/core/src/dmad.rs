//! Differential morphing-attack detection and score fusion.
//!
//! The detector is L2-regularized logistic regression over the signed
//! difference `suspected - probe` of unit embeddings. Its output is the
//! probability that the suspected sample is bona fide, so it can be averaged
//! directly with a similarity score.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::io::LeReader;
use crate::embedding::{normalize_slice, Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::metrics::{evaluate, ComparisonClass, ComparisonPairs, EvalReport, ScoreSet};
use crate::seeding::{stream, Domain};

const MAGIC: &[u8; 5] = b"DMAD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmadConfig {
    pub regularization: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for DmadConfig {
    fn default() -> Self {
        DmadConfig { regularization: 1e-4, learning_rate: 0.1, epochs: 200 }
    }
}

impl DmadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization.is_finite() && self.regularization >= 0.0) {
            return Err(Error::ConfigInvalid(format!("regularization must be >= 0, got {}", self.regularization)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::ConfigInvalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::ConfigInvalid("epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmadModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl DmadModel {
    pub fn zeros(dim: usize) -> Self {
        DmadModel { weights: vec![0.0; dim], bias: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    /// Probability of bona fide for a precomputed difference vector.
    pub fn score_difference(&self, diff: &[f64]) -> Result<f64> {
        if diff.len() != self.dim() {
            return Err(Error::dims(self.dim(), diff.len()));
        }
        Ok(logistic(dot(&self.weights, diff) + self.bias))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        let dim = u32::try_from(self.dim()).map_err(|_| Error::Format("dimension too large".into()))?;
        out.write_all(&dim.to_le_bytes())?;
        for w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        out.write_all(&self.bias.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = LeReader::new(reader);
        if &r.bytes::<5>()? != MAGIC {
            return Err(Error::Format("bad magic, expected DMAD1".into()));
        }
        let dim = r.u32()? as usize;
        let weights = r.f64s(dim)?;
        let bias = r.f64()?;
        r.finish()?;
        let model = DmadModel { weights, bias };
        if !model.is_finite() {
            return Err(Error::Format("D-MAD checkpoint holds non-finite values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn difference(suspected: &[f64], probe: &[f64]) -> Result<Vec<f64>> {
    if suspected.len() != probe.len() {
        return Err(Error::dims(suspected.len(), probe.len()));
    }
    let s = normalize_slice(suspected)?;
    let p = normalize_slice(probe)?;
    Ok(s.iter().zip(&p).map(|(a, b)| a - b).collect())
}

/// `logistic(w . (suspected - probe) + b)` on unit-normalized inputs.
pub fn dmad_score(model: &DmadModel, suspected: &Embedding, probe: &Embedding) -> Result<f64> {
    if suspected.dim() != model.dim() {
        return Err(Error::dims(model.dim(), suspected.dim()));
    }
    model.score_difference(&difference(suspected.as_slice(), probe.as_slice())?)
}

struct Objective<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [f64],
    /// Per-sample weights; each class sums to one half.
    sample_weight: &'a [f64],
    reg: f64,
}

impl Objective<'_> {
    fn loss(&self, w: &[f64], b: f64) -> f64 {
        let data: f64 = self
            .features
            .iter()
            .zip(self.labels)
            .zip(self.sample_weight)
            .map(|((x, &y), &sw)| {
                let z = dot(w, x) + b;
                sw * (softplus(z) - y * z)
            })
            .sum();
        data + 0.5 * self.reg * dot(w, w)
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw: Vec<f64> = w.iter().map(|v| self.reg * v).collect();
        let mut gb = 0.0;
        for ((x, &y), &sw) in self.features.iter().zip(self.labels).zip(self.sample_weight) {
            let r = sw * (logistic(dot(w, x) + b) - y);
            crate::matrix::axpy(r, x, &mut gw);
            gb += r;
        }
        (gw, gb)
    }
}

/// Trains on `(suspected, probe)` pairs; label 1 is bona fide, 0 morph.
pub fn train_dmad<S: AsRef<[f64]>>(
    bona_fide: &[(S, S)],
    morph: &[(S, S)],
    config: &DmadConfig,
    seed: u64,
) -> Result<DmadModel> {
    train_dmad_traced(bona_fide, morph, config, seed).map(|(m, _)| m)
}

/// [`train_dmad`] that also returns the objective after every epoch.
///
/// Features are standardized for conditioning; the returned model has the
/// scaling folded into its weights and bias, so it scores raw differences.
/// Each class carries half of the data term regardless of its size. A step
/// that would raise the objective is retried with half the learning rate.
pub fn train_dmad_traced<S: AsRef<[f64]>>(
    bona_fide: &[(S, S)],
    morph: &[(S, S)],
    config: &DmadConfig,
    seed: u64,
) -> Result<(DmadModel, Vec<f64>)> {
    config.validate()?;
    if bona_fide.is_empty() {
        return Err(Error::EmptyClass("no bona fide training pairs".into()));
    }
    if morph.is_empty() {
        return Err(Error::EmptyClass("no morph training pairs".into()));
    }
    let mut features = Vec::with_capacity(bona_fide.len() + morph.len());
    let mut labels = Vec::with_capacity(features.capacity());
    let mut sample_weight = Vec::with_capacity(features.capacity());
    for (pairs, label) in [(bona_fide, 1.0), (morph, 0.0)] {
        let sw = 0.5 / pairs.len() as f64;
        for (s, p) in pairs {
            features.push(difference(s.as_ref(), p.as_ref())?);
            labels.push(label);
            sample_weight.push(sw);
        }
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::dims(dim, f.len()));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in &features {
        crate::matrix::axpy(1.0 / n, f, &mut mean);
    }
    let mut scale = vec![0.0; dim];
    for f in &features {
        for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    for f in &mut features {
        for ((x, m), s) in f.iter_mut().zip(&mean).zip(&scale) {
            *x = (*x - m) / s;
        }
    }

    let obj = Objective { features: &features, labels: &labels, sample_weight: &sample_weight, reg: config.regularization };
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut rng = stream(seed, Domain::Dmad, 0);
    let mut w: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let mut b = 0.0;
    let mut current = obj.loss(&w, b);
    if !current.is_finite() {
        return Err(Error::NonFiniteLoss("initial D-MAD objective".into()));
    }
    let mut trace = Vec::with_capacity(config.epochs);
    let mut lr = config.learning_rate;
    for epoch in 0..config.epochs {
        let (gw, gb) = obj.gradient(&w, b);
        let mut accepted = false;
        for _ in 0..40 {
            let cw: Vec<f64> = w.iter().zip(&gw).map(|(x, g)| x - lr * g).collect();
            let cb = b - lr * gb;
            let cand = obj.loss(&cw, cb);
            if !cand.is_finite() {
                return Err(Error::NonFiniteLoss(format!("D-MAD objective at epoch {}", epoch + 1)));
            }
            if cand <= current {
                w = cw;
                b = cb;
                current = cand;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        trace.push(current);
        if !accepted {
            break;
        }
    }

    let weights: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
    let bias = b - dot(&weights, &mean);
    let model = DmadModel { weights, bias };
    if !model.is_finite() {
        return Err(Error::NonFiniteLoss("D-MAD parameters".into()));
    }
    Ok((model, trace))
}

/// `(suspected, probe)` embeddings borrowed from a set.
pub type PairSlices<'a> = (&'a [f64], &'a [f64]);

/// Bona fide and morph training pairs of a set: mated reference/probe
/// comparisons and morph/contributing-probe comparisons.
pub fn training_pairs<'a>(set: &'a EmbeddingSet, pairs: &ComparisonPairs) -> (Vec<PairSlices<'a>>, Vec<PairSlices<'a>>) {
    let rec = set.records();
    let view = |list: &[(usize, usize)]| {
        list.iter().map(|&(a, b)| (rec[a].embedding.as_slice(), rec[b].embedding.as_slice())).collect()
    };
    (view(&pairs.mated), view(&pairs.morph))
}

/// Detector scores for every comparison, suspected side first.
pub fn mad_scores(model: &DmadModel, set: &EmbeddingSet, pairs: &ComparisonPairs) -> Result<ScoreSet> {
    let rec = set.records();
    let mut out = ScoreSet::default();
    for c in ComparisonClass::ALL {
        *out.class_mut(c) = pairs
            .class(c)
            .iter()
            .map(|&(a, b)| model.score_difference(&difference(rec[a].embedding.as_slice(), rec[b].embedding.as_slice())?))
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Average of a similarity score and a detector score, both in `[0, 1]`.
pub fn fuse(s_fr: f64, s_mad: f64) -> Result<f64> {
    for (name, v) in [("face-recognition score", s_fr), ("MAD score", s_mad)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRangeInput(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((s_fr + s_mad) / 2.0)
}

pub fn fuse_scores(fr: &ScoreSet, mad: &ScoreSet) -> Result<ScoreSet> {
    let mut out = ScoreSet::default();
    for c in ComparisonClass::ALL {
        let (a, b) = (fr.class(c), mad.class(c));
        if a.len() != b.len() {
            return Err(Error::dims(a.len(), b.len()));
        }
        *out.class_mut(c) = a.iter().zip(b).map(|(&x, &y)| fuse(x, y)).collect::<Result<_>>()?;
    }
    Ok(out)
}

pub const ORIGINAL: &str = "Original";
pub const ORIGINAL_MAD: &str = "Original & MAD";
pub const TETRA: &str = "Tetra";
pub const TETRA_MAD: &str = "Tetra & MAD";

/// Reports for whichever of the four system configurations the inputs
/// allow, in the order Original, Original & MAD, Tetra, Tetra & MAD. Each
/// report picks its own thresholds from its own non-mated scores.
pub fn evaluate_scenarios(
    original: &ScoreSet,
    tetra: Option<&ScoreSet>,
    mad: Option<&ScoreSet>,
    targets: &[f64],
) -> Result<Vec<EvalReport>> {
    let mut reports = vec![evaluate(ORIGINAL, original, targets)?];
    if let Some(m) = mad {
        reports.push(evaluate(ORIGINAL_MAD, &fuse_scores(original, m)?, targets)?);
    }
    if let Some(t) = tetra {
        reports.push(evaluate(TETRA, t, targets)?);
        if let Some(m) = mad {
            reports.push(evaluate(TETRA_MAD, &fuse_scores(t, m)?, targets)?);
        }
    }
    Ok(reports)
}
