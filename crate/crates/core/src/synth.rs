//! Synthetic embedding universe.
//!
//! Subjects are random unit directions. References and probes are perturbed,
//! renormalized copies of their subject's direction (references tightly,
//! probes loosely). A morph blends one reference of each of two subjects
//! with a tool-specific mixing weight, adds tool noise and a tool-specific
//! trace along one direction shared by all tools, then renormalizes.
//!
//! Every noise level is the expected norm of the perturbation vector: a
//! level `sigma` draws each of the `dim` components with std
//! `sigma / sqrt(dim)`, which keeps calibration independent of `dim`.
//!
//! Two disjoint subject partitions are generated, `train` and `test`, each
//! with morphs from every tool.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_slice, Embedding, EmbeddingSet, SampleKind, SampleRecord};
use crate::error::{Error, Result};
use crate::seeding::{stream, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaLaw {
    Fixed(f64),
    Uniform(f64, f64),
}

impl AlphaLaw {
    fn validate(&self) -> Result<()> {
        let inside = |a: f64| a > 0.0 && a < 1.0;
        let ok = match *self {
            AlphaLaw::Fixed(a) => inside(a),
            AlphaLaw::Uniform(lo, hi) => inside(lo) && inside(hi) && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("mixing weight law {self:?} must stay inside (0, 1)")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            AlphaLaw::Fixed(a) => a,
            AlphaLaw::Uniform(lo, hi) if lo == hi => lo,
            AlphaLaw::Uniform(lo, hi) => rng.random_range(lo..hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphTool {
    pub name: String,
    pub alpha: AlphaLaw,
    pub noise_std: f64,
    /// Strength of the shared morph trace.
    #[serde(default)]
    pub trace: f64,
}

pub const DEFAULT_TRACE: f64 = 0.8;

impl MorphTool {
    pub fn new(name: &str, alpha: AlphaLaw, noise_std: f64) -> Self {
        MorphTool { name: name.into(), alpha, noise_std, trace: DEFAULT_TRACE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub dim: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub refs_per_subject: usize,
    pub probes_per_subject: usize,
    pub ref_spread: f64,
    pub probe_spread: f64,
    pub tools: Vec<MorphTool>,
    pub morphs_per_tool: usize,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            dim: 64,
            train_subjects: 200,
            test_subjects: 200,
            refs_per_subject: 2,
            probes_per_subject: 3,
            ref_spread: 0.05,
            probe_spread: 0.25,
            tools: vec![
                MorphTool::new("A", AlphaLaw::Fixed(0.5), 0.02),
                MorphTool::new("B", AlphaLaw::Uniform(0.35, 0.65), 0.02),
                MorphTool::new("C", AlphaLaw::Fixed(0.5), 0.05),
                MorphTool::new("D", AlphaLaw::Uniform(0.35, 0.65), 0.05),
            ],
            morphs_per_tool: 500,
            seed: 0,
        }
    }
}

impl UniverseConfig {
    /// Small universe for smoke runs: dim 8, 10 + 10 subjects.
    pub fn toy() -> Self {
        UniverseConfig { dim: 8, train_subjects: 10, test_subjects: 10, morphs_per_tool: 20, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.train_subjects < 3 {
            return bad(format!("train_subjects must be at least 3, got {}", self.train_subjects));
        }
        if self.test_subjects != 0 && self.test_subjects < 3 {
            return bad(format!("test_subjects must be 0 or at least 3, got {}", self.test_subjects));
        }
        if self.refs_per_subject == 0 || self.probes_per_subject == 0 {
            return bad("refs_per_subject and probes_per_subject must be positive".into());
        }
        for (name, v) in [("ref_spread", self.ref_spread), ("probe_spread", self.probe_spread)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let mut names = BTreeSet::new();
        for t in &self.tools {
            if t.name.is_empty() || t.name.contains([',', '\n', '\r']) {
                return bad(format!("invalid tool name {:?}", t.name));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate tool name {:?}", t.name));
            }
            t.alpha.validate()?;
            if !(t.noise_std.is_finite() && t.noise_std >= 0.0) || !(t.trace.is_finite() && t.trace >= 0.0) {
                return bad(format!("tool {}: noise_std and trace must be finite and >= 0", t.name));
            }
        }
        Ok(())
    }

    pub fn tool(&self, name: &str) -> Option<&MorphTool> {
        self.tools.iter().find(|t| t.name == name)
    }
}

fn gaussian(dim: usize, level: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = level / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    normalize_slice(&gaussian(dim, (dim as f64).sqrt(), rng))
}

fn perturb(center: &[f64], level: f64, rng: &mut ChaCha8Rng) -> Result<Embedding> {
    let noise = gaussian(center.len(), level, rng);
    let v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + n).collect();
    Embedding::new(normalize_slice(&v)?)
}

/// `normalize(alpha e1 + (1 - alpha) e2 + noise)`.
pub fn morph_embedding(e1: &Embedding, e2: &Embedding, alpha: f64, noise_std: f64, rng: &mut impl Rng) -> Result<Embedding> {
    morph_embedding_with_trace(e1, e2, alpha, noise_std, 0.0, &[], rng)
}

/// [`morph_embedding`] plus `trace * direction` before normalization.
/// `direction` may be empty when `trace` is zero.
pub fn morph_embedding_with_trace(
    e1: &Embedding,
    e2: &Embedding,
    alpha: f64,
    noise_std: f64,
    trace: f64,
    direction: &[f64],
    rng: &mut impl Rng,
) -> Result<Embedding> {
    let dim = e1.dim();
    if e2.dim() != dim {
        return Err(Error::dims(dim, e2.dim()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfRangeInput(format!("mixing weight {alpha} outside (0, 1)")));
    }
    if trace != 0.0 && direction.len() != dim {
        return Err(Error::dims(dim, direction.len()));
    }
    let std = noise_std / (dim as f64).sqrt();
    let mut v: Vec<f64> = e1.as_slice().iter().zip(e2.as_slice()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    if std > 0.0 {
        for x in &mut v {
            let z: f64 = StandardNormal.sample(rng);
            *x += std * z;
        }
    }
    if trace != 0.0 {
        for (x, u) in v.iter_mut().zip(direction) {
            *x += trace * u;
        }
    }
    Embedding::new(normalize_slice(&v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectTruth {
    pub id: String,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionTruth {
    pub name: String,
    pub subjects: Vec<SubjectTruth>,
}

/// Diagnostics sidecar: the latent structure behind the samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub dim: usize,
    pub trace_direction: Vec<f64>,
    pub tools: Vec<MorphTool>,
    pub partitions: Vec<PartitionTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUniverse {
    pub config: UniverseConfig,
    pub set: EmbeddingSet,
    pub truth: GroundTruth,
}

pub const TRAIN_PARTITION: &str = "train";
pub const TEST_PARTITION: &str = "test";

fn generate_partition(
    config: &UniverseConfig,
    name: &str,
    n_subjects: usize,
    trace_direction: &[f64],
    rng: &mut ChaCha8Rng,
    records: &mut Vec<SampleRecord>,
) -> Result<PartitionTruth> {
    let dim = config.dim;
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut refs: Vec<Vec<Embedding>> = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let id = format!("{name}-s{s:04}");
        let direction = random_direction(dim, rng)?;
        let mut own_refs = Vec::with_capacity(config.refs_per_subject);
        for r in 0..config.refs_per_subject {
            let e = perturb(&direction, config.ref_spread, rng)?;
            own_refs.push(e.clone());
            records.push(SampleRecord {
                sample_id: format!("{id}-ref{r}"),
                kind: SampleKind::Reference,
                subject_a: id.clone(),
                subject_b: None,
                tool: None,
                embedding: e,
            });
        }
        for p in 0..config.probes_per_subject {
            records.push(SampleRecord {
                sample_id: format!("{id}-probe{p}"),
                kind: SampleKind::Probe,
                subject_a: id.clone(),
                subject_b: None,
                tool: None,
                embedding: perturb(&direction, config.probe_spread, rng)?,
            });
        }
        refs.push(own_refs);
        subjects.push(SubjectTruth { id, direction });
    }
    for tool in &config.tools {
        for k in 0..config.morphs_per_tool {
            let s1 = rng.random_range(0..n_subjects);
            let s2 = (s1 + rng.random_range(1..n_subjects)) % n_subjects;
            let alpha = tool.alpha.sample(rng);
            let r1 = &refs[s1][rng.random_range(0..config.refs_per_subject)];
            let r2 = &refs[s2][rng.random_range(0..config.refs_per_subject)];
            let e = morph_embedding_with_trace(r1, r2, alpha, tool.noise_std, tool.trace, trace_direction, rng)?;
            records.push(SampleRecord {
                sample_id: format!("{name}-{}-m{k:04}", tool.name),
                kind: SampleKind::Morph,
                subject_a: subjects[s1].id.clone(),
                subject_b: Some(subjects[s2].id.clone()),
                tool: Some(tool.name.clone()),
                embedding: e,
            });
        }
    }
    Ok(PartitionTruth { name: name.into(), subjects })
}

pub fn generate_universe(config: &UniverseConfig) -> Result<SyntheticUniverse> {
    config.validate()?;
    let trace_direction = random_direction(config.dim, &mut stream(config.seed, Domain::Universe, 0))?;
    let mut records = Vec::new();
    let mut partitions = Vec::new();
    for (i, (name, n)) in [(TRAIN_PARTITION, config.train_subjects), (TEST_PARTITION, config.test_subjects)]
        .into_iter()
        .enumerate()
    {
        if n == 0 {
            continue;
        }
        let mut rng = stream(config.seed, Domain::Universe, i as u64 + 1);
        partitions.push(generate_partition(config, name, n, &trace_direction, &mut rng, &mut records)?);
    }
    let set = EmbeddingSet::new(config.dim, records)?;
    let truth = GroundTruth {
        seed: config.seed,
        dim: config.dim,
        trace_direction,
        tools: config.tools.clone(),
        partitions,
    };
    Ok(SyntheticUniverse { config: config.clone(), set, truth })
}

/// Which tools feed each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitProtocol {
    pub train_tools: Vec<String>,
    pub val_tools: Vec<String>,
    pub test_tools: Vec<String>,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SplitProtocol { train_tools: v(&["A", "B"]), val_tools: v(&["C"]), test_tools: v(&["C", "D"]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: EmbeddingSet,
    pub val: EmbeddingSet,
    pub test: EmbeddingSet,
}

/// Train and validation use the train partition and differ by tool; test
/// uses the disjoint test partition with the test tools.
pub fn split_protocol(universe: &SyntheticUniverse, protocol: &SplitProtocol) -> Result<Splits> {
    let infeasible = |m: String| Err(Error::ProtocolInfeasible(m));
    for (role, tools) in [("train", &protocol.train_tools), ("val", &protocol.val_tools), ("test", &protocol.test_tools)] {
        if tools.is_empty() {
            return infeasible(format!("no {role} tools given"));
        }
        if let Some(t) = tools.iter().find(|t| universe.config.tool(t).is_none()) {
            let known: Vec<&str> = universe.config.tools.iter().map(|t| t.name.as_str()).collect();
            return infeasible(format!("{role} tool {t:?} is not one of {known:?}"));
        }
    }
    if let Some(t) = protocol.train_tools.iter().find(|t| protocol.val_tools.contains(t)) {
        return infeasible(format!("tool {t:?} is used for both training and validation"));
    }
    let partition = |name: &str| -> Option<BTreeSet<&str>> {
        universe.truth.partitions.iter().find(|p| p.name == name).map(|p| p.subjects.iter().map(|s| s.id.as_str()).collect())
    };
    let train_subjects = partition(TRAIN_PARTITION).expect("train partition always generated");
    let Some(test_subjects) = partition(TEST_PARTITION) else {
        return infeasible("the universe has no test partition (test_subjects = 0)".into());
    };
    let pick = |subjects: &BTreeSet<&str>, tools: &[String]| {
        universe.set.filter(|r| {
            subjects.contains(r.subject_a.as_str())
                && match r.kind {
                    SampleKind::Morph => r.tool.as_ref().is_some_and(|t| tools.contains(t)),
                    _ => true,
                }
        })
    };
    Ok(Splits {
        train: pick(&train_subjects, &protocol.train_tools),
        val: pick(&train_subjects, &protocol.val_tools),
        test: pick(&test_subjects, &protocol.test_tools),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::sq_dist;
    use rand::SeedableRng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn morph_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e1 = emb(&[1.0, 0.0]);
        let e2 = emb(&[0.0, 1.0]);
        let m = morph_embedding(&e1, &e2, 0.5, 0.0, &mut rng).unwrap();
        assert!((m.as_slice()[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((m.as_slice()[1] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((sq_dist(&m, &e1).unwrap() - sq_dist(&m, &e2).unwrap()).abs() < 1e-12);
        let near = morph_embedding(&e1, &e2, 1.0 - 1e-12, 0.0, &mut rng).unwrap();
        assert!(sq_dist(&near, &e1).unwrap() < 1e-20);
        let anti = emb(&[-1.0, 0.0]);
        assert!(matches!(morph_embedding(&e1, &anti, 0.5, 0.0, &mut rng), Err(Error::ZeroVector)));
        assert!(morph_embedding(&e1, &e2, 1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn counts() {
        let cfg = UniverseConfig {
            dim: 8,
            train_subjects: 10,
            test_subjects: 0,
            refs_per_subject: 1,
            probes_per_subject: 2,
            tools: UniverseConfig::default().tools[..2].to_vec(),
            morphs_per_tool: 5,
            ..Default::default()
        };
        let u = generate_universe(&cfg).unwrap();
        assert_eq!(u.set.count(SampleKind::Reference), 10);
        assert_eq!(u.set.count(SampleKind::Probe), 20);
        assert_eq!(u.set.count(SampleKind::Morph), 10);
    }

    #[test]
    fn zero_noise_gives_perfect_mated_pairs() {
        let cfg = UniverseConfig { ref_spread: 0.0, probe_spread: 0.0, ..UniverseConfig::toy() };
        let u = generate_universe(&cfg).unwrap();
        let r = u.set.by_id("train-s0003-ref0").unwrap();
        let p = u.set.by_id("train-s0003-probe1").unwrap();
        assert_eq!(sq_dist(&r.embedding, &p.embedding).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            UniverseConfig { train_subjects: 2, ..Default::default() },
            UniverseConfig { probe_spread: -0.1, ..Default::default() },
            UniverseConfig { tools: vec![MorphTool::new("A", AlphaLaw::Fixed(1.0), 0.0)], ..Default::default() },
            UniverseConfig {
                tools: vec![MorphTool::new("A", AlphaLaw::Fixed(0.5), 0.0), MorphTool::new("A", AlphaLaw::Fixed(0.5), 0.0)],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(generate_universe(&c), Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn protocol_splits() {
        let u = generate_universe(&UniverseConfig::toy()).unwrap();
        let s = split_protocol(&u, &SplitProtocol::default()).unwrap();
        let train: BTreeSet<_> = s.train.all_subjects().into_iter().map(str::to_string).collect();
        let test: BTreeSet<_> = s.test.all_subjects().into_iter().map(str::to_string).collect();
        assert!(train.is_disjoint(&test));
        assert!(s.val.records().iter().filter(|r| r.kind == SampleKind::Morph).all(|r| r.tool.as_deref() == Some("C")));
        let bad = SplitProtocol { test_tools: vec!["Z".into()], ..Default::default() };
        assert!(matches!(split_protocol(&u, &bad), Err(Error::ProtocolInfeasible(_))));
    }
}
