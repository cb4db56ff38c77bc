//! Triplet and TetraLoss objectives, plus the four training scenarios.
//!
//! Distances are squared Euclidean on unit rows, so every distance lies in
//! `[0, 4]` and a margin of 3 leaves room for a single hinge to stay active
//! across most of the sphere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedding::{l2_norm, sq_dist_unchecked};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_MARGIN: f64 = 3.0;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Morph stands in for the negative.
    Triplet,
    Tetra,
    /// Triplet over both contributing subjects, averaged.
    Triplet2,
    /// Tetra over both contributing subjects, averaged.
    Tetra2,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Triplet, Scenario::Tetra, Scenario::Triplet2, Scenario::Tetra2];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Triplet => "triplet",
            Scenario::Tetra => "tetra",
            Scenario::Triplet2 => "triplet2",
            Scenario::Tetra2 => "tetra2",
        }
    }

    pub fn needs_second_subject(self) -> bool {
        matches!(self, Scenario::Triplet2 | Scenario::Tetra2)
    }

    pub fn uses_negative(self) -> bool {
        matches!(self, Scenario::Tetra | Scenario::Tetra2)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !matches!(c, '_' | '-' | ' ')).collect::<String>().to_lowercase();
        match key.as_str() {
            "triplet" | "triplet1" => Ok(Scenario::Triplet),
            "tetra" | "tetra1" | "tetraloss" => Ok(Scenario::Tetra),
            "triplet2" => Ok(Scenario::Triplet2),
            "tetra2" => Ok(Scenario::Tetra2),
            _ => Err(Error::ConfigInvalid(format!(
                "unknown scenario {s:?}; expected triplet, tetra, triplet2 or tetra2"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub scenario: Scenario,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: DEFAULT_MARGIN, scenario: Scenario::Tetra }
    }
}

impl LossConfig {
    pub fn new(margin: f64, scenario: Scenario) -> Result<Self> {
        let c = LossConfig { margin, scenario };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::ConfigInvalid(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Hinged triplet value for one element.
pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (sq_dist_unchecked(a, p) + margin - sq_dist_unchecked(a, n)).max(0.0)
}

/// Hinged TetraLoss value for one element: the closer of negative and morph
/// sets the bar.
pub fn tetra_term(a: &[f64], p: &[f64], n: &[f64], m: &[f64], margin: f64) -> f64 {
    let closest = sq_dist_unchecked(a, n).min(sq_dist_unchecked(a, m));
    (sq_dist_unchecked(a, p) + margin - closest).max(0.0)
}

/// Rows of one batch as tape variables, each `N x dim` and unit-norm.
///
/// Anchor, negative, morph and the second anchor are adapter outputs;
/// positives are raw embeddings.
#[derive(Clone, Copy, Debug)]
pub struct QuadrupletBatch {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
    pub morph: Var,
    /// Anchor and positive of the other contributing subject.
    pub second: Option<(Var, Var)>,
}

impl QuadrupletBatch {
    /// Checks shapes and unit norms against the tape.
    pub fn validate(&self, tape: &Tape) -> Result<usize> {
        let n = tape.value(self.anchor).rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let dim = tape.value(self.anchor).cols();
        let mut rows = vec![self.anchor, self.positive, self.negative, self.morph];
        if let Some((a2, p2)) = self.second {
            rows.extend([a2, p2]);
        }
        for v in rows {
            let m = tape.value(v);
            if m.shape() != (n, dim) {
                return Err(Error::dims(n * dim, m.len()));
            }
            for (r, row) in m.row_iter().enumerate() {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::InvariantViolation(format!("batch row {r} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(n)
    }
}

/// Mean of `max(d(a,p) + margin - d(a,n), 0)`.
pub fn triplet_loss(tape: &mut Tape, a: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    if tape.value(a).rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let dp = tape.row_sq_dist(a, p)?;
    let dn = tape.row_sq_dist(a, n)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    let h = tape.hinge(shifted);
    tape.mean(h)
}

/// Mean of `max(d(a,p) + margin - min(d(a,n), d(a,m)), 0)`. On a tie the
/// gradient follows the negative.
pub fn tetra_loss(tape: &mut Tape, a: Var, p: Var, n: Var, m: Var, margin: f64) -> Result<Var> {
    if tape.value(a).rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let dp = tape.row_sq_dist(a, p)?;
    let dn = tape.row_sq_dist(a, n)?;
    let dm = tape.row_sq_dist(a, m)?;
    let closest = tape.minimum(dn, dm)?;
    let diff = tape.sub(dp, closest)?;
    let shifted = tape.add_scalar(diff, margin);
    let h = tape.hinge(shifted);
    tape.mean(h)
}

pub fn scenario_loss(tape: &mut Tape, config: &LossConfig, batch: &QuadrupletBatch) -> Result<Var> {
    if tape.value(batch.anchor).rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let margin = config.margin;
    let term = |tape: &mut Tape, a: Var, p: Var| match config.scenario {
        Scenario::Triplet | Scenario::Triplet2 => triplet_loss(tape, a, p, batch.morph, margin),
        Scenario::Tetra | Scenario::Tetra2 => tetra_loss(tape, a, p, batch.negative, batch.morph, margin),
    };
    let first = term(tape, batch.anchor, batch.positive)?;
    if !config.scenario.needs_second_subject() {
        return Ok(first);
    }
    let (a2, p2) = batch.second.ok_or_else(|| {
        Error::MissingSecondSubject(format!("scenario {}", config.scenario))
    })?;
    let second = term(tape, a2, p2)?;
    let sum = tape.add(first, second)?;
    Ok(tape.scale(sum, 0.5))
}

/// Materialized rows of a batch, for loss evaluation without gradients.
#[derive(Clone, Debug)]
pub struct QuadrupletRows {
    pub anchor: Matrix,
    pub positive: Matrix,
    pub negative: Matrix,
    pub morph: Matrix,
    pub second: Option<(Matrix, Matrix)>,
}

impl QuadrupletRows {
    pub fn len(&self) -> usize {
        self.anchor.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.rows() == 0
    }
}

/// Scenario loss of fixed rows, via the same tape ops used in training.
pub fn evaluate_scenario_loss(config: &LossConfig, rows: &QuadrupletRows) -> Result<f64> {
    let mut tape = Tape::new();
    let batch = QuadrupletBatch {
        anchor: tape.leaf(rows.anchor.clone()),
        positive: tape.leaf(rows.positive.clone()),
        negative: tape.leaf(rows.negative.clone()),
        morph: tape.leaf(rows.morph.clone()),
        second: rows.second.as_ref().map(|(a2, p2)| (tape.leaf(a2.clone()), tape.leaf(p2.clone()))),
    };
    batch.validate(&tape)?;
    let loss = scenario_loss(&mut tape, config, &batch)?;
    Ok(tape.value(loss).item())
}
