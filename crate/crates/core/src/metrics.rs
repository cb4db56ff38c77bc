//! Full-system verification metrics.
//!
//! Scores are similarities `s = 1 - d^2 / 4` in `[0, 1]` and a comparison is
//! accepted when `s >= tau`. Rates:
//!
//! * FMR: accepted non-mated comparisons,
//! * FNMR: rejected mated comparisons,
//! * IAPAR: accepted morph presentations (a morph against a probe of either
//!   contributing subject),
//! * RIAPAR = FNMR + IAPAR at the same threshold.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::adapter::AdapterParams;
use crate::embedding::{normalize_slice, sq_dist_unchecked, EmbeddingSet, SampleKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeding::{stream, Domain};

/// Operating points recommended for border control, as FMR targets.
pub const FRONTEX_FMR_TARGETS: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const DEFAULT_DIFF_PAIRS_PER_CLASS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComparisonClass {
    Mated,
    Nonmated,
    Morph,
}

impl ComparisonClass {
    pub const ALL: [ComparisonClass; 3] = [ComparisonClass::Mated, ComparisonClass::Nonmated, ComparisonClass::Morph];

    pub fn token(self) -> &'static str {
        match self {
            ComparisonClass::Mated => "mated",
            ComparisonClass::Nonmated => "nonmated",
            ComparisonClass::Morph => "morph",
        }
    }
}

impl FromStr for ComparisonClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mated" => Ok(ComparisonClass::Mated),
            "nonmated" => Ok(ComparisonClass::Nonmated),
            "morph" => Ok(ComparisonClass::Morph),
            _ => Err(Error::Format(format!("unknown comparison class {s:?}"))),
        }
    }
}

/// Which comparisons to form from a set.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ComparisonProtocol {
    /// Seeded subsample size for non-mated pairs; `None` keeps all.
    pub nonmated_cap: Option<usize>,
    pub seed: u64,
}

/// Comparison pairs as `(reference or morph index, probe index)` into a set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonPairs {
    pub mated: Vec<(usize, usize)>,
    pub nonmated: Vec<(usize, usize)>,
    pub morph: Vec<(usize, usize)>,
}

impl ComparisonPairs {
    pub fn class(&self, c: ComparisonClass) -> &[(usize, usize)] {
        match c {
            ComparisonClass::Mated => &self.mated,
            ComparisonClass::Nonmated => &self.nonmated,
            ComparisonClass::Morph => &self.morph,
        }
    }
}

pub fn build_comparisons(set: &EmbeddingSet, protocol: &ComparisonProtocol) -> Result<ComparisonPairs> {
    let records = set.records();
    let mut probes_of: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut probes = Vec::new();
    let mut refs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.kind {
            SampleKind::Probe => {
                probes.push(i);
                probes_of.entry(&r.subject_a).or_default().push(i);
            }
            SampleKind::Reference => refs.push(i),
            SampleKind::Morph => {}
        }
    }

    let mut mated = Vec::new();
    let mut nonmated = Vec::new();
    for &r in &refs {
        for &p in &probes {
            if records[r].subject_a == records[p].subject_a {
                mated.push((r, p));
            } else {
                nonmated.push((r, p));
            }
        }
    }
    if let Some(cap) = protocol.nonmated_cap {
        if cap < nonmated.len() {
            let mut rng = stream(protocol.seed, Domain::Protocol, 0);
            let mut keep = sample(&mut rng, nonmated.len(), cap).into_vec();
            keep.sort_unstable();
            nonmated = keep.into_iter().map(|i| nonmated[i]).collect();
        }
    }

    let mut morph = Vec::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.kind == SampleKind::Morph) {
        for s in r.subjects() {
            if let Some(ps) = probes_of.get(s) {
                morph.extend(ps.iter().map(|&p| (i, p)));
            }
        }
    }

    for (name, list) in [("mated", &mated), ("nonmated", &nonmated), ("morph", &morph)] {
        if list.is_empty() {
            return Err(Error::EmptyProtocolCell(name.into()));
        }
    }
    Ok(ComparisonPairs { mated, nonmated, morph })
}

/// Similarity scores per comparison class; higher is more similar.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreSet {
    pub mated: Vec<f64>,
    pub nonmated: Vec<f64>,
    pub morph_attacks: Vec<f64>,
}

impl ScoreSet {
    pub fn class(&self, c: ComparisonClass) -> &[f64] {
        match c {
            ComparisonClass::Mated => &self.mated,
            ComparisonClass::Nonmated => &self.nonmated,
            ComparisonClass::Morph => &self.morph_attacks,
        }
    }

    pub fn class_mut(&mut self, c: ComparisonClass) -> &mut Vec<f64> {
        match c {
            ComparisonClass::Mated => &mut self.mated,
            ComparisonClass::Nonmated => &mut self.nonmated,
            ComparisonClass::Morph => &mut self.morph_attacks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in ComparisonClass::ALL {
            if let Some(s) = self.class(c).iter().find(|s| !s.is_finite()) {
                return Err(Error::InvariantViolation(format!("{} score {s} is not finite", c.token())));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,score\n");
        for c in ComparisonClass::ALL {
            for s in self.class(c) {
                writeln!(out, "{},{s:?}", c.token()).unwrap();
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "class,score" => {}
            _ => return Err(Error::Parse { line: 1, message: "expected header `class,score`".into() }),
        }
        let mut set = ScoreSet::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (class, score) = line.split_once(',').ok_or_else(|| parse_err("expected `class,score`".into()))?;
            let class: ComparisonClass = class.trim().parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let score: f64 = score.trim().parse().map_err(|e| parse_err(format!("bad score: {e}")))?;
            if !score.is_finite() {
                return Err(parse_err(format!("non-finite score {score}")));
            }
            set.class_mut(class).push(score);
        }
        Ok(set)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

pub fn similarity(sq_dist: f64) -> f64 {
    1.0 - sq_dist / 4.0
}

/// Unit rows for the given set indices; adapted when `adapter` is given.
fn side_rows(set: &EmbeddingSet, indices: &[usize], adapter: Option<&AdapterParams>) -> Result<Matrix> {
    let mut m = Matrix::zeros(indices.len(), set.dim());
    for (row, &i) in indices.iter().enumerate() {
        m.row_mut(row).copy_from_slice(&normalize_slice(set.records()[i].embedding.as_slice())?);
    }
    match adapter {
        Some(a) => a.transform_batch(&m),
        None => Ok(m),
    }
}

/// Position of every distinct index in a sorted, deduplicated list.
fn unique_sides(pairs: &ComparisonPairs, pick: impl Fn(&(usize, usize)) -> usize) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut all: Vec<usize> = ComparisonClass::ALL.iter().flat_map(|&c| pairs.class(c).iter().map(&pick)).collect();
    all.sort_unstable();
    all.dedup();
    let pos = all.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    (all, pos)
}

/// Scores every pair. The reference/morph side passes through `adapter`
/// when one is supplied; the probe side is always the raw embedding.
pub fn score_pairs(adapter: Option<&AdapterParams>, set: &EmbeddingSet, pairs: &ComparisonPairs) -> Result<ScoreSet> {
    let (left, left_pos) = unique_sides(pairs, |p| p.0);
    let (right, right_pos) = unique_sides(pairs, |p| p.1);
    let l = side_rows(set, &left, adapter)?;
    let r = side_rows(set, &right, None)?;
    let mut out = ScoreSet::default();
    for c in ComparisonClass::ALL {
        *out.class_mut(c) = pairs
            .class(c)
            .iter()
            .map(|&(a, b)| similarity(sq_dist_unchecked(l.row(left_pos[&a]), r.row(right_pos[&b]))).clamp(0.0, 1.0))
            .collect();
    }
    Ok(out)
}

pub fn score_comparisons(
    adapter: Option<&AdapterParams>,
    set: &EmbeddingSet,
    protocol: &ComparisonProtocol,
) -> Result<ScoreSet> {
    score_pairs(adapter, set, &build_comparisons(set, protocol)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub fmr: f64,
    pub fnmr: f64,
    pub iapar: f64,
}

fn nonempty<'a>(scores: &'a [f64], what: &str) -> Result<&'a [f64]> {
    if scores.is_empty() {
        Err(Error::EmptyScoreList(what.into()))
    } else {
        Ok(scores)
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

pub fn rates_at_threshold(scores: &ScoreSet, tau: f64) -> Result<Rates> {
    let mated = nonempty(&scores.mated, "mated")?;
    let nonmated = nonempty(&scores.nonmated, "nonmated")?;
    let morph = nonempty(&scores.morph_attacks, "morph")?;
    Ok(Rates {
        fmr: fraction(nonmated.iter().filter(|&&s| s >= tau).count(), nonmated.len()),
        fnmr: fraction(mated.iter().filter(|&&s| s < tau).count(), mated.len()),
        iapar: fraction(morph.iter().filter(|&&s| s >= tau).count(), morph.len()),
    })
}

/// Smallest threshold among the distinct non-mated scores, plus a sentinel
/// just above the maximum, whose FMR does not exceed `target`.
pub fn threshold_at_fmr(nonmated: &[f64], target: f64) -> Result<f64> {
    let nonmated = nonempty(nonmated, "nonmated")?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::OutOfRangeInput(format!("FMR target {target} outside [0, 1]")));
    }
    let mut sorted = nonmated.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let mut best = sorted[0].next_up();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
        if fraction(i, n) <= target {
            best = v;
        } else {
            break;
        }
    }
    Ok(best)
}

pub fn riapar(fnmr: f64, iapar: f64) -> Result<f64> {
    for (name, v) in [("FNMR", fnmr), ("IAPAR", iapar)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRangeInput(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(fnmr + iapar)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub target_fmr: f64,
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub iapar: f64,
    pub riapar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub points: Vec<OperatingPoint>,
}

pub fn evaluate(scenario: &str, scores: &ScoreSet, targets: &[f64]) -> Result<EvalReport> {
    let points = targets
        .iter()
        .map(|&t| {
            let threshold = threshold_at_fmr(&scores.nonmated, t)?;
            let r = rates_at_threshold(scores, threshold)?;
            Ok(OperatingPoint {
                target_fmr: t,
                threshold,
                fmr: r.fmr,
                fnmr: r.fnmr,
                iapar: r.iapar,
                riapar: riapar(r.fnmr, r.iapar)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { scenario: scenario.to_string(), points })
}

impl EvalReport {
    pub fn point(&self, target_fmr: f64) -> Option<&OperatingPoint> {
        self.points.iter().find(|p| p.target_fmr == target_fmr)
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("scenario,fmr_target,threshold,fmr,fnmr,iapar,riapar\n");
    for r in reports {
        for p in &r.points {
            writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.scenario, p.target_fmr, p.threshold, p.fmr, p.fnmr, p.iapar, p.riapar
            )
            .unwrap();
        }
    }
    s
}

fn percent(fmr: f64) -> String {
    let s = format!("{:.3}", fmr * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("FMR={s}%")
}

/// Aligned table: one row per scenario, IAPAR / FNMR / RIAPAR per target.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let targets: Vec<f64> = reports.first().map(|r| r.points.iter().map(|p| p.target_fmr).collect()).unwrap_or_default();
    let name_w = reports.iter().map(|r| r.scenario.len()).max().unwrap_or(0).max("Scenario".len());
    let cell = 22;
    let mut s = String::new();
    write!(s, "{:name_w$}", "").unwrap();
    for &t in &targets {
        write!(s, " | {:^cell$}", percent(t)).unwrap();
    }
    s.push('\n');
    write!(s, "{:name_w$}", "Scenario").unwrap();
    for _ in &targets {
        write!(s, " | {:>6} {:>6} {:>6}  ", "IAPAR", "FNMR", "RIAPAR").unwrap();
    }
    s.push('\n');
    s.push_str(&"-".repeat(name_w + targets.len() * (cell + 3)));
    s.push('\n');
    for r in reports {
        write!(s, "{:name_w$}", r.scenario).unwrap();
        for p in &r.points {
            write!(s, " | {:>6.2} {:>6.2} {:>6.2}  ", p.iapar, p.fnmr, p.riapar).unwrap();
        }
        s.push('\n');
    }
    s
}

/// `(FMR, FNMR)` at every distinct mated/non-mated score and a sentinel above
/// the maximum, in ascending threshold order, thinned to `n_points`.
pub fn det_points(scores: &ScoreSet, n_points: usize) -> Result<Vec<(f64, f64)>> {
    let mated = nonempty(&scores.mated, "mated")?;
    let nonmated = nonempty(&scores.nonmated, "nonmated")?;
    if n_points < 2 {
        return Err(Error::OutOfRangeInput(format!("DET curve needs at least 2 points, got {n_points}")));
    }
    let mut m = mated.to_vec();
    let mut nm = nonmated.to_vec();
    m.sort_unstable_by(f64::total_cmp);
    nm.sort_unstable_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = m.iter().chain(&nm).copied().collect();
    thresholds.sort_unstable_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(thresholds.last().unwrap().next_up());

    let (mut im, mut inm) = (0, 0);
    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while im < m.len() && m[im] < t {
            im += 1;
        }
        while inm < nm.len() && nm[inm] < t {
            inm += 1;
        }
        curve.push((fraction(nm.len() - inm, nm.len()), fraction(im, m.len())));
    }
    if curve.len() <= n_points {
        return Ok(curve);
    }
    let last = curve.len() - 1;
    let mut picked: Vec<usize> = (0..n_points).map(|k| (k * last + (n_points - 1) / 2) / (n_points - 1)).collect();
    picked.dedup();
    Ok(picked.into_iter().map(|i| curve[i]).collect())
}

pub fn det_to_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("fmr,fnmr\n");
    for (f, n) in points {
        writeln!(s, "{f:?},{n:?}").unwrap();
    }
    s
}

/// Writes `class,reference_id,probe_id,d0..` rows holding element-wise
/// squared differences for a seeded sample of each comparison class.
/// Returns the number of rows written.
pub fn export_difference_vectors(
    adapter: Option<&AdapterParams>,
    set: &EmbeddingSet,
    pairs_per_class: usize,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let pairs = build_comparisons(set, &ComparisonProtocol::default())?;
    let mut rng = stream(seed, Domain::Export, 0);
    let mut chosen = Vec::new();
    for c in ComparisonClass::ALL {
        let list = pairs.class(c);
        let mut idx = sample(&mut rng, list.len(), pairs_per_class.min(list.len())).into_vec();
        idx.sort_unstable();
        chosen.extend(idx.into_iter().map(|i| (c, list[i])));
    }
    let mut left: Vec<usize> = chosen.iter().map(|(_, p)| p.0).collect();
    left.sort_unstable();
    left.dedup();
    let lrows = side_rows(set, &left, adapter)?;
    let lpos: HashMap<usize, usize> = left.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut header = String::from("class,reference_id,probe_id");
    for d in 0..set.dim() {
        write!(header, ",d{d}").unwrap();
    }
    writeln!(out, "{header}")?;
    let records = set.records();
    let mut line = String::new();
    for (c, (a, b)) in &chosen {
        let probe = normalize_slice(records[*b].embedding.as_slice())?;
        line.clear();
        write!(line, "{},{},{}", c.token(), records[*a].sample_id, records[*b].sample_id).unwrap();
        for (x, y) in lrows.row(lpos[a]).iter().zip(&probe) {
            let d = x - y;
            write!(line, ",{:?}", d * d).unwrap();
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(chosen.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(m: &[f64], n: &[f64], a: &[f64]) -> ScoreSet {
        ScoreSet { mated: m.to_vec(), nonmated: n.to_vec(), morph_attacks: a.to_vec() }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(0.0), 1.0);
        assert_eq!(similarity(4.0), 0.0);
        assert_eq!(similarity(2.0), 0.5);
    }

    #[test]
    fn rates_examples() {
        let s = scores(&[0.9, 0.8, 0.4], &[0.3, 0.1], &[0.7, 0.2]);
        let r = rates_at_threshold(&s, 0.5).unwrap();
        assert_eq!((r.fmr, r.fnmr, r.iapar), (0.0, 1.0 / 3.0, 0.5));
        let r = rates_at_threshold(&s, 0.95).unwrap();
        assert_eq!((r.fmr, r.fnmr, r.iapar), (0.0, 1.0, 0.0));
        let r = rates_at_threshold(&s, 0.1).unwrap();
        assert_eq!((r.fmr, r.fnmr, r.iapar), (1.0, 0.0, 1.0));
        assert!(matches!(rates_at_threshold(&scores(&[], &[0.1], &[0.1]), 0.5), Err(Error::EmptyScoreList(_))));
    }

    #[test]
    fn threshold_examples() {
        let nm = [0.9, 0.5, 0.3, 0.1];
        assert_eq!(threshold_at_fmr(&nm, 0.25).unwrap(), 0.9);
        assert_eq!(threshold_at_fmr(&nm, 0.5).unwrap(), 0.5);
        let t = threshold_at_fmr(&nm, 0.0).unwrap();
        assert!(t > 0.9);
        let r = rates_at_threshold(&scores(&[0.5], &nm, &[0.5]), t).unwrap();
        assert_eq!(r.fmr, 0.0);
    }

    #[test]
    fn riapar_examples() {
        assert!((riapar(0.17, 0.08).unwrap() - 0.25).abs() < 1e-12);
        assert!((riapar(0.01, 0.27).unwrap() - 0.28).abs() < 1e-12);
        assert_eq!(riapar(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(riapar(1.2, 0.0), Err(Error::OutOfRangeInput(_))));
    }

    #[test]
    fn det_examples() {
        let d = det_points(&scores(&[0.8, 0.6], &[0.4, 0.2], &[]), 100).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d[0], (1.0, 0.0));
        assert_eq!(*d.last().unwrap(), (0.0, 1.0));
        let flat = det_points(&scores(&[0.5, 0.5], &[0.5], &[]), 10).unwrap();
        assert_eq!(flat, vec![(1.0, 0.0), (0.0, 1.0)]);
        let many: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let d = det_points(&scores(&many, &many, &[]), 7).unwrap();
        assert_eq!(d.len(), 7);
        assert_eq!(d[0], (1.0, 0.0));
        assert_eq!(*d.last().unwrap(), (0.0, 1.0));
    }

    #[test]
    fn score_csv_round_trip() {
        let s = scores(&[0.9, 0.1 + 0.2], &[0.3], &[1.0 / 3.0]);
        assert_eq!(ScoreSet::from_csv(&s.to_csv()).unwrap(), s);
        assert!(ScoreSet::from_csv("class,score\nbogus,0.1\n").is_err());
        assert!(ScoreSet::from_csv("nope\n").is_err());
    }

    #[test]
    fn table_layout() {
        let s = scores(&[0.9, 0.8], &[0.3, 0.1], &[0.7, 0.2]);
        let r = evaluate("Original", &s, &FRONTEX_FMR_TARGETS).unwrap();
        let t = reports_to_table(&[r]);
        assert!(t.contains("FMR=0.1%") && t.contains("FMR=0.01%") && t.contains("FMR=0.001%"));
        assert!(t.lines().nth(3).unwrap().starts_with("Original"));
    }
}
