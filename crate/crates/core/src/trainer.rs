//! Adapter training: Nesterov SGD, periodic weight shrink, early stopping.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterParams};
use crate::autodiff::{Mode, Tape};
use crate::embedding::{normalize_slice, EmbeddingSet};
use crate::error::{Error, Result};
use crate::losses::{evaluate_scenario_loss, scenario_loss, LossConfig, QuadrupletBatch, QuadrupletRows, Scenario};
use crate::matrix::Matrix;
use crate::mining::{build_quadruplets, build_with_domain, redraw_negatives, sample_epoch_batches, QuadIndices};
use crate::seeding::Domain;

/// Minimum drop in validation loss that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_coefficient: f64,
    pub decay_period_epochs: usize,
    pub patience_epochs: usize,
    pub margin: f64,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 0.1,
            momentum: 0.9,
            decay_coefficient: 0.1,
            decay_period_epochs: 3,
            patience_epochs: 10,
            margin: 3.0,
            scenario: Scenario::Tetra,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.epochs == 0 || self.decay_period_epochs == 0 || self.patience_epochs == 0 {
            return bad("epochs, decay_period_epochs and patience_epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch normalization, got {}", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.decay_coefficient) {
            return bad(format!("decay_coefficient must lie in [0, 1), got {}", self.decay_coefficient));
        }
        if self.patience_epochs > self.epochs {
            return bad(format!(
                "patience_epochs ({}) exceeds epochs ({})",
                self.patience_epochs, self.epochs
            ));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { margin: self.margin, scenario: self.scenario }
    }
}

/// One velocity buffer per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn for_params(params: &AdapterParams) -> Self {
        OptimizerState { velocity: params.parameters().iter().map(|m| vec![0.0; m.len()]).collect() }
    }
}

/// `v <- mu v + g; theta <- theta - lr (g + mu v)`.
pub fn nesterov_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, mu: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(Error::dims(theta.len(), grad.len().min(velocity.len())));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i}")));
    }
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *t -= lr * (g + mu * *v);
    }
    Ok(())
}

/// Applies [`nesterov_update`] to every adapter tensor. Gradients are
/// checked before anything is modified.
pub fn sgd_nesterov_step(
    params: &mut AdapterParams,
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::dims(state.velocity.len(), grads.len()));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(format!("parameter tensor {i}")));
        }
    }
    let mut result = Ok(());
    params.for_each_parameter_mut(|i, theta| {
        if result.is_ok() {
            result = nesterov_update(theta, grads[i].data(), &mut state.velocity[i], lr, mu);
        }
    });
    result?;
    if state.velocity.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("velocity buffer".into()));
    }
    Ok(())
}

/// `W <- W (1 - coefficient)` for the linear weights only.
pub fn apply_weight_decay(params: &mut AdapterParams, coefficient: f64) {
    let keep = 1.0 - coefficient;
    for layer in &mut params.layers {
        for w in layer.weight.data_mut() {
            *w *= keep;
        }
    }
}

pub fn decay_due(epoch: usize, period: usize) -> bool {
    period > 0 && epoch.is_multiple_of(period)
}

/// Patience-based stopping on a monitored loss. Ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = self.best_epoch.is_none() || loss < self.best - IMPROVEMENT_THRESHOLD;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub decayed: bool,
    pub stopped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub scenario: Scenario,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.records[self.best_epoch - 1].val_loss
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.decayed).map(|r| r.epoch).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,decayed,stopped\n");
        for r in &self.records {
            writeln!(s, "{},{:?},{:?},{},{}", r.epoch, r.train_loss, r.val_loss, r.decayed, r.stopped).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Normalized embeddings of a set plus its quadruplets as indices.
struct Prepared {
    raw: Matrix,
    quads: Vec<QuadIndices>,
}

fn normalized_matrix(set: &EmbeddingSet) -> Result<Matrix> {
    let mut m = Matrix::zeros(set.len(), set.dim());
    for (i, r) in set.records().iter().enumerate() {
        m.row_mut(i).copy_from_slice(&normalize_slice(r.embedding.as_slice())?);
    }
    Ok(m)
}

fn keep_usable(scenario: Scenario, quads: Vec<QuadIndices>) -> Result<Vec<QuadIndices>> {
    if !scenario.needs_second_subject() {
        return Ok(quads);
    }
    let kept: Vec<_> = quads.into_iter().filter(|q| q.partner.is_some()).collect();
    if kept.is_empty() {
        return Err(Error::MissingSecondSubject(format!(
            "scenario {scenario} (no morph partner has both a reference and a probe)"
        )));
    }
    Ok(kept)
}

fn validation_rows(params: &AdapterParams, val: &Prepared, scenario: Scenario) -> Result<QuadrupletRows> {
    let adapted = params.transform_batch(&val.raw)?;
    let pick = |m: &Matrix, f: &dyn Fn(&QuadIndices) -> usize| {
        m.gather_rows(&val.quads.iter().map(f).collect::<Vec<_>>())
    };
    let second = if scenario.needs_second_subject() {
        Some((
            pick(&adapted, &|q| q.partner.unwrap().0),
            pick(&val.raw, &|q| q.partner.unwrap().1),
        ))
    } else {
        None
    };
    Ok(QuadrupletRows {
        anchor: pick(&adapted, &|q| q.anchor),
        positive: pick(&val.raw, &|q| q.positive),
        negative: pick(&adapted, &|q| q.negative),
        morph: pick(&adapted, &|q| q.morph),
        second,
    })
}

/// One optimizer step on a batch; returns the batch loss before the update.
fn train_step(
    params: &mut AdapterParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    raw: &Matrix,
    batch: &[QuadIndices],
) -> Result<f64> {
    let scenario = config.scenario;
    let n = batch.len();
    // Rows that pass through the adapter, stacked so one forward shares
    // batch statistics: anchors, second anchors, negatives, morphs.
    let mut stacked: Vec<usize> = batch.iter().map(|q| q.anchor).collect();
    if scenario.needs_second_subject() {
        stacked.extend(batch.iter().map(|q| q.partner.expect("filtered").0));
    }
    if scenario.uses_negative() {
        stacked.extend(batch.iter().map(|q| q.negative));
    }
    stacked.extend(batch.iter().map(|q| q.morph));

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let input = tape.leaf(raw.gather_rows(&stacked));
    let (out, stats) = params.forward_on_tape(&mut tape, &vars, input, Mode::Train)?;
    let unit = tape.normalize_rows(out)?;

    let mut offset = 0;
    let mut take = |tape: &mut Tape| -> Result<_> {
        let v = tape.slice_rows(unit, offset, n)?;
        offset += n;
        Ok(v)
    };
    let anchor = take(&mut tape)?;
    let anchor2 = if scenario.needs_second_subject() { Some(take(&mut tape)?) } else { None };
    let negative = if scenario.uses_negative() { Some(take(&mut tape)?) } else { None };
    let morph = take(&mut tape)?;
    let positive = tape.leaf(raw.gather_rows(&batch.iter().map(|q| q.positive).collect::<Vec<_>>()));
    let second = match anchor2 {
        Some(a2) => {
            let p2 = raw.gather_rows(&batch.iter().map(|q| q.partner.expect("filtered").1).collect::<Vec<_>>());
            Some((a2, tape.leaf(p2)))
        }
        None => None,
    };
    let qb = QuadrupletBatch { anchor, positive, negative: negative.unwrap_or(morph), morph, second };
    let loss = scenario_loss(&mut tape, &config.loss_config(), &qb)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("batch loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Matrix> = vars.flat().into_iter().map(|v| grads.take(v)).collect();
    sgd_nesterov_step(params, &grads, state, config.learning_rate, config.momentum)?;
    params.absorb_batch_stats(&stats);
    Ok(value)
}

pub fn train(config: &TrainConfig, train_set: &EmbeddingSet, val_set: &EmbeddingSet) -> Result<(AdapterParams, TrainHistory)> {
    train_with_observer(config, train_set, val_set, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_observer(
    config: &TrainConfig,
    train_set: &EmbeddingSet,
    val_set: &EmbeddingSet,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(AdapterParams, TrainHistory)> {
    config.validate()?;
    if train_set.dim() != val_set.dim() {
        return Err(Error::dims(train_set.dim(), val_set.dim()));
    }
    let mut train_refs = build_quadruplets(train_set, config.seed)?;
    let val_refs = build_with_domain(val_set, config.seed, Domain::ValidationMining)?;
    let val = Prepared {
        raw: normalized_matrix(val_set)?,
        quads: keep_usable(
            config.scenario,
            val_refs.iter().map(|q| q.resolve(val_set)).collect::<Result<_>>()?,
        )?,
    };
    let raw = normalized_matrix(train_set)?;

    let mut params = init_adapter(train_set.dim(), config.seed)?;
    let mut state = OptimizerState::for_params(&params);
    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut best = params.clone();
    let mut records = Vec::new();

    for epoch in 1..=config.epochs {
        redraw_negatives(&mut train_refs, train_set, config.seed, epoch as u64)?;
        let quads = keep_usable(
            config.scenario,
            train_refs.iter().map(|q| q.resolve(train_set)).collect::<Result<_>>()?,
        )?;
        let batches = sample_epoch_batches(quads.len(), config.batch_size, config.seed, epoch as u64);
        if batches.is_empty() {
            return Err(Error::NoValidQuadruplets(format!(
                "{} usable quadruplets cannot form a batch of at least 2",
                quads.len()
            )));
        }
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for b in &batches {
            let batch: Vec<QuadIndices> = b.iter().map(|&i| quads[i]).collect();
            let loss = train_step(&mut params, &mut state, config, &raw, &batch).map_err(|e| match e {
                Error::NonFiniteGradient(m) => Error::NonFiniteGradient(format!("epoch {epoch}: {m}")),
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            weighted += loss * batch.len() as f64;
            seen += batch.len();
        }
        let decayed = config.decay_coefficient > 0.0 && decay_due(epoch, config.decay_period_epochs);
        if decayed {
            apply_weight_decay(&mut params, config.decay_coefficient);
        }
        let val_loss = evaluate_scenario_loss(&config.loss_config(), &validation_rows(&params, &val, config.scenario)?)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = params.clone();
        }
        let record = EpochRecord { epoch, train_loss: weighted / seen as f64, val_loss, decayed, stopped: decision.stop };
        observer(&record);
        records.push(record);
        if decision.stop {
            break;
        }
    }
    let history = TrainHistory {
        scenario: config.scenario,
        records,
        best_epoch: stopper.best_epoch().expect("at least one epoch ran"),
    };
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesterov_examples() {
        let mut theta = [1.0];
        let mut v = [0.0];
        nesterov_update(&mut theta, &[0.5], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v[0], 0.5);
        assert!((theta[0] - 0.905).abs() < 1e-15);

        let mut theta = [1.0];
        nesterov_update(&mut theta, &[0.5], &mut [0.0], 0.1, 0.0).unwrap();
        assert!((theta[0] - 0.95).abs() < 1e-15);

        let mut theta = [1.0];
        nesterov_update(&mut theta, &[0.0], &mut [0.0], 0.1, 0.9).unwrap();
        assert_eq!(theta[0], 1.0);

        assert!(matches!(
            nesterov_update(&mut [1.0], &[f64::NAN], &mut [0.0], 0.1, 0.9),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn weight_decay_touches_only_weights() {
        let mut p = init_adapter(4, 0).unwrap();
        p.layers[0].weight.set(0, 0, 1.0);
        p.layers[0].bias[0] = 1.0;
        let before = p.clone();
        apply_weight_decay(&mut p, 0.1);
        assert!((p.layers[0].weight.get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(p.layers[0].bias, before.layers[0].bias);
        assert_eq!(p.norms, before.norms);
        let mut q = before.clone();
        apply_weight_decay(&mut q, 0.0);
        assert_eq!(q, before);
        assert_eq!((1..=9).filter(|&e| decay_due(e, 3)).collect::<Vec<_>>(), vec![3, 6, 9]);
    }

    #[test]
    fn early_stopping_schedules() {
        let mut s = EarlyStopping::new(10);
        for e in 1..=100 {
            let d = s.observe(e, 100.0 - e as f64);
            assert!(d.improved && !d.stop);
        }
        assert_eq!(s.best_epoch(), Some(100));

        let mut s = EarlyStopping::new(10);
        let mut stopped_at = None;
        for e in 1..=100 {
            if s.observe(e, 1.0).stop {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(s.best_epoch(), Some(1));

        let mut s = EarlyStopping::new(3);
        s.observe(1, 1.0);
        assert!(!s.observe(2, 1.0 - 5e-7).improved);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { patience_epochs: 200, ..Default::default() },
            TrainConfig { decay_coefficient: 1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { margin: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))), "{c:?}");
        }
    }
}
