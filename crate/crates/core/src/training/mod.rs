//! Loss, Adam, early stopping and the epoch loop.

mod split;

pub use split::{split_dataset, split_indices, SplitIndices, SplitSpec};

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{is_kernel, ForwardCache, Gradients, SNeurodCnn, PARAM_NAMES};
use crate::tensor::{shuffle_indices, Prng, Tensor};

/// Stream offset separating the dropout generator from the shuffle generator.
const DROPOUT_STREAM: u64 = 0x6a09_e667_f3bc_c908;

/// Smallest probability fed to the logarithm.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub restore_best_weights: bool,
    pub l2_lambda: f64,
    pub seed: u64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: Some(5),
            restore_best_weights: true,
            l2_lambda: 0.01,
            seed: 0,
            monitor: Monitor::ValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1 (use null to disable)".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!("l2_lambda must be >= 0, got {}", self.l2_lambda)));
        }
        Ok(())
    }
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = probs.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Data(format!("label {l} at batch position {i} is out of range for {k} classes")));
    }
    Ok((b, k))
}

/// Mean negative log-likelihood of the true class.
pub fn data_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = check_labels(probs, labels)?;
    let p = probs.data();
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -p[i * k + l].max(PROB_FLOOR).ln()).sum();
    Ok(total / b as f64)
}

/// Cross-entropy plus `lambda * kernel_sum_of_squares`, and the fused
/// softmax/cross-entropy gradient `(probs - onehot) / B` with respect to
/// the logits.
pub fn cross_entropy_loss(
    probs: &Tensor,
    labels: &[usize],
    kernel_sum_of_squares: f64,
    lambda: f64,
) -> Result<(f64, Tensor)> {
    let (b, k) = check_labels(probs, labels)?;
    let loss = data_loss(probs, labels)? + lambda * kernel_sum_of_squares;
    let mut d = probs.clone();
    let inv_b = 1.0 / b as f64;
    for (i, &l) in labels.iter().enumerate() {
        d.data_mut()[i * k + l] -= 1.0;
    }
    d.data_mut().iter_mut().for_each(|v| *v *= inv_b);
    Ok((loss, d))
}

/// Network gradients plus `2 * lambda * w` on every kernel.
pub fn backward_pass(model: &SNeurodCnn, cache: &ForwardCache, d_logits: &Tensor, lambda: f64) -> Result<Gradients> {
    let mut grads = model.backward(cache, d_logits)?;
    if lambda != 0.0 {
        for (i, (g, w)) in grads.tensors.iter_mut().zip(model.parameters()).enumerate() {
            if is_kernel(i) {
                for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv += 2.0 * lambda * wv;
                }
            }
        }
    }
    Ok(grads)
}

/// First/second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(names: Vec<String>, shapes: &[&[usize]]) -> Self {
        Self {
            names,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_model(model: &SNeurodCnn) -> Self {
        let shapes: Vec<&[usize]> = model.parameters().iter().map(|t| t.shape()).collect();
        Self::new(PARAM_NAMES.iter().map(|s| s.to_string()).collect(), &shapes)
    }
}

/// One bias-corrected Adam update. Every gradient is checked for
/// non-finite values before any parameter changes.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || g.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "{}: parameter {:?}, gradient {:?}, moments {:?}",
                state.names[i],
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", state.names[i])));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Patience counter over a lower-is-better score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: Option<f64>,
    best_epoch: Option<usize>,
    wait: usize,
}

/// Outcome of feeding one epoch's score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self { patience, best: None, best_epoch: None, wait: 0 }
    }

    /// Strict improvement resets the counter; otherwise it grows until it
    /// reaches the patience.
    pub fn update(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| score < b);
        if improved {
            self.best = Some(score);
            self.best_epoch = Some(epoch);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        let stop = self.patience.is_some_and(|p| self.wait >= p);
        StopDecision { improved, stop }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn wait(&self) -> usize {
        self.wait
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Whether parameters were reset to the best snapshot after the loop.
    pub restored: bool,
}

impl History {
    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.records[e - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            let _ =
                writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
        }
        out
    }
}

fn snapshot(model: &SNeurodCnn) -> Vec<Tensor> {
    model.parameters().iter().map(|t| (*t).clone()).collect()
}

fn restore(model: &mut SNeurodCnn, snap: &[Tensor]) {
    for (p, s) in model.parameters_mut().into_iter().zip(snap) {
        p.data_mut().copy_from_slice(s.data());
    }
}

/// Epoch driver shared by [`fit`] and tests: `epoch_fn(model, epoch)` runs
/// one epoch and reports its statistics. Handles monitoring, snapshots,
/// stopping and best-weight restoration.
pub fn run_epochs<F>(model: &mut SNeurodCnn, cfg: &TrainConfig, mut epoch_fn: F) -> Result<History>
where
    F: FnMut(&mut SNeurodCnn, usize) -> Result<EpochRecord>,
{
    cfg.validate()?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut history = History::default();
    for epoch in 1..=cfg.max_epochs {
        let rec = epoch_fn(model, epoch)?;
        for (what, v) in [("training loss", rec.train_loss), ("validation loss", rec.val_loss)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite {what} at epoch {epoch}")));
            }
        }
        let score = match cfg.monitor {
            Monitor::ValLoss => rec.val_loss,
            Monitor::ValAccuracy => -rec.val_accuracy,
        };
        let decision = stopper.update(epoch, score);
        info!(
            "epoch {epoch}: train_loss {:.5} train_acc {:.4} val_loss {:.5} val_acc {:.4}{}",
            rec.train_loss,
            rec.train_accuracy,
            rec.val_loss,
            rec.val_accuracy,
            if decision.improved { " *" } else { "" }
        );
        history.records.push(rec);
        if decision.improved && cfg.restore_best_weights {
            best_params = Some(snapshot(model));
        }
        if decision.stop {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    if let (Some(snap), Some(best)) = (&best_params, history.best_epoch) {
        if best != history.epochs_run() {
            restore(model, snap);
            history.restored = true;
        }
    }
    Ok(history)
}

/// Per-batch result of a training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Cross-entropy plus the L2 penalty.
    pub loss: f64,
    pub data_loss: f64,
    pub correct: usize,
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    labels.iter().enumerate().filter(|&(i, &l)| predicted_class(&probs.data()[i * k..(i + 1) * k]) == l).count()
}

/// Arg-max with ties resolved towards the higher class index, so that
/// for two classes the positive class wins at exactly 0.5.
pub fn predicted_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p >= row[best] {
            best = j;
        }
    }
    best
}

/// `lambda * sum(w^2)` over kernels; exactly zero when `lambda` is zero.
pub fn l2_penalty(model: &SNeurodCnn, lambda: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * model.kernel_sum_of_squares()
    }
}

/// Forward in training mode, backward, one Adam update.
pub fn train_step(
    model: &mut SNeurodCnn,
    adam: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    dropout_rng: &mut Prng,
) -> Result<StepStats> {
    let (probs, cache) = model.forward(x, Mode::Train, dropout_rng)?;
    let penalty = if cfg.l2_lambda != 0.0 { model.kernel_sum_of_squares() } else { 0.0 };
    let (loss, d_logits) = cross_entropy_loss(&probs, labels, penalty, cfg.l2_lambda)?;
    let data_loss = loss - cfg.l2_lambda * penalty;
    let grads = backward_pass(model, &cache, &d_logits, cfg.l2_lambda)?;
    let mut params = model.parameters_mut();
    adam_step(&mut params, &grads.tensors, adam, cfg.learning_rate)?;
    Ok(StepStats { loss, data_loss, correct: count_correct(&probs, labels) })
}

/// Eval-mode pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Full probability rows, `[N, classes]`.
    pub probabilities: Tensor,
    /// Mean cross-entropy (no penalty).
    pub loss: f64,
    pub accuracy: f64,
}

impl Evaluation {
    /// Probability of class 1 (AD) per sample.
    pub fn positive_scores(&self) -> Vec<f64> {
        let k = self.probabilities.shape()[1];
        self.probabilities.data().chunks(k).map(|r| r[1]).collect()
    }
}

pub fn evaluate(model: &SNeurodCnn, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let k = model.config().num_classes;
    let mut probs = Vec::with_capacity(ds.len() * k);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = ds.batch(chunk)?;
        let p = model.predict(&x)?;
        loss_sum += data_loss(&p, &labels)? * chunk.len() as f64;
        correct += count_correct(&p, &labels);
        probs.extend_from_slice(p.data());
    }
    Ok(Evaluation {
        probabilities: Tensor::new(&[ds.len(), k], probs)?,
        loss: loss_sum / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

/// Mini-batch training with per-epoch seeded shuffling, validation after
/// every epoch, early stopping and best-weight restoration. Recorded losses
/// include the L2 penalty: the training loss averages each step's objective
/// over samples, the validation loss adds the end-of-epoch penalty to the
/// validation cross-entropy.
pub fn fit(model: &mut SNeurodCnn, train: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty splits (train {}, validation {})",
            train.len(),
            validation.len()
        )));
    }
    let mut shuffle_rng = Prng::new(cfg.seed);
    let mut dropout_rng = Prng::new(cfg.seed ^ DROPOUT_STREAM);
    let mut adam = AdamState::for_model(model);
    run_epochs(model, cfg, |model, epoch| {
        let order = shuffle_indices(&mut shuffle_rng, train.len());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(chunk)?;
            let s = train_step(model, &mut adam, &x, &labels, cfg, &mut dropout_rng)?;
            if !s.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += s.loss * chunk.len() as f64;
            correct += s.correct;
        }
        let val = evaluate(model, validation, cfg.batch_size)?;
        Ok(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: val.loss + l2_penalty(model, cfg.l2_lambda),
            val_accuracy: val.accuracy,
        })
    })
}
