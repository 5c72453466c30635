//! Full-batch training: Adam stages followed by L-BFGS refinement, keeping
//! the parameters with the lowest validation loss.

use std::fmt::Write as _;

use super::SurrogateModel;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::ldnet::loss::{metrics, Metrics};
use crate::optim::{adam_step, AdamState, Lbfgs, StepOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub adam_epochs: Vec<usize>,
    pub adam_lrs: Vec<f64>,
    pub qn_epochs: usize,
    /// Weight-decay coefficient on `‖θ‖²`.
    pub alpha: f64,
    /// Spectral loss weight; 0 disables.
    pub omega: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { adam_epochs: vec![300, 300], adam_lrs: vec![1e-2, 1e-3], qn_epochs: 200, alpha: 0.0, omega: 0.0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.adam_epochs.len() != self.adam_lrs.len() {
            return Err(Error::invalid("one learning rate per Adam stage is required"));
        }
        if self.adam_lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.omega >= 0.0) {
            return Err(Error::invalid("alpha and omega must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: String,
    /// Training objective including weight decay.
    pub train_loss: f64,
    /// Validation MSE.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Set when training stopped early on a numeric failure.
    pub aborted: Option<String>,
    pub line_search_failed: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,stage,train_loss,val_loss\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e},{:e}", r.epoch, r.stage, r.train_loss, r.val_loss);
        }
        s
    }
}

struct Tracker<'a> {
    model: &'a SurrogateModel,
    val: &'a [Sample],
    history: History,
    best_theta: Vec<f64>,
}

impl Tracker<'_> {
    fn record(&mut self, stage: &str, theta: &[f64], train_loss: f64) -> Result<()> {
        let val_loss = self.model.batch_loss(theta, self.val, 0.0)?;
        let epoch = self.history.rows.len();
        self.history.rows.push(HistoryRow { epoch, stage: stage.to_string(), train_loss, val_loss });
        if val_loss < self.history.best_val {
            self.history.best_val = val_loss;
            self.history.best_epoch = epoch;
            self.best_theta.copy_from_slice(theta);
        }
        Ok(())
    }
}

/// Trains in place. On numeric failure the best parameters so far are kept
/// and the history records the reason.
pub fn train(model: &mut SurrogateModel, ds: &Dataset, schedule: &TrainSchedule) -> Result<History> {
    schedule.validate()?;
    let train_set = ds.samples(Split::Train);
    let val_set = ds.samples(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    if ds.n_leads != model.n_leads || ds.n_t != model.n_t || ds.param_dim() != model.n_p {
        return Err(Error::invalid("dataset shape does not match the model"));
    }
    let (alpha, omega) = (schedule.alpha, schedule.omega);
    let snapshot = model.clone();
    let mut tracker = Tracker {
        model: &snapshot,
        val: &val_set,
        history: History { best_val: f64::INFINITY, ..History::default() },
        best_theta: model.theta.clone(),
    };
    let mut theta = model.theta.clone();
    let outcome = (|| -> Result<()> {
        let (l0, _) = snapshot.batch_loss_grad(&theta, &train_set, alpha, omega)?;
        tracker.record("init", &theta, l0)?;
        let mut adam = AdamState::new(theta.len());
        for (stage, (&epochs, &lr)) in schedule.adam_epochs.iter().zip(&schedule.adam_lrs).enumerate() {
            let name = format!("adam{}", stage + 1);
            for _ in 0..epochs {
                let (_, g) = snapshot.batch_loss_grad(&theta, &train_set, alpha, omega)?;
                adam_step(&mut theta, &g, &mut adam, lr);
                let (l, _) = snapshot.batch_loss_grad(&theta, &train_set, alpha, omega)?;
                tracker.record(&name, &theta, l)?;
            }
            log::info!("{name}: train {:.3e}, best val {:.3e}", tracker.history.rows.last().unwrap().train_loss, tracker.history.best_val);
        }
        if schedule.qn_epochs > 0 {
            let mut obj = |x: &[f64]| snapshot.batch_loss_grad(x, &train_set, alpha, omega);
            let mut qn = Lbfgs::new(theta.clone(), &mut obj)?;
            for _ in 0..schedule.qn_epochs {
                match qn.step(&mut obj)? {
                    StepOutcome::Progress => tracker.record("qn", &qn.x, qn.f)?,
                    StepOutcome::Converged => break,
                    StepOutcome::LineSearchFailed => {
                        tracker.history.line_search_failed = true;
                        log::warn!("quasi-Newton line search failed; keeping best-so-far parameters");
                        break;
                    }
                }
            }
            log::info!("qn: train {:.3e}, best val {:.3e}", qn.f, tracker.history.best_val);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        match e {
            Error::NumericFailure(msg) => tracker.history.aborted = Some(msg),
            other => return Err(other),
        }
    }
    model.theta = tracker.best_theta;
    Ok(tracker.history)
}

/// Metrics of a trained model on one split.
pub fn evaluate(model: &SurrogateModel, ds: &Dataset, split: Split) -> Result<Metrics> {
    let samples = ds.samples(split);
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let preds = samples.iter().map(|s| model.predict_normalized(&s.p)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = samples.into_iter().map(|s| s.y).collect();
    metrics(&preds, &targets, model.n_leads)
}
