//! Mini-batch training, evaluation and run directories.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossReport};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "checkpoint.kckp";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation B-ACC improvement.
    pub patience: usize,
    /// Stop once accuracy on the training set reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 200,
            patience: 30,
            stop_at_train_accuracy: None,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub sum_bce: f64,
    pub ncsl: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.total, self.sum_bce, self.ncsl
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_balanced_accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
}

/// Model, parameters and optimizer for one training run.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub loss: LossConfig,
    steps: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&config.model, &mut store, config.seed)?;
        let optimizer = Optimizer::new(config.train.optimizer.clone(), &store);
        Ok(Trainer {
            model,
            store,
            optimizer,
            loss: config.loss.clone(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, backward and one optimizer update, then zeroed gradients.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize], epoch: usize) -> Result<StepRecord> {
        let report = self.accumulate(images, labels)?;
        self.optimizer.step(&mut self.store);
        self.store.zero_grad();
        self.steps += 1;
        Ok(StepRecord {
            step: self.steps,
            epoch,
            total: report.total,
            sum_bce: report.sum_bce(),
            ncsl: report.ncsl,
        })
    }

    /// Forward and backward only; gradients are added to the store.
    pub fn accumulate(&mut self, images: &Tensor, labels: &[usize]) -> Result<LossReport> {
        let g = Graph::new();
        let (loss, report, _) = self
            .model
            .loss(&g, &self.store, g.constant(images.clone()), labels, &self.loss)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                step: self.steps + 1,
                value: report.total,
            });
        }
        g.backward(loss, &mut self.store)?;
        Ok(report)
    }
}

/// Grades decided for every sample, in batches.
pub fn predict_dataset(model: &Model, store: &ParamStore, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        out.extend(model.predict(store, &x)?.1);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset, batch: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let predicted = predict_dataset(model, store, data, batch)?;
    MetricsReport::compute(&data.labels, &predicted, model.config.grades)
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the selected epoch: best validation B-ACC when a
    /// validation set is given, otherwise the last epoch.
    pub store: ParamStore,
    pub trace: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: Option<f64>,
}

/// Runs the full loop. Each step's log line is written to `log` as it
/// completes.
pub fn train(
    config: &ExperimentConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if train_set.grades != config.model.grades {
        return Err(Error::Config(format!(
            "dataset has {} grades, model has {}",
            train_set.grades, config.model.grades
        )));
    }
    let tc = &config.train;
    let mut trainer = Trainer::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tc.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let rec = trainer.train_step(&x, &y, epoch)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", rec.log_line())?;
            }
            loss_sum += rec.total;
            batches += 1;
            trace.push(rec);
        }
        let val_bacc = match val_set {
            Some(v) => Some(evaluate(&trainer.model, &trainer.store, v, tc.eval_batch_size)?.balanced_accuracy),
            None => None,
        };
        let train_acc = match tc.stop_at_train_accuracy {
            Some(_) => Some(evaluate(&trainer.model, &trainer.store, train_set, tc.eval_batch_size)?.accuracy),
            None => None,
        };
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            val_balanced_accuracy: val_bacc,
            train_accuracy: train_acc,
        });
        if let Some(b) = val_bacc {
            if best.as_ref().map_or(true, |(top, _, _)| b > *top) {
                best = Some((b, epoch, trainer.store.snapshot()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        if stale >= tc.patience {
            break;
        }
        if let (Some(acc), Some(target)) = (train_acc, tc.stop_at_train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let last_epoch = epochs.last().map_or(0, |e| e.epoch);
    let Trainer { model, mut store, .. } = trainer;
    let (best_epoch, best_val) = match best {
        Some((b, epoch, values)) => {
            store.restore(&values);
            (epoch, Some(b))
        }
        None => (last_epoch, None),
    };
    Ok(TrainOutcome {
        model,
        store,
        trace,
        epochs,
        best_epoch,
        best_val_balanced_accuracy: best_val,
    })
}

/// The files that make up a finished run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    /// Loads the persisted config and checkpoint.
    pub fn load(&self) -> Result<(ExperimentConfig, Model, ParamStore)> {
        let config = ExperimentConfig::load(&self.config())?;
        let (model, mut store) = Model::layout(&config.model)?;
        store.load_checkpoint(&self.checkpoint())?;
        Ok((config, model, store))
    }
}

/// Trains and writes config, metrics log and selected checkpoint to `dir`.
pub fn train_to_dir(
    config: &ExperimentConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let run = RunDir::new(dir);
    config.save(&run.config())?;
    let path = run.metrics();
    let file = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let outcome = train(config, train_set, val_set, Some(&mut log))?;
    drop(log);
    outcome.store.save_checkpoint(&run.checkpoint())?;
    Ok(outcome)
}

#[cfg(test)]
mod tests;
