//! The six head/regularizer setups trained over several seeds.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::metrics::MetricsReport;
use crate::train::{evaluate, train, train_to_dir};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSetup {
    pub id: usize,
    pub head: HeadKind,
    pub ncsl: bool,
}

pub const SETUPS: [AblationSetup; 6] = [
    AblationSetup { id: 1, head: HeadKind::Sphn, ncsl: false },
    AblationSetup { id: 2, head: HeadKind::Sphn, ncsl: true },
    AblationSetup { id: 3, head: HeadKind::Mphn, ncsl: false },
    AblationSetup { id: 4, head: HeadKind::Mphn, ncsl: true },
    AblationSetup { id: 5, head: HeadKind::MlpReg, ncsl: false },
    AblationSetup { id: 6, head: HeadKind::MlpReg, ncsl: true },
];

impl AblationSetup {
    pub fn label(&self) -> String {
        let head = match self.head {
            HeadKind::Sphn => "SPHN",
            HeadKind::Mphn => "MPHN",
            HeadKind::MlpReg => "MLPReg",
        };
        if self.ncsl {
            format!("{head}+NCSL")
        } else {
            head.to_string()
        }
    }

    /// `base` with the head kind, regularizer flag and seed replaced.
    pub fn config(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.head = self.head;
        c.loss.ncsl_enabled = self.ncsl;
        c.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub setup: AblationSetup,
    pub seed: u64,
    pub test: MetricsReport,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetupSummary {
    pub setup: AblationSetup,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    /// Medians over seeds, one row per setup in id order.
    pub summary: Vec<SetupSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let summary = SETUPS
            .iter()
            .filter_map(|s| {
                let mine: Vec<&RunResult> = runs.iter().filter(|r| r.setup == *s).collect();
                if mine.is_empty() {
                    return None;
                }
                let col = |f: fn(&MetricsReport) -> f64| median(&mine.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
                Some(SetupSummary {
                    setup: *s,
                    accuracy: col(|m| m.accuracy),
                    balanced_accuracy: col(|m| m.balanced_accuracy),
                    macro_f1: col(|m| m.macro_f1),
                })
            })
            .collect();
        AblationReport { runs, summary }
    }

    pub fn setup(&self, id: usize) -> Option<&SetupSummary> {
        self.summary.iter().find(|s| s.setup.id == id)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("setup,name,head,ncsl,acc,b_acc,f1\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.setup.id,
                r.setup.label(),
                r.setup.head,
                r.setup.ncsl,
                r.accuracy,
                r.balanced_accuracy,
                r.macro_f1
            ));
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("setup,seed,epochs,best_epoch,acc,b_acc,f1\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.setup.id,
                r.seed,
                r.epochs,
                r.best_epoch,
                r.test.accuracy,
                r.test.balanced_accuracy,
                r.test.macro_f1
            ));
        }
        s
    }
}

pub struct AblationData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Trains every setup for every seed on the same splits and evaluates on
/// the test split. With `out_dir`, each run is written to
/// `out_dir/setup{id}/seed{seed}`. `progress` is called after each run.
pub fn run_ablation(
    base: &ExperimentConfig,
    setups: &[AblationSetup],
    seeds: &[u64],
    data: &AblationData<'_>,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut runs = Vec::with_capacity(setups.len() * seeds.len());
    for setup in setups {
        for &seed in seeds {
            let cfg = setup.config(base, seed);
            let outcome = match out_dir {
                Some(dir) => {
                    let run_dir = dir.join(format!("setup{}", setup.id)).join(format!("seed{seed}"));
                    train_to_dir(&cfg, data.train, Some(data.val), &run_dir)?
                }
                None => train(&cfg, data.train, Some(data.val), None)?,
            };
            let test = evaluate(&outcome.model, &outcome.store, data.test, cfg.train.eval_batch_size)?;
            let result = RunResult {
                setup: *setup,
                seed,
                test,
                epochs: outcome.epochs.len(),
                best_epoch: outcome.best_epoch,
            };
            progress(&result);
            runs.push(result);
        }
    }
    Ok(AblationReport::from_runs(runs))
}
