use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use swin_align::ablation::{run_ablation, AblationData, SETUPS};
use swin_align::config::ExperimentConfig;
use swin_align::data::{Dataset, Splits, SyntheticSpec};
use swin_align::gradcam::{gradcam, to_pgm};
use swin_align::heads::HeadKind;
use swin_align::metrics::MetricsReport;
use swin_align::model::{gradcheck_model, ModelConfig};
use swin_align::tensor::gradcheck::GradCheckOptions;
use swin_align::tensor::io::save_tensor;
use swin_align::train::{evaluate, train_to_dir, RunDir};
use swin_align::{Error, Result};

#[derive(Parser)]
#[command(name = "swin-align", version, about = "Windowed-attention grade classifier with stage-feature alignment")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test benchmark.
    GenData(GenData),
    /// Train one model and write a run directory.
    Train(Train),
    /// Evaluate a run directory on a data split.
    Eval(Eval),
    /// Finite-difference check of the full objective on a micro model.
    Gradcheck(Gradcheck),
    /// Final-stage activation map for one image and grade.
    Gradcam(Gradcam),
    /// Train the six head/regularizer setups over several seeds.
    Ablation(Ablation),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples per grade.
    #[arg(long, default_value_t = 100)]
    per_grade: usize,
    #[arg(long, default_value_t = 20)]
    val_per_grade: usize,
    #[arg(long, default_value_t = 20)]
    test_per_grade: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 5)]
    grades: usize,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory, overriding `data.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override, repeatable. Applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.data {
            cfg.data_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn pick(self, splits: Splits) -> Dataset {
        match self {
            SplitArg::Train => splits.train,
            SplitArg::Val => splits.val,
            SplitArg::Test => splits.test,
        }
    }
}

#[derive(Args)]
struct Eval {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Data directory; the run's `data.dir` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write the report and confusion matrix here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Head variant to check; all three when omitted.
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
}

#[derive(Args)]
struct Gradcam {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Index of the image within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    grade: usize,
    /// Output path prefix; `.kten` and `.pgm` are appended.
    #[arg(long)]
    out: PathBuf,
    /// Pixels per map cell in the PGM rendering.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

#[derive(Args)]
struct Ablation {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds, overriding `ablation.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory for run directories and the summary tables.
    #[arg(long)]
    out: PathBuf,
}

fn data_dir(explicit: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.data_dir.clone())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn gen_data(a: &GenData) -> Result<()> {
    let spec = SyntheticSpec {
        per_grade: a.per_grade,
        grades: a.grades,
        seed: a.seed,
        noise_sigma: a.noise,
        ..SyntheticSpec::for_size(a.size)
    };
    let splits = Splits::generate(&spec, a.val_per_grade, a.test_per_grade)?;
    splits.save(&a.out)?;
    println!(
        "wrote {} train, {} val, {} test images to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let cfg = a.config.resolve()?;
    let splits = Splits::load(&cfg.data_dir)?;
    let outcome = train_to_dir(&cfg, &splits.train, Some(&splits.val), &a.out)?;
    let val = evaluate(&outcome.model, &outcome.store, &splits.val, cfg.train.eval_batch_size)?;
    println!(
        "trained {} epochs ({} steps); best epoch {} val b_acc {:.4}",
        outcome.epochs.len(),
        outcome.trace.len(),
        outcome.best_epoch,
        val.balanced_accuracy
    );
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let (cfg, model, store) = RunDir::new(&a.run).load()?;
    let data = a.split.pick(Splits::load(&data_dir(&a.data, &cfg))?);
    let report = evaluate(&model, &store, &data, cfg.train.eval_batch_size)?;
    let text = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    print!("{text}");
    if let Some(out) = &a.out {
        write(out, format!("{text}\n{}", report.confusion.to_csv()))?;
    }
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<()> {
    let opts = GradCheckOptions {
        h: a.step,
        tol: a.tol,
        ..GradCheckOptions::default()
    };
    let loss = swin_align::losses::LossConfig {
        lambda: a.lambda,
        ..Default::default()
    };
    let kinds = match a.head {
        Some(k) => vec![k],
        None => vec![HeadKind::Mphn, HeadKind::Sphn, HeadKind::MlpReg],
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for kind in kinds {
        let cfg = ModelConfig {
            head: kind,
            ..ModelConfig::micro()
        };
        let r = gradcheck_model(&cfg, &loss, a.seed, &opts)?;
        let at = r.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
        println!(
            "{kind}: {} entries, max relative error {:.3e}{at}",
            r.checked, r.max_rel_error
        );
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failed.push(kind);
        }
    }
    println!("max relative error {worst:.3e} (tol {:.1e})", a.tol);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for: {failed:?}")))
    }
}

fn gradcam_cmd(a: &Gradcam) -> Result<()> {
    let (cfg, model, store) = RunDir::new(&a.run).load()?;
    let data = a.split.pick(Splits::load(&data_dir(&a.data, &cfg))?);
    if a.index >= data.len() {
        return Err(Error::Contract(format!(
            "image index {} out of range for {} images",
            a.index,
            data.len()
        )));
    }
    let (image, labels) = data.batch(&[a.index]);
    let map = gradcam(&model, &store, &image, a.grade)?;
    let kten = a.out.with_extension("kten");
    let pgm = a.out.with_extension("pgm");
    save_tensor(&kten, &map)?;
    write(&pgm, to_pgm(&map, a.scale)?)?;
    println!(
        "image {} (grade {}), map for grade {}: {} and {}",
        a.index,
        labels[0],
        a.grade,
        kten.display(),
        pgm.display()
    );
    Ok(())
}

fn ablation(a: &Ablation) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seeds = a.seeds.clone().unwrap_or_else(|| cfg.ablation_seeds.clone());
    let splits = Splits::load(&cfg.data_dir)?;
    let data = AblationData {
        train: &splits.train,
        val: &splits.val,
        test: &splits.test,
    };
    let report = run_ablation(&cfg, &SETUPS, &seeds, &data, Some(&a.out), |r| {
        println!(
            "setup {} seed {}: b_acc {:.4} after {} epochs",
            r.setup.id, r.seed, r.test.balanced_accuracy, r.epochs
        )
    })?;
    write(&a.out.join("summary.csv"), report.summary_csv())?;
    write(&a.out.join("runs.csv"), report.runs_csv())?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
