//! `sfuda`: experiment runner for source-free adaptation on synthetic tasks.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfuda_core::data::{Dataset, Domain, EvalLabels, StandardTask};
use sfuda_core::model::{pretrain_source, ModelParams, PretrainConfig};
use sfuda_core::pipeline::{self, ablation_grid, adapt, emit_metrics, sweep_lambda};

use config::AdaptArgs;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<sfuda_core::Error> for CliError {
    fn from(e: sfuda_core::Error) -> Self {
        let code = match e {
            sfuda_core::Error::Io { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "sfuda",
    version,
    about = "Source-free domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the shifted-blobs-4 task: labeled source, unlabeled target, target truth.
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "SFUDA_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train a source model and save it frozen.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, env = "SFUDA_SEED")]
        seed: Option<u64>,
    },
    /// Adapt a frozen source model to an unlabeled target.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        /// Directory for metrics.csv, summary.json, entropy.csv and features.csv.
        #[arg(long)]
        metrics: PathBuf,
        /// Target labels, one per line, used only for reported accuracies.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        settings: AdaptArgs,
    },
    /// Report a model's accuracy on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Labels, one per line; defaults to the labels stored in the dataset.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the four-step component ladder over several seeds.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Number of seeds, counted up from the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        settings: AdaptArgs,
    },
    /// Final accuracy for each constant loss weighting on a simplex grid.
    SweepLambda {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Grid spacing; must divide 1.
        #[arg(long)]
        grid: f64,
        #[command(flatten)]
        settings: AdaptArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Generate { out_dir, seed } => cmd_generate(&out_dir, seed),
        Command::Pretrain {
            source,
            out,
            epochs,
            lr,
            momentum,
            batch_size,
            hidden,
            feature_dim,
            seed,
        } => {
            let d = PretrainConfig::default();
            let cfg = PretrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                lr: lr.unwrap_or(d.lr),
                momentum: momentum.unwrap_or(d.momentum),
                batch_size: batch_size.unwrap_or(d.batch_size),
                hidden: hidden.unwrap_or(d.hidden),
                feature_dim: feature_dim.unwrap_or(d.feature_dim),
                seed: seed.unwrap_or(d.seed),
            };
            cmd_pretrain(&source, &out, &cfg)
        }
        Command::Adapt {
            model,
            target,
            out_model,
            metrics,
            truth,
            settings,
        } => cmd_adapt(
            &model,
            &target,
            &out_model,
            &metrics,
            truth.as_deref(),
            &settings,
        ),
        Command::Evaluate {
            model,
            target,
            truth,
        } => cmd_evaluate(&model, &target, truth.as_deref()),
        Command::Ablate {
            model,
            target,
            truth,
            metrics,
            seeds,
            settings,
        } => cmd_ablate(&model, &target, &truth, &metrics, seeds, &settings),
        Command::SweepLambda {
            model,
            target,
            truth,
            metrics,
            grid,
            settings,
        } => cmd_sweep(&model, &target, &truth, &metrics, grid, &settings),
    }
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Reads one label per line. Any failure, a missing file included, is a
/// usage error because evaluation labels are a required input.
fn read_truth(path: &Path, n_classes: usize) -> CliResult<EvalLabels> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("truth file {}: {e}", path.display())))?;
    let labels = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                CliError::user(format!(
                    "{}: line {}: not a label: {l:?}",
                    path.display(),
                    i + 1
                ))
            })
        })
        .collect::<CliResult<Vec<usize>>>()?;
    Ok(EvalLabels::new(labels, n_classes)?)
}

fn truth_text(labels: &[usize]) -> String {
    labels.iter().fold(String::new(), |mut s, y| {
        let _ = writeln!(s, "{y}");
        s
    })
}

fn load_frozen(path: &Path) -> CliResult<ModelParams> {
    let model = ModelParams::load(path)?;
    if !model.is_frozen() {
        return Err(CliError::user(format!(
            "{}: model is not frozen; adaptation starts from a frozen source model",
            path.display()
        )));
    }
    Ok(model)
}

fn cmd_generate(dir: &Path, seed: u64) -> CliResult {
    let task = StandardTask::generate(seed)?;
    create_dir(dir)?;
    task.source.save(&dir.join("source.jsonl"))?;
    task.target.unlabeled().save(&dir.join("target.jsonl"))?;
    let truth = task.target.labels().expect("generated target is labeled");
    write(&dir.join("target_truth.txt"), &truth_text(truth))?;
    println!(
        "{}: {} source and {} target samples written to {}",
        StandardTask::NAME,
        task.source.len(),
        task.target.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_pretrain(source: &Path, out: &Path, cfg: &PretrainConfig) -> CliResult {
    let data = Dataset::load(source)?;
    if data.labels().is_none() {
        return Err(CliError::user(format!(
            "{}: source dataset is unlabeled",
            source.display()
        )));
    }
    let model = pretrain_source(&data, cfg)?;
    let eval = data.eval_labels().expect("checked above");
    let acc = eval.accuracy(&model.predict(data.view())?)?;
    model.save(out)?;
    println!("source train accuracy: {acc:.4}");
    Ok(())
}

fn load_target(path: &Path, truth: Option<&Path>) -> CliResult<(Dataset, Option<EvalLabels>)> {
    let data = Dataset::load(path)?;
    if data.domain() != Domain::Target {
        log::warn!("{}: records are marked as source domain", path.display());
    }
    let eval = match truth {
        Some(t) => Some(read_truth(t, data.class_count())?),
        None => data.eval_labels(),
    };
    if let Some(e) = &eval {
        if e.len() != data.len() {
            return Err(CliError::user(format!(
                "{} labels for {} target samples",
                e.len(),
                data.len()
            )));
        }
    }
    // labels never reach the adaptation itself
    Ok((data.unlabeled(), eval))
}

fn features_csv(model: &ModelParams, data: &Dataset) -> CliResult<String> {
    let feats = model.features(data.view())?;
    let predictions = model.predict(data.view())?;
    let mut out = String::from("index,prediction");
    for j in 0..feats.ncols() {
        let _ = write!(out, ",f_{j}");
    }
    out.push('\n');
    for (i, row) in feats.rows().into_iter().enumerate() {
        let _ = write!(out, "{i},{}", predictions[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn cmd_adapt(
    model: &Path,
    target: &Path,
    out_model: &Path,
    metrics: &Path,
    truth: Option<&Path>,
    settings: &AdaptArgs,
) -> CliResult {
    let cfg = settings.resolve()?;
    let source = load_frozen(model)?;
    let (data, eval) = load_target(target, truth)?;
    let run = adapt(&source, &data, eval.as_ref(), &cfg)?;
    run.model.save(out_model)?;
    let summary = emit_metrics(&run.metrics, metrics)?;
    run.entropy_matrix.write_csv(&metrics.join("entropy.csv"))?;
    write(
        &metrics.join("features.csv"),
        &features_csv(&run.model, &data)?,
    )?;
    match summary.final_accuracy {
        Some(a) => println!("final accuracy: {a:.4}"),
        None => println!("final accuracy: n/a (no evaluation labels)"),
    }
    println!("final labeling rate: {:.4}", summary.final_labeling_rate);
    Ok(())
}

fn cmd_evaluate(model: &Path, target: &Path, truth: Option<&Path>) -> CliResult {
    let model = ModelParams::load(model)?;
    let (data, eval) = load_target(target, truth)?;
    let eval = eval.ok_or_else(|| {
        CliError::user("no evaluation labels: pass --truth or use a labeled dataset")
    })?;
    println!(
        "accuracy: {:.4}",
        eval.accuracy(&model.predict(data.view())?)?
    );
    Ok(())
}

fn cmd_ablate(
    model: &Path,
    target: &Path,
    truth: &Path,
    metrics: &Path,
    seeds: u64,
    settings: &AdaptArgs,
) -> CliResult {
    let cfg = settings.resolve()?;
    if seeds == 0 {
        return Err(CliError::user("--seeds must be positive"));
    }
    let source = load_frozen(model)?;
    let (data, eval) = load_target(target, Some(truth))?;
    let eval = eval.expect("truth supplied");
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let table = ablation_grid(&source, &data, &eval, &cfg, &seed_list)?;
    create_dir(metrics)?;
    write(&metrics.join("ablation.csv"), &table.to_csv())?;
    let text = table.to_text();
    write(&metrics.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep(
    model: &Path,
    target: &Path,
    truth: &Path,
    metrics: &Path,
    step: f64,
    settings: &AdaptArgs,
) -> CliResult {
    let cfg = settings.resolve()?;
    pipeline::simplex_grid(step)?;
    let source = load_frozen(model)?;
    let (data, eval) = load_target(target, Some(truth))?;
    let eval = eval.expect("truth supplied");
    let results = sweep_lambda(&source, &data, &eval, &cfg, step)?;
    let mut csv = String::from("lambda_con,lambda_ce,lambda_clu,accuracy\n");
    for (w, acc) in &results {
        let _ = writeln!(csv, "{},{},{},{acc}", w.con, w.ce, w.clu);
    }
    create_dir(metrics)?;
    write(&metrics.join("sweep.csv"), &csv)?;
    println!(
        "{} grid points written to {}",
        results.len(),
        metrics.join("sweep.csv").display()
    );
    Ok(())
}
