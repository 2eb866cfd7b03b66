use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use geowgan::config::RunConfig;
use geowgan::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, SNAPSHOT_FILE};
use geowgan::evaluation::{self, awi_examples, evaluate_checkpoint, evaluate_features, oracle_features, write_report};
use geowgan::synthdata::Split;
use geowgan::tasks::compute_weights;
use geowgan::training::train;
use geowgan::Error;

mod plot;

#[derive(Parser)]
#[command(name = "geowgan", version, about = "Semi-supervised multitask WGAN-GP on synthetic multispectral tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tile dataset.
    GenData(GenData),
    /// Train the multitask WGAN-GP.
    Train(Train),
    /// Ridge-regress AWI on discriminator features with nested CV.
    Evaluate(Evaluate),
    /// Render histograms, loss curves and prediction scatter plots.
    Plot(Plot),
}

#[derive(Args)]
struct Overrides {
    /// TOML config file; flags and --set override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long, value_parser = ["3", "9"])]
    bands: Option<String>,
    #[arg(long, value_parser = ["uniform", "around-labels"])]
    sampling: Option<String>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-class weight table as weights.csv.
    #[arg(long)]
    dump_weights: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["none", "same-init", "random-init"])]
    init: Option<String>,
    /// Tensor file holding a pretrained `filters` bank [Cout, 3, k, k].
    #[arg(long)]
    filters: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Evaluate {
    /// Checkpoint to extract features from (omit with --oracle).
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Outer folds.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use the latent development value as the only feature.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Plot {
    /// metrics.csv from a training run; draws loss curves.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// predictions.csv from evaluate; draws the prediction scatter.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Dataset directory; draws the class histogram of --task.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "awi")]
    task: String,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

const USAGE: u8 = 2;
const DATA: u8 = 3;
const TRAINING: u8 = 4;
const EVALUATION: u8 = 5;

fn fail(code: u8) -> impl Fn(Error) -> Failure {
    move |e| Failure {
        code,
        message: e.to_string(),
    }
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    let help = keys_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("gen-data", |c| c.after_help(help.clone()))
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("evaluate", |c| c.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => run_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn base_config(file: Option<&Path>, fallback: Option<&str>) -> Result<RunConfig, Failure> {
    let text = match file {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure {
            code: USAGE,
            message: format!("{}: {e}", p.display()),
        })?,
        None => match fallback {
            Some(t) => t.to_string(),
            None => return Ok(RunConfig::default()),
        },
    };
    RunConfig::from_toml(&text).map_err(fail(USAGE))
}

fn apply(cfg: &mut RunConfig, sets: &[String], flags: &[(&str, Option<String>)]) -> Result<(), Failure> {
    for s in sets {
        cfg.set(s).map_err(fail(USAGE))?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(&format!("{k}={v}")).map_err(fail(USAGE))?;
        }
    }
    Ok(())
}

fn quoted(s: &Option<String>) -> Option<String> {
    s.as_ref().map(|v| format!("{v:?}"))
}

fn string<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let mut cfg = base_config(a.overrides.config.as_deref(), None)?;
    apply(
        &mut cfg,
        &a.overrides.set,
        &[
            ("grid_size", string(&a.grid_size)),
            ("tiles", string(&a.tiles)),
            ("tile_size", string(&a.tile_size)),
            ("bands", a.bands.clone()),
            ("sampling", quoted(&a.sampling)),
            ("labeled_fraction", string(&a.labeled_fraction)),
            ("seed", string(&a.seed)),
        ],
    )?;
    let data = generate_dataset(&cfg).map_err(fail(DATA))?;
    write_dataset(&data, &a.out).map_err(fail(DATA))?;
    if a.dump_weights {
        dump_weights(&data, &a.out.join("weights.csv")).map_err(fail(DATA))?;
    }
    eprintln!(
        "wrote {} tiles to {} (config {})",
        data.examples.len(),
        a.out.display(),
        &cfg.snapshot_hash()[..12]
    );
    Ok(())
}

fn dump_weights(data: &Dataset, path: &Path) -> geowgan::Result<()> {
    let mut counts: HashMap<String, Vec<u64>> = HashMap::new();
    for (t, task) in data.tasks.iter().enumerate() {
        let mut c = vec![0u64; task.classes()];
        for e in data.examples.iter().filter(|e| e.split == Split::Train) {
            if let Some(k) = e.labels[t] {
                c[k] += 1;
            }
        }
        counts.insert(task.name.clone(), c);
    }
    let table = compute_weights::<f64>(&data.tasks, &counts)?;
    table.write_csv(fs::File::create(path)?)
}

fn load_data(dir: &Path, code: u8) -> Result<Dataset, Failure> {
    read_dataset(dir, None).map_err(|e| Failure {
        code,
        message: format!("{}: {e}", dir.display()),
    })
}

fn run_train(a: Train) -> Result<(), Failure> {
    let data = load_data(&a.data, DATA)?;
    let mut cfg = base_config(a.overrides.config.as_deref(), Some(&data.config_snapshot))?;
    let filters = a.filters.as_ref().map(|p| p.display().to_string());
    apply(
        &mut cfg,
        &a.overrides.set,
        &[
            ("epochs", string(&a.epochs)),
            ("init", quoted(&a.init)),
            ("filters", quoted(&filters)),
            ("seed", string(&a.seed)),
        ],
    )?;
    match train::<f32>(&cfg, &data, &a.out, a.resume.as_deref()) {
        Ok(summary) => {
            eprintln!("final checkpoint {}", summary.final_checkpoint.display());
            Ok(())
        }
        Err(Error::NonFiniteLoss { epoch, step, checkpoint }) => Err(Failure {
            code: TRAINING,
            message: format!(
                "non-finite loss at epoch {epoch}, step {step}; diagnostic checkpoint {}",
                checkpoint.display()
            ),
        }),
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => Err(fail(USAGE)(e)),
        Err(e) => Err(fail(TRAINING)(e)),
    }
}

fn evaluate(a: Evaluate) -> Result<(), Failure> {
    let data = load_data(&a.data, EVALUATION)?;
    let mut cfg = base_config(a.overrides.config.as_deref(), Some(&data.config_snapshot))?;
    apply(&mut cfg, &a.overrides.set, &[("outer_folds", string(&a.folds))])?;
    let (ids, report) = if a.oracle {
        let ids = awi_examples(&data).map_err(fail(EVALUATION))?;
        let x = oracle_features(&data, &ids).map_err(fail(EVALUATION))?;
        let report = evaluate_features(&data, &ids, x, &cfg).map_err(fail(EVALUATION))?;
        (ids, report)
    } else {
        let ckpt = a.checkpoint.expect("required unless --oracle");
        if !ckpt.exists() {
            return Err(Failure {
                code: EVALUATION,
                message: format!("checkpoint {} not found", ckpt.display()),
            });
        }
        evaluate_checkpoint(&ckpt, &data, &cfg).map_err(fail(EVALUATION))?
    };
    write_report(&report, &ids, &a.out).map_err(fail(EVALUATION))?;
    fs::write(a.out.join(SNAPSHOT_FILE), cfg.to_toml()).map_err(|e| fail(EVALUATION)(e.into()))?;
    eprintln!(
        "pearson_r {:.4} baseline_r {} ({} examples) -> {}",
        report.pearson_r,
        report.baseline_r.map_or("n/a".into(), |b| format!("{b:.4}")),
        ids.len(),
        a.out.join(evaluation::SUMMARY_FILE).display()
    );
    Ok(())
}

fn run_plot(a: Plot) -> Result<(), Failure> {
    if a.metrics.is_none() && a.predictions.is_none() && a.dataset.is_none() {
        return Err(Failure {
            code: USAGE,
            message: "nothing to plot: pass --metrics, --predictions or --dataset".into(),
        });
    }
    let usage = |e: anyhow::Error| Failure {
        code: USAGE,
        message: format!("{e:#}"),
    };
    fs::create_dir_all(&a.out).map_err(|e| usage(e.into()))?;
    if let Some(m) = &a.metrics {
        plot::loss_curves(m, &a.out.join("loss_curves.png")).map_err(usage)?;
    }
    if let Some(p) = &a.predictions {
        plot::scatter(p, &a.out.join("predictions.png")).map_err(usage)?;
    }
    if let Some(d) = &a.dataset {
        let data = load_data(d, USAGE)?;
        plot::histogram(&data, &a.task, &a.out.join(format!("histogram_{}.png", a.task))).map_err(usage)?;
    }
    Ok(())
}
