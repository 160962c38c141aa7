use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xcaps::capsule::RoutingMode;
use xcaps::data::{generate_synthetic, load_dataset, LoadOptions, SyntheticConfig, DEFAULT_FOLDS};
use xcaps::gradsuite::run_gradient_suite;
use xcaps::model::{MalignancyMode, XCapsConfig, XCapsModel};
use xcaps::trainer::{ablation_suite, cross_validate, emit_sweep_images, evaluate, log_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "xcaps", version, about = "Explainable capsule network for nodule attribute scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        raters: usize,
        #[arg(long, default_value_t = 0.7)]
        noise: f64,
    },
    /// Cross-validated training; writes checkpoints, logs and reports per fold.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Routing::Sigmoid)]
        routing: Routing,
        #[arg(long)]
        no_reconstruction: bool,
        #[arg(long, value_enum, default_value_t = Malignancy::Distribution)]
        malignancy: Malignancy,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        include_mean3: bool,
    },
    /// Base model against the three single-change ablations on shared folds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Reconstruction sweeps over every attribute capsule dimension.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        /// Dataset holding the sample.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Number of folds in the partition.
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Train only the first N folds of the partition.
    #[arg(long)]
    run_folds: Option<usize>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Keep samples whose mean malignancy rating is exactly 3.
    #[arg(long)]
    include_mean3: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Routing {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Malignancy {
    Distribution,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 256 filters, 32 primary capsule types, decoder 512-1024.
    Full,
    /// 16 filters, 8 primary capsule types, decoder 128-256.
    Desk,
}

impl RunArgs {
    fn base_config(&self) -> XCapsConfig {
        match self.preset {
            Preset::Full => XCapsConfig::full(),
            Preset::Desk => XCapsConfig::desk(),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            lr: self.lr,
            max_epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn load(&self) -> Result<Vec<xcaps::data::SampleRecord>> {
        load(&self.data, self.include_mean3)
    }
}

fn load(dir: &Path, include_mean3: bool) -> Result<Vec<xcaps::data::SampleRecord>> {
    let records = load_dataset(
        dir,
        LoadOptions {
            exclude_mean3: !include_mean3,
        },
    )
    .with_context(|| format!("loading {}", dir.display()))?;
    if records.is_empty() {
        bail!("{} holds no usable samples", dir.display());
    }
    Ok(records)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn progress(prefix: &str, fold: usize, e: &xcaps::trainer::EpochLog) {
    eprintln!(
        "{prefix}fold {fold} epoch {:>3} lr {:.0e} train {:.4} (m {:.4} a {:.4} r {:.4}) val {:.4}",
        e.epoch, e.lr, e.train.total, e.train.l_m, e.train.l_a, e.train.l_r, e.val_total
    );
}

fn train(run: &RunArgs, cfg: TrainConfig) -> Result<()> {
    let records = run.load()?;
    create_dir(&run.out)?;
    eprintln!("{} samples, {} folds", records.len(), run.folds);
    let cv = cross_validate(&records, &run.base_config(), &cfg, run.folds, run.run_folds, &mut |f, e| {
        progress("", f, e)
    })?;
    write_json(&run.out.join("folds.json"), &cv.folds)?;
    for (result, model) in cv.results.iter().zip(&cv.models) {
        let dir = run.out.join(format!("fold{}", result.fold));
        create_dir(&dir)?;
        model.save(&dir.join("model.ckpt"))?;
        fs::write(dir.join("train_log.csv"), log_csv(&result.log))?;
        write_json(&dir.join("report.json"), &result.report)?;
        eprintln!(
            "fold {}: malignancy {:.4}, attributes {:?}",
            result.fold, result.report.malignancy_accuracy, result.report.attribute_accuracy
        );
    }
    write_json(&run.out.join("summary.json"), &cv.aggregate)?;
    println!("{}", serde_json::to_string_pretty(&cv.aggregate)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            seed,
            count,
            out,
            raters,
            noise,
        } => {
            let cfg = SyntheticConfig {
                seed,
                count,
                rater_count: raters,
                rater_noise: noise,
            };
            generate_synthetic(&cfg, &out)?;
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            run,
            routing,
            no_reconstruction,
            malignancy,
        } => {
            let cfg = TrainConfig {
                routing_mode: match routing {
                    Routing::Sigmoid => RoutingMode::Sigmoid,
                    Routing::Softmax => RoutingMode::Softmax,
                },
                use_reconstruction: !no_reconstruction,
                malignancy_mode: match malignancy {
                    Malignancy::Distribution => MalignancyMode::Distribution,
                    Malignancy::Mean => MalignancyMode::Mean,
                },
                ..run.train_config()
            };
            train(&run, cfg)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            report,
            include_mean3,
        } => {
            let model = XCapsModel::load(&checkpoint)?;
            let records = load(&data, include_mean3)?;
            let refs: Vec<_> = records.iter().collect();
            let cfg = TrainConfig {
                malignancy_mode: model.config().malignancy_mode,
                routing_mode: model.config().routing.mode,
                ..TrainConfig::default()
            };
            let result = evaluate(&model, &refs, &cfg)?;
            write_json(&report, &result)?;
            println!(
                "malignancy {:.4}, attributes {:?}, mean confidence {:?}",
                result.malignancy_accuracy, result.attribute_accuracy, result.mean_confidence
            );
        }
        Command::Ablate { run } => {
            let records = run.load()?;
            create_dir(&run.out)?;
            let table = ablation_suite(
                &records,
                &run.base_config(),
                &run.train_config(),
                run.folds,
                run.run_folds,
                &mut |a, f, e| progress(&format!("{} ", a.label()), f, e),
            )?;
            write_json(&run.out.join("ablation.json"), &table)?;
            let text = table.to_text();
            fs::write(run.out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Sweep {
            checkpoint,
            sample,
            data,
            out,
        } => {
            let model = XCapsModel::load(&checkpoint)?;
            let records = load(&data, true)?;
            let Some(record) = records.iter().find(|r| r.id == sample) else {
                bail!("sample {sample} not found in {}", data.display());
            };
            for path in emit_sweep_images(&model, record, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Gradcheck { seed } => {
            let cases = run_gradient_suite(seed)?;
            let mut ok = true;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{status:<4} {:<24} max rel err {:.3e} (tol {:.0e})", c.name, c.max_rel_err, c.tolerance);
                ok &= c.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
