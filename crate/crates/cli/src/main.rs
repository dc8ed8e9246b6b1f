//! `psog`: pipeline stages and experiment sweeps from one config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use psog_core::dataset::{build_dataset_with, split_random, subset_training, Dataset, Splits};
use psog_core::experiment::{run_experiments, ExperimentConfig, Study, Workbench};
use psog_core::ingest::{export_session, write_manifest, ImageDirectory};
use psog_core::metrics::AccuracyReport;
use psog_core::nn::checkpoint::Checkpoint;
use psog_core::nn::forward_batch;
use psog_core::seed::{self, tag};
use psog_core::shift::ShiftDistribution;
use psog_core::trainer::{fine_tune, pretrain_loso, train_fs, PretrainPool, Regimen};

#[derive(Parser)]
#[command(name = "psog", version, about = "Photosensor gaze-estimation simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    DataScale,
    ShiftBins,
    ExtendedRange,
    EpochCurves,
    ShiftRobustness,
    All,
}

impl ExperimentArg {
    fn studies(self) -> Vec<Study> {
        match self {
            ExperimentArg::DataScale => vec![Study::DataScale],
            ExperimentArg::ShiftBins => vec![Study::ShiftBins],
            ExperimentArg::ExtendedRange => vec![Study::ExtendedRange],
            ExperimentArg::EpochCurves => vec![Study::EpochCurves],
            ExperimentArg::ShiftRobustness => vec![Study::ShiftRobustness],
            ExperimentArg::All => Study::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimenArg {
    Fs,
    Ft,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic cohort to PGM images plus a label manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Write the manifest only.
        #[arg(long)]
        no_images: bool,
    },
    /// Apply sensor shifts and the photosensor array; one dataset CSV per subject.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Image manifest from `generate` (or real recordings); synthetic cohort otherwise.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Gaussian shift std in mm; the data-scale shift setting otherwise.
        #[arg(long)]
        sigma_mm: Option<f64>,
    },
    /// Train one subject's model (FS, or FT from the `--pool` datasets).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fs")]
        regimen: RegimenArg,
        /// Other subjects' datasets for FT pre-training.
        #[arg(long, num_args = 1..)]
        pool: Vec<PathBuf>,
        /// Share of the training partition to use.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Score a checkpoint on a dataset (optionally one split part).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split file written by `train`.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        part: String,
        /// CSV report path; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run experiment studies and write CSV tables and SVG plots.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory; the config's `output_dir` otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        experiment: ExperimentArg,
    },
    /// Print the digest of a finished sweep.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { common, out, no_images } => generate(&common.load()?, &out, !no_images),
        Command::Simulate {
            common,
            out,
            images,
            sigma_mm,
        } => simulate(&common.load()?, &out, images.as_deref(), sigma_mm),
        Command::Train {
            common,
            data,
            out,
            regimen,
            pool,
            fraction,
        } => train(&common.load()?, &data, &out, regimen, &pool, fraction),
        Command::Evaluate {
            checkpoint,
            data,
            splits,
            part,
            out,
        } => evaluate(&checkpoint, &data, splits.as_deref(), &part, out.as_deref()),
        Command::Sweep { common, out, experiment } => {
            let cfg = common.load()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            cfg.save(&dir.join("config.toml"))?;
            let (_, outputs) = run_experiments(cfg, &experiment.studies(), &dir)?;
            print!("{}", outputs.report());
            log::info!("{} files written to {}", outputs.files.len(), dir.display());
            Ok(())
        }
        Command::Report { out } => {
            let path = out.join("report.txt");
            print!("{}", std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?);
            Ok(())
        }
        Command::Config { common } => {
            print!("{}", common.load()?.to_toml()?);
            Ok(())
        }
    }
}

fn generate(cfg: &ExperimentConfig, out: &Path, images: bool) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let wb = Workbench::new(cfg.clone())?;
    let mut rows = Vec::new();
    for s in wb.sessions() {
        rows.extend(export_session(s, out, images)?);
        log::info!("subject {} exported", s.subject_id());
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    println!("{} frames written to {}", rows.len(), out.display());
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, out: &Path, images: Option<&Path>, sigma_mm: Option<f64>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let dist = match sigma_mm {
        Some(sigma_mm) => ShiftDistribution::Gaussian { sigma_mm },
        None => cfg.data_scale.shift,
    };
    dist.validate()?;
    let layout = cfg.array.layout()?;
    let kernel = cfg.array.kernel()?;
    let pairing = cfg.cohort.pairing;
    let shift_seed = |id: u32| seed::derive(cfg.master_seed, &[tag::SHIFTS, id as u64]);
    let write = |d: Dataset| -> Result<()> {
        let id = *d.subject_ids().first().context("empty dataset")?;
        let path = out.join(format!("subject_{id:03}.csv"));
        d.save(&path)?;
        log::info!("{} records -> {}", d.len(), path.display());
        Ok(())
    };
    match images {
        Some(manifest) => {
            let scale = cfg.cohort.image.scale_px_per_mm;
            for src in ImageDirectory::open(manifest, scale)?.by_subject() {
                let id = src.rows()[0].subject_id;
                let d = build_dataset_with(&[src], &dist, &layout, &kernel, pairing, shift_seed(id))?;
                write(d)?;
            }
        }
        None => {
            let wb = Workbench::new(cfg.clone())?;
            for s in wb.sessions() {
                let d = build_dataset_with(
                    std::slice::from_ref(s),
                    &dist,
                    &layout,
                    &kernel,
                    pairing,
                    shift_seed(s.subject_id()),
                )?;
                write(d)?;
            }
        }
    }
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    regimen: RegimenArg,
    pool: &[PathBuf],
    fraction: f64,
) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let ids = dataset.subject_ids();
    let [subject] = ids.as_slice() else {
        bail!("{} must hold exactly one subject, found {:?}", data.display(), ids);
    };
    let subject = *subject;
    let split_seed = seed::derive(cfg.master_seed, &[tag::SPLIT, subject as u64]);
    let full = split_random(&dataset, &cfg.data_scale_split(split_seed))?;
    let splits = subset_training(&full, fraction, seed::derive(cfg.master_seed, &[tag::SUBSET, subject as u64]))?;
    let tc = psog_core::trainer::TrainConfig {
        seed: seed::derive(cfg.master_seed, &[tag::TRAIN, subject as u64]),
        ..cfg.train
    };
    let mut hashes = vec![dataset.content_hash()];
    let model = match regimen {
        RegimenArg::Fs => train_fs(&dataset, &splits, &tc)?,
        RegimenArg::Ft => {
            if pool.is_empty() {
                bail!("FT needs --pool datasets from other subjects");
            }
            let others = pool.iter().map(|p| Dataset::load(p)).collect::<psog_core::Result<Vec<_>>>()?;
            hashes.extend(others.iter().map(Dataset::content_hash));
            let pool = PretrainPool::new(subject, &others)?;
            let pcfg = cfg.pretrain.train_config(&cfg.train, seed::derive(cfg.master_seed, &[tag::PRETRAIN, subject as u64]));
            let start = pretrain_loso(&pool, &pcfg)?;
            let mut m = fine_tune(&start, &dataset, &splits, &tc)?;
            m.provenance.pretrain_subjects = pool.subject_ids().into_iter().collect();
            m
        }
    };
    let mut model = model;
    model.provenance.data_fraction = fraction;
    let stem = format!("subject_{subject:03}_{}", match regimen {
        RegimenArg::Fs => Regimen::FromScratch,
        RegimenArg::Ft => Regimen::FineTune,
    });
    model.save(out, &stem, &tc, &hashes)?;
    splits.save(&out.join(format!("{stem}.splits.csv")))?;
    println!(
        "{stem}: best epoch {}, validation accuracy {:.3} deg",
        model.history.best_epoch,
        model.history.best_val_accuracy()
    );
    Ok(())
}

fn evaluate(checkpoint: &Path, data: &Path, splits: Option<&Path>, part: &str, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let indices: Vec<usize> = match splits {
        Some(p) => {
            let s = Splits::load(p)?;
            let parts = s.parts();
            let (_, idx) = parts
                .iter()
                .find(|(name, _)| name == part)
                .with_context(|| format!("no part {part:?} in {}", p.display()))?;
            idx.to_vec()
        }
        None => (0..dataset.len()).collect(),
    };
    let frames: Vec<_> = indices.iter().map(|&i| dataset.records()[i]).collect();
    let inputs: Vec<_> = frames.iter().map(|f| ckpt.norm.apply(&f.values)).collect();
    let preds = forward_batch(&ckpt.params, &inputs)?;
    let report = AccuracyReport::compute(&preds, &frames)?;
    match out {
        Some(p) => std::fs::write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}
