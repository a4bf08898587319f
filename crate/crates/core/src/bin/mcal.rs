//! `mcal`: command-line front end for statistics, calibration, training and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use margin_calib::bounds::BoundConfig;
use margin_calib::calibration::{class_stats, compute_offsets, CalibConfig, ClassStats};
use margin_calib::experiment::{
    report_header, run_bound, run_compare, run_gap, write_bound, write_compare, write_gap, BoundSpec, DataSource,
    ExperimentSpec,
};
use margin_calib::raster::{load_scores, DatasetManifest, LabelMask, ScoreMap};
use margin_calib::synth::{generate, save_dataset, SynthSpec};
use margin_calib::trainer::{confusion, train, Dataset, LossConfig, LossKind, Model, TrainConfig};
use margin_calib::{Error, Result};

#[derive(Parser)]
#[command(name = "mcal", version, about = "Margin calibration for mIoU: statistics, losses, training and bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-class pixel counts of a manifest's masks.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Write the statistics as JSON here instead of printing CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Margin offsets from label statistics.
    Calibrate {
        #[command(flatten)]
        stats: StatsSource,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (features, masks, manifest).
    Synth {
        #[arg(long = "synth-spec")]
        synth_spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a feature manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (loss, seed) cell and report test metrics.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-entropy vs margin-calibrated train/validation curves without warm-up.
    Gap {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offsets, error bound and optimality audit.
    Bound {
        #[command(flatten)]
        stats: StatsSource,
        #[command(flatten)]
        calib: CalibArgs,
        /// Complexity proxy.
        #[arg(long = "F", default_value_t = 1.0)]
        f: f64,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        /// Add the confidence term to F.
        #[arg(long)]
        include_sigma: bool,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Treat the manifest's first column as score maps and add empirical lower bounds.
        #[arg(long, requires = "manifest")]
        with_scores: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StatsSource {
    #[arg(long, conflicts_with = "stats")]
    manifest: Option<PathBuf>,
    /// JSON written by `mcal stats --out`.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Number of classes expected in the data.
    #[arg(long)]
    classes: Option<usize>,
}

impl StatsSource {
    fn load(&self) -> Result<ClassStats> {
        let stats = match (&self.manifest, &self.stats) {
            (Some(m), _) => class_stats(&DatasetManifest::load(m)?)?,
            (None, Some(p)) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                let s: ClassStats = serde_json::from_str(&text)
                    .map_err(|e| Error::Parse { path: p.clone(), reason: e.to_string() })?;
                ClassStats::from_counts(s.pixel_counts, s.pixels_per_image)?
            }
            (None, None) => return Err(Error::InvalidParameter("pass --manifest or --stats".into())),
        };
        check_classes(self.classes, stats.classes())?;
        Ok(stats)
    }
}

fn check_classes(expected: Option<usize>, found: usize) -> Result<()> {
    match expected {
        Some(c) if c != found => Err(Error::InvalidParameter(format!("--classes {c} but data has {found} classes"))),
        _ => Ok(()),
    }
}

#[derive(Args)]
struct CalibArgs {
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    upsilon: f64,
}

impl CalibArgs {
    fn config(&self) -> Result<CalibConfig> {
        CalibConfig::new(self.tau, self.upsilon)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Training feature manifest.
    #[arg(long, conflicts_with_all = ["synth_spec", "experiment"])]
    manifest: Option<PathBuf>,
    #[arg(long = "val-manifest", requires = "manifest")]
    val_manifest: Option<PathBuf>,
    #[arg(long = "test-manifest", requires = "manifest")]
    test_manifest: Option<PathBuf>,
    /// Synthetic data spec (JSON); defaults to the built-in imbalanced setting.
    #[arg(long = "synth-spec", conflicts_with = "experiment")]
    synth_spec: Option<PathBuf>,
    /// Train / validation / test image counts for synthetic data.
    #[arg(long, value_delimiter = ',', default_value = "200,50,50")]
    split: Vec<usize>,
    /// Full experiment spec (JSON, as printed in report headers); overrides the other data and training flags.
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        if let Some(train) = &self.manifest {
            let val = self.val_manifest.clone().unwrap_or_else(|| train.clone());
            return Ok(DataSource::Manifests { train: train.clone(), val, test: self.test_manifest.clone() });
        }
        let spec = match &self.synth_spec {
            Some(p) => SynthSpec::load(p)?,
            None => SynthSpec::default(),
        };
        let [train, val, test] = self.split[..] else {
            return Err(Error::InvalidParameter("--split takes three counts".into()));
        };
        Ok(DataSource::Synth { spec, train, val, test })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Loss(es): ce, focal, dice, tversky, lovasz, mc, mc+dice, mc+tversky.
    #[arg(long, value_delimiter = ',', default_value = "ce,mc")]
    loss: Vec<String>,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.7)]
    beta: f64,
    /// Weight of the margin-calibrated term in combinations.
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Defaults to 20% of the epochs.
    #[arg(long = "warmup-epochs")]
    warmup_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch_images: usize,
    /// linear or mlp1.
    #[arg(long, default_value = "linear")]
    model: String,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

impl TrainArgs {
    fn losses(&self) -> Result<Vec<LossConfig>> {
        self.loss
            .iter()
            .map(|name| {
                let mut cfg = LossConfig::new(name.parse::<LossKind>()?);
                cfg.calibration = self.calib.config()?;
                cfg.baseline.focal_gamma = self.gamma;
                cfg.baseline.tversky_alpha = self.alpha;
                cfg.baseline.tversky_beta = self.beta;
                cfg.combine_weight = self.weight;
                Ok(cfg)
            })
            .collect()
    }

    fn config(&self) -> Result<TrainConfig> {
        let model = serde_json::from_value(serde_json::Value::String(self.model.clone()))
            .map_err(|_| Error::InvalidParameter(format!("unknown model {:?}", self.model)))?;
        let mut cfg = TrainConfig {
            model,
            hidden: self.hidden,
            batch_images: self.batch_images,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            seed: self.seeds.first().copied().unwrap_or(0),
            ..TrainConfig::default()
        };
        cfg.optimizer.learning_rate = self.lr;
        cfg.optimizer.weight_decay = self.weight_decay;
        Ok(cfg)
    }
}

fn experiment(data: &DataArgs, args: &TrainArgs) -> Result<ExperimentSpec> {
    if let Some(path) = &data.experiment {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        return ExperimentSpec::from_json(&text);
    }
    let spec = ExperimentSpec {
        data: data.source()?,
        losses: args.losses()?,
        train: args.config()?,
        seeds: args.seeds.clone(),
    };
    spec.validate()?;
    Ok(spec)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { manifest, out } => {
            let stats = class_stats(&DatasetManifest::load(&manifest)?)?;
            match out {
                Some(p) => write_text(&p, &serde_json::to_string_pretty(&stats).expect("stats serialize")),
                None => {
                    println!("class,n_k,p_k");
                    for (k, (n, p)) in stats.pixel_counts.iter().zip(stats.frequencies()).enumerate() {
                        println!("{k},{n},{p:.12e}");
                    }
                    Ok(())
                }
            }
        }
        Command::Calibrate { stats, calib, out } => {
            let offsets = compute_offsets(&stats.load()?, &calib.config()?)?;
            emit(out.as_deref(), &offsets.to_text())
        }
        Command::Synth { synth_spec, out } => {
            let spec = match synth_spec {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default(),
            };
            let data = generate(&spec)?;
            let manifest = save_dataset(&data, Some(&spec), &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { data, train: args, out } => {
            let spec = experiment(&data, &args)?;
            let splits = spec.data.load()?;
            check_classes(data.classes, splits.train.classes())?;
            let cfg = TrainConfig { loss: spec.losses[0].clone(), seed: spec.seeds[0], ..spec.train.clone() };
            let (model, log) = train(&splits.train, &splits.val, &cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            model.save(out.join("model.mdl"))?;
            let header = report_header("train", &spec.to_json(), &spec.seeds[..1]);
            write_text(&out.join("train_log.csv"), &(header + &log.to_csv()))?;
            if let Some(last) = log.last() {
                println!("final epoch {}: val mIoU {:.4}", last.epoch, last.val_miou);
            }
            Ok(())
        }
        Command::Eval { model, manifest, out } => {
            let model = Model::load(&model)?;
            let data = Dataset::load(&manifest)?;
            let report = confusion(&model, &data)?.report()?;
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Compare { data, train: args, out } => {
            let spec = experiment(&data, &args)?;
            let report = run_compare(&spec)?;
            write_compare(&report, &spec, &out)?;
            print!("{}", report.summary_csv());
            Ok(())
        }
        Command::Gap { data, train: args, out } => {
            let spec = experiment(&data, &args)?;
            let report = run_gap(&spec)?;
            write_gap(&report, &spec, &out)?;
            let (wins, total) = report.wins("mc", "ce");
            println!("mc final gap <= ce final gap in {wins}/{total} seeds");
            Ok(())
        }
        Command::Bound { stats, calib, f, eta, include_sigma, trials, seed, with_scores, out } => {
            let class_stats = stats.load()?;
            let mut bound = BoundConfig::new(f, eta, class_stats.pixels_per_image)?;
            bound.include_sigma = include_sigma;
            let spec = BoundSpec { calibration: calib.config()?, bound, trials, seed };
            let scored = match (&stats.manifest, with_scores) {
                (Some(m), true) => Some(load_scored(m)?),
                _ => None,
            };
            let report = run_bound(&class_stats, &spec, scored.as_ref().map(|(s, g)| (s, g)))?;
            match out {
                Some(p) => write_bound(&report, &spec, p),
                None => {
                    print!("{}", report.to_csv());
                    Ok(())
                }
            }
        }
    }
}

/// Concatenates every score map and mask of a manifest into one batch.
fn load_scored(manifest: &Path) -> Result<(ScoreMap, LabelMask)> {
    let m = DatasetManifest::load(manifest)?;
    let masks = m.load_masks()?;
    let scores = m.entries.iter().map(|(s, _)| load_scores(s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ScoreMap> = scores.iter().collect();
    let mask_refs: Vec<&LabelMask> = masks.iter().collect();
    Ok((ScoreMap::concat(&refs)?, LabelMask::concat(&mask_refs)?))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericAbort { .. } => 4,
        Error::InvalidParameter(_) | Error::Calibration { .. } | Error::Infeasible(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
