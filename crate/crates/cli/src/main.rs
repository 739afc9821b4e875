use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lsr_core::experiment::{self, ExperimentConfig, LossConfig, Split};
use lsr_core::grid::{self, Grid};
use lsr_core::lesions::{self, Connectivity};
use lsr_core::metrics::{self, DetectionConfig};
use lsr_core::model::{self, LabelledImage, TrainedModel};
use lsr_core::phantom::{self, PhantomSpec};
use lsr_core::weighting::{self, WeightParams, WeightScheme};
use lsr_core::{gradcheck, svg, Error, Result};

#[derive(Parser)]
#[command(name = "lsr", version, about = "Lesion size reweighting toolkit")]
struct Cli {
    /// Seed for subcommands that draw random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this. Ignored in sequential builds.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Uniform,
    Lsr,
    Inverse,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Bce,
    Wbce,
    Focal,
    Lsr,
    Iw,
}

#[derive(clap::Args)]
struct LossFlags {
    #[arg(long, value_enum)]
    loss: LossArg,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 4.0)]
    beta: f64,
    #[arg(long, default_value_t = lsr_core::loss::DEFAULT_FOCAL_GAMMA)]
    gamma: f64,
    /// WBCE positive weight; defaults to the background/foreground ratio.
    #[arg(long)]
    pos_weight: Option<f64>,
}

impl LossFlags {
    fn config(&self) -> LossConfig {
        match self.loss {
            LossArg::Bce => LossConfig::Bce,
            LossArg::Wbce => LossConfig::Wbce { pos_weight: self.pos_weight },
            LossArg::Focal => LossConfig::Focal { gamma: self.gamma },
            LossArg::Lsr => LossConfig::Lsr { alpha: self.alpha, beta: self.beta },
            LossArg::Iw => LossConfig::Iw,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Phantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        n: usize,
    },
    /// Compute a voxel weight map for a mask.
    Weightmap {
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 4.0)]
        alpha: f64,
        #[arg(long, default_value_t = 4.0)]
        beta: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table_out: Option<PathBuf>,
        #[arg(long, default_value_t = 26)]
        connectivity: u32,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        loss: LossFlags,
        /// Number of random instances, starting at the seed.
        #[arg(long, default_value_t = 1)]
        instances: u64,
    },
    /// Train the per-voxel segmenter.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "40:10:10")]
        split: String,
        #[command(flatten)]
        loss: LossFlags,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Threshold sweep of a trained model on the last cases of a dataset.
    Curves {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        split_test: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the full loss comparison.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn require_out_dir(cli: &Cli) -> Result<&Path> {
    cli.out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("--out-dir is required for this subcommand".into()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom { config, n } => {
            let spec = match config {
                Some(p) => PhantomSpec::load(p)?,
                None => PhantomSpec::default(),
            };
            let seed = cli.seed.unwrap_or(spec.seed);
            let cases = phantom::generate_dataset(&spec, *n, seed)?;
            phantom::write_dataset(require_out_dir(cli)?, &spec, seed, &cases)?;
        }
        Command::Weightmap { scheme, alpha, beta, input, out, table_out, connectivity } => {
            let scheme = match scheme {
                SchemeArg::Uniform => WeightScheme::Uniform,
                SchemeArg::Lsr => WeightScheme::Lsr(WeightParams::new(*alpha, *beta)?),
                SchemeArg::Inverse => WeightScheme::Inverse,
            };
            let mask = grid::read_mask(input)?;
            let labels = lesions::label_components(&mask, Connectivity::from_count(*connectivity)?);
            let table = lesions::lesion_table(&labels);
            let map = weighting::weight_map(&labels, &table, scheme)?;
            if map.uniform_fallback {
                eprintln!("note: mask has no lesions, weight map is uniform");
            }
            grid::write_volume(out, &Grid::F32(map.into_volume()))?;
            if let Some(t) = table_out {
                lesions::save_table_csv(&table, t)?;
            }
        }
        Command::Gradcheck { loss, instances } => {
            let config = loss.config();
            let seed = cli.seed.unwrap_or(0);
            let mut worst: Option<gradcheck::GradCheckReport> = None;
            for s in seed..seed + (*instances).max(1) {
                let r = gradcheck::check(&config, s)?;
                if worst.as_ref().is_none_or(|w| r.max_relative_error > w.max_relative_error) {
                    worst = Some(r);
                }
            }
            let worst = worst.expect("at least one instance");
            let out = json!({
                "loss": worst.loss,
                "instances": (*instances).max(1),
                "parameters": worst.parameters,
                "step": gradcheck::STEP,
                "max_relative_error": worst.max_relative_error,
                "worst_seed": worst.seed,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Train { data_dir, split, loss, lr, epochs, out, log } => {
            let split = Split::parse(split)?;
            let (_, samples) = phantom::read_dataset(data_dir)?;
            let data: Vec<LabelledImage<'_>> = samples
                .iter()
                .map(|s| LabelledImage { image: &s.image, truth: &s.truth })
                .collect();
            let (train, val, _) = split.apply(&data)?;
            let masks: Vec<_> = train.iter().map(|s| s.truth).collect();
            let (kind, scheme) = loss.config().resolve(&masks)?;
            let base = ExperimentConfig { epochs: *epochs, ..ExperimentConfig::default() };
            let config = base.train_config(kind, scheme.unwrap_or(WeightScheme::Uniform), *lr, cli.seed.unwrap_or(0));
            let trained = model::train(train, val, &config)?;
            trained.save(out)?;
            if let Some(p) = log {
                model::write_log_csv(&trained.log, create(p)?)?;
            }
        }
        Command::Curves { model, data_dir, split_test, out, report, svg: svg_path } => {
            let trained = TrainedModel::load(model)?;
            let (_, samples) = phantom::read_dataset(data_dir)?;
            if *split_test == 0 || *split_test > samples.len() {
                return Err(Error::Config(format!(
                    "--split-test {split_test} must lie in 1..={}",
                    samples.len()
                )));
            }
            let test = &samples[samples.len() - split_test..];
            let probs = test.iter().map(|s| trained.predict(&s.image)).collect::<Result<Vec<_>>>()?;
            let truths: Vec<_> = test.iter().map(|s| s.truth.clone()).collect();
            let detection = DetectionConfig::default();
            let taus = metrics::default_tau_grid();
            let rows = metrics::sweep_curves(&probs, &truths, &taus, &detection)?;
            let op = metrics::operating_report(&rows)?;
            metrics::write_curves_csv(&rows, create(out)?)?;
            write_json(
                report,
                &json!({
                    "operating_report": op,
                    "config": {
                        "model": model,
                        "data_dir": data_dir,
                        "split_test": split_test,
                        "test_cases": (samples.len() - split_test..samples.len()).collect::<Vec<_>>(),
                        "detection": detection,
                        "taus": taus,
                        "best_epoch": trained.best_epoch,
                    },
                    "tool_version": experiment::TOOL_VERSION,
                }),
            )?;
            if let Some(p) = svg_path {
                svg::emit_svg(&rows, &op, p)?;
            }
        }
        Command::Experiment { config } => {
            let config = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let (comparison, _) = experiment::run_experiment(&config, Some(require_out_dir(cli)?))?;
            for s in &comparison.losses {
                println!(
                    "{} {:6} lr={} gap={:.3} simF1={:.4} smallF1={:.4} failed={}/{}",
                    s.rank,
                    s.loss,
                    s.learning_rate.map(|lr| format!("{lr:e}")).unwrap_or_else(|| "-".into()),
                    s.median_gap,
                    s.median_simultaneous_f1,
                    s.median_small_f1_at_star,
                    s.failed_runs,
                    s.runs
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
