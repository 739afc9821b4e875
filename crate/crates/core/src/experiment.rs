//! Loss-comparison benchmark: every loss x learning rate x seed, resumable,
//! with a deterministic aggregate table.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::loss::{LossKind, DEFAULT_FOCAL_GAMMA};
use crate::metrics::{self, DetectionConfig, OperatingReport};
use crate::model::{self, class_frequency_pos_weight, AdamConfig, LabelledImage, TrainConfig};
use crate::par;
use crate::phantom::{self, PhantomSpec};
use crate::weighting::{WeightParams, WeightScheme};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One entry of the loss roster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "lowercase")]
pub enum LossConfig {
    Bce,
    /// `pos_weight` defaults to the background/foreground ratio of the
    /// training masks.
    Wbce {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pos_weight: Option<f64>,
    },
    Focal {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    Lsr {
        alpha: f64,
        beta: f64,
    },
    Iw,
}

fn default_gamma() -> f64 {
    DEFAULT_FOCAL_GAMMA
}

impl LossConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LossConfig::Bce => "bce",
            LossConfig::Wbce { .. } => "wbce",
            LossConfig::Focal { .. } => "focal",
            LossConfig::Lsr { .. } => "lsr",
            LossConfig::Iw => "iw",
        }
    }

    /// The five losses in their default settings.
    pub fn default_roster() -> Vec<LossConfig> {
        vec![
            LossConfig::Bce,
            LossConfig::Wbce { pos_weight: None },
            LossConfig::Focal { gamma: DEFAULT_FOCAL_GAMMA },
            LossConfig::Lsr { alpha: 4.0, beta: 4.0 },
            LossConfig::Iw,
        ]
    }

    /// Loss kind plus the weight scheme it needs, if any. `train_masks`
    /// supplies the class frequencies for an unset WBCE `pos_weight`.
    pub fn resolve(&self, train_masks: &[&Mask]) -> Result<(LossKind, Option<WeightScheme>)> {
        Ok(match *self {
            LossConfig::Bce => (LossKind::Bce, None),
            LossConfig::Wbce { pos_weight } => {
                let pw = match pos_weight {
                    Some(p) => p,
                    None => class_frequency_pos_weight(train_masks)?,
                };
                if !(pw > 0.0 && pw.is_finite()) {
                    return Err(Error::Config(format!("pos_weight must be positive, got {pw}")));
                }
                (LossKind::Wbce { pos_weight: pw }, None)
            }
            LossConfig::Focal { gamma } => {
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
                }
                (LossKind::Focal { gamma }, None)
            }
            LossConfig::Lsr { alpha, beta } => (
                LossKind::WeightedBce,
                Some(WeightScheme::Lsr(WeightParams::new(alpha, beta)?)),
            ),
            LossConfig::Iw => (LossKind::WeightedBce, Some(WeightScheme::Inverse)),
        })
    }

    fn tag(&self) -> String {
        match *self {
            LossConfig::Lsr { alpha, beta } => format!("lsr_a{alpha}_b{beta}"),
            LossConfig::Focal { gamma } if gamma != DEFAULT_FOCAL_GAMMA => format!("focal_g{gamma}"),
            LossConfig::Wbce { pos_weight: Some(p) } => format!("wbce_pw{p}"),
            other => other.name().to_string(),
        }
    }
}

/// `(train, validation, test)` volume counts, taken in dataset order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Split {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Parses `"40:10:10"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split must look like 40:10:10, got {s:?}")))?;
        match parts[..] {
            [train, val, test] if train > 0 && test > 0 => Ok(Split { train, val, test }),
            _ => Err(Error::Config(format!("split must have three counts with train and test > 0, got {s:?}"))),
        }
    }

    pub fn apply<'a, T>(&self, items: &'a [T]) -> Result<(&'a [T], &'a [T], &'a [T])> {
        if items.len() < self.total() {
            return Err(Error::Config(format!(
                "split needs {} volumes but the dataset has {}",
                self.total(),
                items.len()
            )));
        }
        let (train, rest) = items.split_at(self.train);
        let (val, rest) = rest.split_at(self.val);
        Ok((train, val, &rest[..self.test]))
    }
}

impl Default for Split {
    fn default() -> Self {
        Split { train: 40, val: 10, test: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub dataset_seed: u64,
    pub split: Split,
    pub losses: Vec<LossConfig>,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub minibatch: usize,
    pub hidden: usize,
    pub detection: DetectionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomSpec::default(),
            dataset_seed: 17,
            split: Split::default(),
            losses: LossConfig::default_roster(),
            learning_rates: vec![3e-4, 1e-3, 3e-3],
            seeds: (0..5).collect(),
            epochs: 30,
            minibatch: 2,
            hidden: 16,
            detection: DetectionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.detection.validate()?;
        if self.losses.is_empty() || self.learning_rates.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("losses, learning_rates and seeds must be non-empty".into()));
        }
        let mut names = BTreeSet::new();
        for l in &self.losses {
            if !names.insert(l.name()) {
                return Err(Error::Config(format!("loss {:?} listed more than once", l.name())));
            }
            if let LossConfig::Lsr { alpha, beta } = *l {
                WeightParams::new(alpha, beta)?;
            }
        }
        if self.learning_rates.iter().any(|&lr| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.split.train == 0 || self.split.test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        self.train_config(LossKind::Bce, WeightScheme::Uniform, 0.0, 0).validate()
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self, loss: LossKind, scheme: WeightScheme, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { learning_rate: lr, ..AdamConfig::default() },
            epochs: self.epochs,
            minibatch: self.minibatch,
            hidden: self.hidden,
            seed,
            loss,
            scheme,
            detection: self.detection,
            taus: metrics::default_tau_grid(),
        }
    }

    fn runs(&self) -> Vec<RunKey> {
        let mut runs = Vec::new();
        for loss in &self.losses {
            for &lr in &self.learning_rates {
                for &seed in &self.seeds {
                    runs.push(RunKey { loss: *loss, lr, seed });
                }
            }
        }
        runs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RunKey {
    loss: LossConfig,
    lr: f64,
    seed: u64,
}

impl RunKey {
    fn dir_name(&self) -> String {
        format!("{}_lr{:e}_seed{}", self.loss.tag(), self.lr, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunOutcome {
    Ok {
        best_epoch: usize,
        val: OperatingReport,
        test: OperatingReport,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub tool_version: String,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub rank: usize,
    pub loss: String,
    pub settings: LossConfig,
    /// Learning rate with the best median validation simultaneous F1.
    pub learning_rate: Option<f64>,
    pub runs: usize,
    pub failed_runs: usize,
    pub failure_rate: f64,
    pub median_gap: f64,
    pub median_simultaneous_f1: f64,
    pub median_small_f1_at_star: f64,
    pub median_tau_seg: f64,
    pub median_tau_det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub tool_version: String,
    pub losses: Vec<LossSummary>,
}

impl Comparison {
    pub fn get(&self, loss: &str) -> Option<&LossSummary> {
        self.losses.iter().find(|s| s.loss == loss)
    }
}

/// Median with the mean of the two middle values for even counts; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_one(
    config: &ExperimentConfig,
    key: &RunKey,
    data: &[LabelledImage<'_>],
    hash: &str,
    dir: Option<&Path>,
) -> Result<RunReport> {
    let (train, val, test) = config.split.apply(data)?;
    let masks: Vec<&Mask> = train.iter().map(|s| s.truth).collect();
    let (kind, scheme) = key.loss.resolve(&masks)?;
    let tc = config.train_config(kind, scheme.unwrap_or(WeightScheme::Uniform), key.lr, key.seed);
    let outcome = match model::train(train, val, &tc) {
        Ok(trained) => {
            let probs = test.iter().map(|s| trained.predict(s.image)).collect::<Result<Vec<_>>>()?;
            let truths: Vec<Mask> = test.iter().map(|s| s.truth.clone()).collect();
            let rows = metrics::sweep_curves(&probs, &truths, &tc.taus, &tc.detection)?;
            let test_report = metrics::operating_report(&rows)?;
            if let Some(dir) = dir {
                trained.save(dir.join("model.json"))?;
                let path = dir.join("curves.csv");
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                metrics::write_curves_csv(&rows, std::io::BufWriter::new(file))?;
            }
            RunOutcome::Ok {
                best_epoch: trained.best_epoch,
                val: trained.val_report.unwrap_or(test_report),
                test: test_report,
            }
        }
        Err(e @ Error::NumericalAbort { .. }) => RunOutcome::Failed { reason: e.to_string() },
        Err(e) => return Err(e),
    };
    Ok(RunReport {
        loss: key.loss,
        learning_rate: key.lr,
        seed: key.seed,
        config_hash: hash.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        outcome,
    })
}

fn load_existing(path: &Path, hash: &str) -> Option<RunReport> {
    let text = std::fs::read_to_string(path).ok()?;
    let report: RunReport = serde_json::from_str(&text).ok()?;
    (report.config_hash == hash).then_some(report)
}

/// Runs every loss x learning rate x seed combination. With `out_dir`, each
/// run writes `runs/<name>/report.json` and completed runs are reused on a
/// later call, so an interrupted benchmark resumes where it stopped.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(Comparison, Vec<RunReport>)> {
    config.validate()?;
    let hash = config.hash();
    let keys = config.runs();
    let run_dirs: Vec<Option<PathBuf>> = keys
        .iter()
        .map(|k| out_dir.map(|d| d.join("runs").join(k.dir_name())))
        .collect();
    let existing: Vec<Option<RunReport>> = run_dirs
        .iter()
        .map(|d| d.as_ref().and_then(|d| load_existing(&d.join("report.json"), &hash)))
        .collect();

    let pending: Vec<usize> = (0..keys.len()).filter(|&i| existing[i].is_none()).collect();
    let mut reports = existing;
    if !pending.is_empty() {
        let cases = phantom::generate_dataset(&config.phantom, config.split.total(), config.dataset_seed)?;
        let data: Vec<LabelledImage<'_>> = cases
            .iter()
            .map(|c| LabelledImage { image: &c.image, truth: &c.truth })
            .collect();
        let fresh = par::map_slice(&pending, |&i| -> Result<RunReport> {
            let dir = run_dirs[i].as_deref();
            if let Some(d) = dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let report = run_one(config, &keys[i], &data, &hash, dir)?;
            if let Some(d) = dir {
                let path = d.join("report.json");
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(report)
        });
        for (i, r) in pending.into_iter().zip(fresh) {
            reports[i] = Some(r?);
        }
    }
    let reports: Vec<RunReport> = reports.into_iter().map(|r| r.expect("every run resolved")).collect();
    let comparison = aggregate(config, &hash, &reports);
    if let Some(dir) = out_dir {
        write_comparison(dir, &comparison)?;
    }
    Ok((comparison, reports))
}

/// Per loss: pick the learning rate with the best median validation
/// simultaneous F1 (earliest listed on ties), then take test medians over
/// the seeds that completed at that rate.
pub fn aggregate(config: &ExperimentConfig, hash: &str, reports: &[RunReport]) -> Comparison {
    let mut summaries = Vec::new();
    for loss in &config.losses {
        let mine: Vec<&RunReport> = reports.iter().filter(|r| r.loss == *loss).collect();
        let failed = mine.iter().filter(|r| matches!(r.outcome, RunOutcome::Failed { .. })).count();
        let mut best: Option<(f64, f64)> = None;
        for &lr in &config.learning_rates {
            let vals: Vec<f64> = mine
                .iter()
                .filter(|r| r.learning_rate == lr)
                .filter_map(|r| match &r.outcome {
                    RunOutcome::Ok { val, .. } => Some(val.simultaneous_f1),
                    RunOutcome::Failed { .. } => None,
                })
                .collect();
            let m = median(&vals);
            if !m.is_nan() && best.is_none_or(|(b, _)| m > b) {
                best = Some((m, lr));
            }
        }
        let tests: Vec<&OperatingReport> = match best {
            Some((_, lr)) => mine
                .iter()
                .filter(|r| r.learning_rate == lr)
                .filter_map(|r| match &r.outcome {
                    RunOutcome::Ok { test, .. } => Some(test),
                    RunOutcome::Failed { .. } => None,
                })
                .collect(),
            None => Vec::new(),
        };
        let med = |f: fn(&OperatingReport) -> f64| median(&tests.iter().map(|t| f(t)).collect::<Vec<_>>());
        summaries.push(LossSummary {
            rank: 0,
            loss: loss.name().to_string(),
            settings: *loss,
            learning_rate: best.map(|(_, lr)| lr),
            runs: mine.len(),
            failed_runs: failed,
            failure_rate: if mine.is_empty() { 0.0 } else { failed as f64 / mine.len() as f64 },
            median_gap: med(|t| t.gap),
            median_simultaneous_f1: med(|t| t.simultaneous_f1),
            median_small_f1_at_star: med(|t| t.det_small_f1_at_star),
            median_tau_seg: med(|t| t.tau_seg),
            median_tau_det: med(|t| t.tau_det),
        });
    }
    // Best simultaneous F1 first; losses without a completed run go last.
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |s: &LossSummary| if s.median_simultaneous_f1.is_nan() { f64::NEG_INFINITY } else { s.median_simultaneous_f1 };
        key(&summaries[b]).total_cmp(&key(&summaries[a])).then(a.cmp(&b))
    });
    let mut losses: Vec<LossSummary> = order.into_iter().map(|i| summaries[i].clone()).collect();
    for (i, s) in losses.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Comparison {
        config_hash: hash.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        losses,
    }
}

pub const COMPARISON_HEADER: [&str; 12] = [
    "rank",
    "loss",
    "learning_rate",
    "runs",
    "failed_runs",
    "failure_rate",
    "median_gap",
    "median_simultaneous_f1",
    "median_small_f1_at_star",
    "median_tau_seg",
    "median_tau_det",
    "config_hash",
];

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

pub fn write_comparison_csv<W: std::io::Write>(comparison: &Comparison, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_HEADER)?;
    for s in &comparison.losses {
        w.write_record([
            s.rank.to_string(),
            s.loss.clone(),
            s.learning_rate.map(|lr| format!("{lr:e}")).unwrap_or_default(),
            s.runs.to_string(),
            s.failed_runs.to_string(),
            fmt_metric(s.failure_rate),
            fmt_metric(s.median_gap),
            fmt_metric(s.median_simultaneous_f1),
            fmt_metric(s.median_small_f1_at_star),
            fmt_metric(s.median_tau_seg),
            fmt_metric(s.median_tau_det),
            comparison.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes `comparison.json` and `comparison.csv` into `dir`.
pub fn write_comparison(dir: &Path, comparison: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("comparison.json");
    // serde_json writes NaN as null, which is what we want for empty medians.
    let text = serde_json::to_string_pretty(comparison)? + "\n";
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut buf = Vec::new();
    write_comparison_csv(comparison, &mut buf)?;
    let csv_path = dir.join("comparison.csv");
    std::fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))
}
