use std::fs;
use std::path::{Path, PathBuf};

use masseg_core::benchmark::DomainPair;
use masseg_core::metrics::{cl_metrics, mean_std, ClMetrics, TrainTestMatrix};
use masseg_core::regularization::StrategyKind;
use masseg_core::trainer::{run_sequence, SequenceOptions, SequenceSpec, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Environment variable naming the root for default output directories.
pub const OUTPUT_ROOT_ENV: &str = "MASSEG_OUTPUT_ROOT";
/// Output root used when neither a flag, the config nor the environment
/// names one.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const MANIFEST_FORMAT: &str = "masseg-run/1";

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    /// Base training seed.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub strategy: Option<StrategyKind>,
    /// Root for the default `<root>/<strategy>` output directory.
    pub output_root: Option<PathBuf>,
    pub quiet: bool,
}

/// What identifies the data a run was evaluated on. Runs are only comparable
/// when their identities are equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkIdentity {
    /// `"suite"` or `"files"`.
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub suite_seed: Option<u64>,
    pub replicates: usize,
    pub domains: usize,
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub train_sizes: Vec<usize>,
    pub eval_sizes: Vec<usize>,
    /// Hex digest over every replicate's datasets.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub suite_seed: Option<u64>,
    /// Paths relative to the manifest's directory.
    pub r_csv: String,
    pub metrics: String,
    pub train_log: String,
    pub checkpoints: Vec<String>,
}

/// Index of everything a `run` produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub strategy: StrategyKind,
    pub benchmark: BenchmarkIdentity,
    pub aggregate: String,
    pub runs: Vec<RunEntry>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("manifest {}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::invalid(format!(
                "manifest {}: unsupported format {:?}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Mean and population standard deviation of each metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "CL_DSC")]
    pub cl_dsc: MeanStd,
    #[serde(rename = "REM")]
    pub rem: MeanStd,
    #[serde(rename = "BWT_plus")]
    pub bwt_plus: MeanStd,
    #[serde(rename = "TL")]
    pub tl: MeanStd,
    #[serde(rename = "FWT")]
    pub fwt: MeanStd,
}

impl MetricSummary {
    pub fn over(runs: &[ClMetrics]) -> Self {
        let of = |f: fn(&ClMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            cl_dsc: of(|m| m.cl_dsc),
            rem: of(|m| m.rem),
            bwt_plus: of(|m| m.bwt_plus),
            tl: of(|m| m.tl),
            fwt: of(|m| m.fwt),
        }
    }

    /// Columns in [`ClMetrics::NAMES`] order.
    pub fn columns(&self) -> [MeanStd; 5] {
        [self.cl_dsc, self.rem, self.bwt_plus, self.tl, self.fwt]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: StrategyKind,
    pub seeds: Vec<u64>,
    /// How `std` is computed.
    pub dispersion: String,
    pub metrics: MetricSummary,
}

/// Outcome of [`cmd_run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<ClMetrics>,
    pub aggregate: Aggregate,
}

/// Resolves the output directory: the flag, then the config, then
/// `<root>/<strategy>`.
pub fn output_dir(cfg: &ExperimentConfig, overrides: &RunOverrides) -> PathBuf {
    if let Some(dir) = &overrides.output_dir {
        return dir.clone();
    }
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let root = overrides
        .output_root
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    root.join(cfg.strategy.kind.name())
}

/// Applies the overrides to a loaded config.
pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &RunOverrides) {
    if let Some(seed) = overrides.seed {
        cfg.schedule.seed = seed;
    }
    if let Some(kind) = overrides.strategy {
        cfg.strategy.kind = kind;
    }
    cfg.output_dir = Some(output_dir(cfg, overrides));
}

/// Metrics JSON for a train-test matrix CSV, exactly as `run` writes it.
pub fn metrics_json(csv: &str) -> Result<String, CliError> {
    let r = TrainTestMatrix::from_csv(csv).map_err(CliError::from_core)?;
    let m = cl_metrics(&r).map_err(CliError::from_core)?;
    Ok(to_json(&m))
}

/// Reads a matrix CSV file and returns its metrics JSON.
pub fn cmd_metrics(path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    metrics_json(&text).map_err(|e| CliError {
        message: format!("{}: {}", path.display(), e.message),
        ..e
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn fold_fingerprint(acc: u64, value: u64) -> u64 {
    value
        .to_le_bytes()
        .into_iter()
        .fold(acc, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Loads, validates and runs every replicate of an experiment, writing
/// per-seed artifacts, `aggregate.json` and `manifest.json`.
pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> Result<RunSummary, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    apply_overrides(&mut cfg, overrides);
    run_config(&cfg, overrides.quiet)
}

/// Runs an already loaded config; `cfg.output_dir` must be set.
pub fn run_config(cfg: &ExperimentConfig, quiet: bool) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::invalid("invalid output_dir: not set"))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;

    let files = if cfg.uses_suite() {
        None
    } else {
        Some(cfg.load_files()?)
    };
    let mut fingerprint: u64 = 0xcbf29ce484222325;
    let mut identity: Option<BenchmarkIdentity> = None;
    let mut runs = Vec::with_capacity(cfg.num_seeds);
    let mut all_metrics = Vec::with_capacity(cfg.num_seeds);
    let mut seeds = Vec::with_capacity(cfg.num_seeds);

    for k in 0..cfg.num_seeds {
        let seed = cfg.replicate_seed(k);
        let suite_seed = cfg.replicate_suite_seed(k);
        let bench = cfg.replicate_benchmark(k, files.as_deref())?;
        for pair in &bench {
            fingerprint = fold_fingerprint(fingerprint, pair.train.fingerprint());
            fingerprint = fold_fingerprint(fingerprint, pair.eval.fingerprint());
        }
        if identity.is_none() {
            identity = Some(describe(cfg, &bench));
        }
        if !quiet {
            eprintln!(
                "[{}] replicate {}/{}: seed {seed}{}",
                cfg.strategy.kind,
                k + 1,
                cfg.num_seeds,
                suite_seed
                    .map(|s| format!(", suite seed {s}"))
                    .unwrap_or_default()
            );
        }
        let (entry, metrics) = run_replicate(cfg, &out, seed, suite_seed, &bench)?;
        if !quiet {
            eprintln!(
                "[{}] seed {seed}: CL_DSC {:.4} REM {:.4} BWT+ {:.4} TL {:.4} FWT {:.4}",
                cfg.strategy.kind,
                metrics.cl_dsc,
                metrics.rem,
                metrics.bwt_plus,
                metrics.tl,
                metrics.fwt
            );
        }
        runs.push(entry);
        all_metrics.push(metrics);
        seeds.push(seed);
    }

    let mut benchmark = identity.expect("num_seeds >= 1");
    benchmark.fingerprint = format!("{fingerprint:016x}");
    let aggregate = Aggregate {
        strategy: cfg.strategy.kind,
        seeds,
        dispersion: "population standard deviation over seeds".into(),
        metrics: MetricSummary::over(&all_metrics),
    };
    write(&out.join(AGGREGATE_FILE), &to_json(&aggregate))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        strategy: cfg.strategy.kind,
        benchmark,
        aggregate: AGGREGATE_FILE.into(),
        runs,
        config: cfg.clone(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write(&manifest_path, &to_json(&manifest))?;
    Ok(RunSummary {
        output_dir: out,
        manifest_path,
        manifest,
        metrics: all_metrics,
        aggregate,
    })
}

fn describe(cfg: &ExperimentConfig, bench: &[DomainPair]) -> BenchmarkIdentity {
    let first = &bench[0].train;
    BenchmarkIdentity {
        source: if cfg.uses_suite() { "suite" } else { "files" }.into(),
        suite_seed: cfg.uses_suite().then_some(cfg.benchmark.suite_seed),
        replicates: cfg.num_seeds,
        domains: bench.len(),
        image_size: [first.height, first.width],
        num_classes: first.num_classes,
        train_sizes: bench.iter().map(|p| p.train.len()).collect(),
        eval_sizes: bench.iter().map(|p| p.eval.len()).collect(),
        fingerprint: String::new(),
    }
}

fn run_replicate(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    suite_seed: Option<u64>,
    bench: &[DomainPair],
) -> Result<(RunEntry, ClMetrics), CliError> {
    let dir = out.join(format!("seed_{seed}"));
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;

    let train: Vec<_> = bench.iter().map(|p| p.train.clone()).collect();
    let eval: Vec<_> = bench.iter().map(|p| p.eval.clone()).collect();
    let mut schedule = cfg.schedule.clone();
    schedule.seed = seed;
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        network: cfg.network.clone(),
        strategy: cfg.strategy.clone(),
        schedule,
    };
    let options = SequenceOptions {
        checkpoint_dir: Some(ckpt_dir),
        resume_from: None,
    };
    let log_path = dir.join("train.log");
    let result = match run_sequence(&spec, options) {
        Ok(r) => r,
        Err(failure) => {
            write(&log_path, &log_text(&failure.partial.logs))?;
            let err = CliError::from_core(failure.error);
            return Err(CliError {
                message: format!(
                    "seed {seed}: {} (after {} finished domains)",
                    err.message,
                    failure.partial.rows.len()
                ),
                ..err
            });
        }
    };

    let matrix = result.matrix().map_err(CliError::from_core)?;
    let metrics = cl_metrics(&matrix).map_err(CliError::from_core)?;
    let r_path = dir.join("R.csv");
    let m_path = dir.join("metrics.json");
    write(&r_path, &matrix.to_csv())?;
    write(&m_path, &to_json(&metrics))?;
    write(&log_path, &log_text(&result.logs))?;

    let entry = RunEntry {
        seed,
        suite_seed,
        r_csv: rel(out, &r_path),
        metrics: rel(out, &m_path),
        train_log: rel(out, &log_path),
        checkpoints: result.checkpoints.iter().map(|p| rel(out, p)).collect(),
    };
    Ok((entry, metrics))
}

fn log_text(logs: &[TrainLog]) -> String {
    let mut text = String::from("domain epoch step loss base_lr\n");
    for log in logs {
        text.extend(log.to_lines().lines().skip(1).flat_map(|l| [l, "\n"]));
    }
    text
}
