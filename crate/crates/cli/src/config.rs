use std::path::{Path, PathBuf};

use masseg_core::benchmark::{
    default_four_domain_suite, load_dataset, DomainPair, SUITE_IMAGE_SIZE, SUITE_NUM_CLASSES,
};
use masseg_core::regularization::StrategyConfig;
use masseg_core::trainer::TrainSchedule;
use masseg_core::SegNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Full description of one experiment: the benchmark, the strategy, the
/// training schedule, the architecture and where results go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to `<output root>/<strategy>` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub num_seeds: usize,
    pub benchmark: BenchmarkConfig,
    pub strategy: StrategyConfig,
    pub schedule: TrainSchedule,
    pub network: SegNetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            num_seeds: 5,
            benchmark: BenchmarkConfig::default(),
            strategy: StrategyConfig::default(),
            schedule: TrainSchedule::default(),
            network: SegNetConfig::default(),
        }
    }
}

/// Either the generated four-domain suite or explicit dataset files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Replicate `k` uses the suite generated from `suite_seed + k`.
    pub suite_seed: u64,
    /// When non-empty, these datasets replace the generated suite for every
    /// replicate. Relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<DomainFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl ExperimentConfig {
    /// Parses a TOML config. Dataset paths are made relative to the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut cfg.benchmark.domains {
            d.train = base.join(&d.train);
            d.eval = base.join(&d.eval);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::invalid(format!("config: {}", e.message())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.num_seeds == 0 {
            return Err(CliError::invalid("invalid num_seeds: must be >= 1"));
        }
        self.strategy.validate().map_err(CliError::from_core)?;
        self.schedule.validate().map_err(CliError::from_core)?;
        self.network.validate().map_err(CliError::from_core)?;
        let domains = &self.benchmark.domains;
        if domains.is_empty() {
            if self.network.num_classes != SUITE_NUM_CLASSES {
                return Err(CliError::invalid(format!(
                    "invalid network.num_classes: the generated suite has {SUITE_NUM_CLASSES} classes"
                )));
            }
            if self.network.in_channels != 1 {
                return Err(CliError::invalid(
                    "invalid network.in_channels: the generated suite has 1 channel",
                ));
            }
            let div = self.network.spatial_divisor();
            if !SUITE_IMAGE_SIZE.0.is_multiple_of(div) || !SUITE_IMAGE_SIZE.1.is_multiple_of(div) {
                return Err(CliError::invalid(format!(
                    "invalid network.encoder_channels: {} stages do not divide {}x{} images",
                    self.network.encoder_channels.len(),
                    SUITE_IMAGE_SIZE.0,
                    SUITE_IMAGE_SIZE.1
                )));
            }
        } else if domains.len() < 2 {
            return Err(CliError::invalid(
                "invalid benchmark.domains: need at least 2 domains",
            ));
        }
        Ok(())
    }

    pub fn uses_suite(&self) -> bool {
        self.benchmark.domains.is_empty()
    }

    /// Training seed of replicate `k`.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        self.schedule.seed.wrapping_add(k as u64)
    }

    /// Suite seed of replicate `k`, `None` for file-based benchmarks.
    pub fn replicate_suite_seed(&self, k: usize) -> Option<u64> {
        self.uses_suite()
            .then(|| self.benchmark.suite_seed.wrapping_add(k as u64))
    }

    /// Loads the explicit dataset files, checking them against the network.
    pub fn load_files(&self) -> Result<Vec<DomainPair>, CliError> {
        let mut out = Vec::with_capacity(self.benchmark.domains.len());
        for (i, d) in self.benchmark.domains.iter().enumerate() {
            let field = format!("benchmark.domains[{i}]");
            let train = load_dataset(&d.train).map_err(|e| {
                CliError::invalid(format!("{field}.train {}: {e}", d.train.display()))
            })?;
            let eval = load_dataset(&d.eval).map_err(|e| {
                CliError::invalid(format!("{field}.eval {}: {e}", d.eval.display()))
            })?;
            for ds in [&train, &eval] {
                if ds.num_classes != self.network.num_classes {
                    return Err(CliError::invalid(format!(
                        "invalid network.num_classes: {field} has {} classes",
                        ds.num_classes
                    )));
                }
                let div = self.network.spatial_divisor();
                if ds.height % div != 0 || ds.width % div != 0 {
                    return Err(CliError::invalid(format!(
                        "invalid network.encoder_channels: {field} images are {}x{}",
                        ds.height, ds.width
                    )));
                }
            }
            out.push(DomainPair { train, eval });
        }
        Ok(out)
    }

    /// Benchmark for replicate `k`; `files` is the result of
    /// [`ExperimentConfig::load_files`] for file-based benchmarks.
    pub fn replicate_benchmark(
        &self,
        k: usize,
        files: Option<&[DomainPair]>,
    ) -> Result<Vec<DomainPair>, CliError> {
        match (self.replicate_suite_seed(k), files) {
            (Some(seed), _) => default_four_domain_suite(seed).map_err(CliError::from_core),
            (None, Some(files)) => Ok(files.to_vec()),
            (None, None) => self.load_files(),
        }
    }
}
