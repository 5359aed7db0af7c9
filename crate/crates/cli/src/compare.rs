use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use masseg_core::metrics::ClMetrics;

use crate::error::CliError;
use crate::run::{Manifest, MeanStd, MetricSummary};

/// Column labels of the comparison, aligned with [`ClMetrics::NAMES`].
pub const COLUMN_LABELS: [&str; 5] = ["CL_DSC", "REM", "BWT+", "TL", "FWT"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub strategy: String,
    pub manifest: PathBuf,
    pub seeds: usize,
    pub metrics: MetricSummary,
}

/// Strategies × metrics, mean ± std over seeds. Every metric is
/// higher-is-better; `best[r][c]` marks rows attaining the column maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub best: Vec<[bool; 5]>,
}

/// Loads run manifests and tabulates their metrics. The per-seed metrics
/// files listed in each manifest are read back and aggregated.
pub fn cmd_compare(manifests: &[PathBuf]) -> Result<Comparison, CliError> {
    if manifests.len() < 2 {
        return Err(CliError::invalid(format!(
            "need ≥ 2 runs, got {}",
            manifests.len()
        )));
    }
    let mut loaded = Vec::with_capacity(manifests.len());
    for path in manifests {
        loaded.push((path.clone(), Manifest::load(path)?));
    }
    let (first_path, first) = &loaded[0];
    for (path, m) in &loaded[1..] {
        if m.benchmark != first.benchmark {
            return Err(CliError::invalid(format!(
                "benchmark mismatch: {} ({}) vs {} ({})",
                first_path.display(),
                serde_json::to_string(&first.benchmark).unwrap_or_default(),
                path.display(),
                serde_json::to_string(&m.benchmark).unwrap_or_default()
            )));
        }
    }
    let rows = loaded
        .iter()
        .map(|(path, m)| row_for(path, m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison::new(rows))
}

fn row_for(path: &Path, m: &Manifest) -> Result<ComparisonRow, CliError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut metrics = Vec::with_capacity(m.runs.len());
    for run in &m.runs {
        let file = base.join(&run.metrics);
        let text = fs::read_to_string(&file)
            .map_err(|e| CliError::invalid(format!("{}: {e}", file.display())))?;
        let parsed: ClMetrics = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: {e}", file.display())))?;
        metrics.push(parsed);
    }
    if metrics.is_empty() {
        return Err(CliError::invalid(format!(
            "manifest {}: no runs",
            path.display()
        )));
    }
    Ok(ComparisonRow {
        strategy: m.strategy.name().to_string(),
        manifest: path.to_path_buf(),
        seeds: metrics.len(),
        metrics: MetricSummary::over(&metrics),
    })
}

impl Comparison {
    pub fn new(rows: Vec<ComparisonRow>) -> Self {
        let mut best = vec![[false; 5]; rows.len()];
        for c in 0..5 {
            let top = rows
                .iter()
                .map(|r| r.metrics.columns()[c].mean)
                .fold(f64::NEG_INFINITY, f64::max);
            for (flags, row) in best.iter_mut().zip(&rows) {
                flags[c] = row.metrics.columns()[c].mean == top;
            }
        }
        Self { rows, best }
    }

    /// One line per strategy with full-precision means and deviations, and
    /// a `best` column listing the metrics where the row is best.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seeds");
        for name in ClMetrics::NAMES {
            let _ = write!(s, ",{name}_mean,{name}_std");
        }
        s.push_str(",best\n");
        for (row, best) in self.rows.iter().zip(&self.best) {
            let _ = write!(s, "{},{}", row.strategy, row.seeds);
            for MeanStd { mean, std } in row.metrics.columns() {
                let _ = write!(s, ",{mean:?},{std:?}");
            }
            let flagged: Vec<&str> = ClMetrics::NAMES
                .iter()
                .zip(best)
                .filter(|(_, &b)| b)
                .map(|(n, _)| *n)
                .collect();
            let _ = writeln!(s, ",{}", flagged.join(";"));
        }
        s
    }

    /// Aligned table; `*` marks the best value per column.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .zip(&self.best)
            .map(|(row, best)| {
                let mut line = vec![row.strategy.clone(), row.seeds.to_string()];
                line.extend(row.metrics.columns().iter().zip(best).map(|(c, &b)| {
                    format!("{:.4} ± {:.4}{}", c.mean, c.std, if b { "*" } else { " " })
                }));
                line
            })
            .collect();
        let mut header = vec!["strategy".to_string(), "seeds".to_string()];
        header.extend(COLUMN_LABELS.iter().map(|s| s.to_string()));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                cells
                    .iter()
                    .chain(std::iter::once(&header))
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        for line in std::iter::once(&header).chain(&cells) {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(s, "{}", padded.join("  ").trim_end());
        }
        s.push_str("mean ± population std over seeds; * best per column\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, rem: f64) -> ComparisonRow {
        let m = ClMetrics {
            tl: 0.5,
            rem,
            bwt_plus: 0.0,
            cl_dsc: 0.6,
            fwt: 0.1,
        };
        ComparisonRow {
            strategy: name.into(),
            manifest: PathBuf::from(format!("{name}/manifest.json")),
            seeds: 1,
            metrics: MetricSummary::over(&[m]),
        }
    }

    #[test]
    fn best_flags_column_maximum_and_ties() {
        let c = Comparison::new(vec![row("fine_tune", 0.8), row("joint", 0.95)]);
        assert_eq!(c.best[0], [true, false, true, true, true]);
        assert_eq!(c.best[1], [true, true, true, true, true]);
        let csv = c.to_csv();
        assert!(csv.starts_with("strategy,seeds,CL_DSC_mean,CL_DSC_std,REM_mean"));
        assert!(csv.contains("fine_tune,1,0.6,0.0,0.8,0.0"), "{csv}");
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .ends_with(",CL_DSC;REM;BWT_plus;TL;FWT"));
    }

    #[test]
    fn text_table_is_aligned() {
        let c = Comparison::new(vec![row("fine_tune", 0.8), row("mas_lr_dropout", 0.9)]);
        let text = c.to_text();
        let lines: Vec<&str> = text.lines().collect();
        let marks = |l: &str| -> Vec<usize> {
            l.chars()
                .enumerate()
                .filter(|(_, ch)| *ch == '±')
                .map(|(i, _)| i)
                .collect()
        };
        assert_eq!(marks(lines[1]), marks(lines[2]));
        assert_eq!(marks(lines[1]).len(), 5);
        assert!(lines[2].contains("0.9000 ± 0.0000*"));
    }

    #[test]
    fn a_single_manifest_is_rejected() {
        let err = cmd_compare(&[PathBuf::from("a.json")]).unwrap_err();
        assert!(err.message.contains("need ≥ 2 runs"));
        assert_eq!(err.exit_code(), 2);
    }
}
