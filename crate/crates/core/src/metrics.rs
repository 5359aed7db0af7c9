//! Dice overlap and continual-learning metrics over the train-test matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class Dice scores for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `None` when the class is absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in prediction or ground truth.
    pub mean: f64,
    gt_present: Vec<bool>,
}

impl DiceReport {
    /// Mean over foreground classes (index >= 1) present in the ground truth.
    /// `None` when the ground truth is all background.
    pub fn foreground_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_class
            .iter()
            .zip(&self.gt_present)
            .skip(1)
            .filter(|(_, &p)| p)
            .map(|(d, _)| d.expect("present in ground truth"))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn dice_score(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<DiceReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice_score",
            format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            ),
        ));
    }
    let mut p_count = vec![0usize; num_classes];
    let mut g_count = vec![0usize; num_classes];
    let mut both = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::shape(
                "dice_score",
                format!("label {} out of range for {num_classes} classes", p.max(g)),
            ));
        }
        p_count[p] += 1;
        g_count[g] += 1;
        if p == g {
            both[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = p_count[c] + g_count[c];
            (denom > 0).then(|| 2.0 * both[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(DiceReport {
        per_class,
        mean,
        gt_present: g_count.iter().map(|&c| c > 0).collect(),
    })
}

/// `R[i][j]`: mean Dice on domain `j` after training through domain `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTestMatrix {
    d: usize,
    values: Vec<f64>,
}

impl TrainTestMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        if d < 2 {
            return Err(Error::Metrics("D must be ≥ 2".into()));
        }
        let mut values = Vec::with_capacity(d * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Metrics(format!(
                    "row {} has {} entries, expected {d}",
                    i + 1,
                    row.len()
                )));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Metrics(format!(
                        "entry {v} in row {} outside [0, 1]",
                        i + 1
                    )));
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Self { d, values })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.d).map(<[f64]>::to_vec).collect()
    }

    /// Header row `domain_1,...,domain_D`, then one line per row. Values use
    /// the shortest representation that round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut s = (1..=self.d)
            .map(|j| format!("domain_{j}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for row in self.values.chunks(self.d) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    /// Parses [`TrainTestMatrix::to_csv`] output. Row numbers in errors are
    /// 1-based file lines.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Metrics("empty file".into()))?;
        let d = header.split(',').count();
        if d < 2 {
            return Err(Error::Metrics("D must be ≥ 2".into()));
        }
        let mut rows = Vec::with_capacity(d);
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d {
                return Err(Error::Metrics(format!(
                    "row {}: expected {d} values, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let row = fields
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Metrics(format!("row {}: bad number {f:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != d {
            return Err(Error::Metrics(format!(
                "expected {d} data rows, found {}",
                rows.len()
            )));
        }
        Self::new(rows)
    }
}

/// Continual-learning summary of a train-test matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    #[serde(rename = "TL")]
    pub tl: f64,
    #[serde(rename = "REM")]
    pub rem: f64,
    #[serde(rename = "BWT_plus")]
    pub bwt_plus: f64,
    #[serde(rename = "CL_DSC")]
    pub cl_dsc: f64,
    #[serde(rename = "FWT")]
    pub fwt: f64,
}

impl ClMetrics {
    pub const NAMES: [&'static str; 5] = ["CL_DSC", "REM", "BWT_plus", "TL", "FWT"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "TL" => Some(self.tl),
            "REM" => Some(self.rem),
            "BWT_plus" => Some(self.bwt_plus),
            "CL_DSC" => Some(self.cl_dsc),
            "FWT" => Some(self.fwt),
            _ => None,
        }
    }
}

/// TL, REM, BWT+, CL DSC and FWT.
///
/// REM and BWT+ split each sub-diagonal change `R[i][j] - R[j][j]` into its
/// negative and positive part, averaged over the `D(D-1)/2` pairs.
pub fn cl_metrics(r: &TrainTestMatrix) -> Result<ClMetrics> {
    let d = r.d();
    if d < 2 {
        return Err(Error::Metrics("D must be ≥ 2".into()));
    }
    let pairs = (d * (d - 1)) as f64 / 2.0;
    let diag: Vec<f64> = (0..d).map(|i| r.get(i, i)).collect();

    let deltas: Vec<f64> = (1..d)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| r.get(i, j) - diag[j])
        .collect();
    let rem = deltas.iter().map(|dl| 1.0 - dl.min(0.0).abs()).sum::<f64>() / pairs;
    let bwt_plus = deltas.iter().map(|dl| dl.max(0.0)).sum::<f64>() / pairs;

    let lower: f64 = (0..d)
        .flat_map(|i| (0..=i).map(move |j| (i, j)))
        .map(|(i, j)| r.get(i, j))
        .sum();
    let upper: f64 = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| r.get(i, j))
        .sum();

    Ok(ClMetrics {
        tl: diag.iter().sum::<f64>() / d as f64,
        rem,
        bwt_plus,
        cl_dsc: lower / ((d * (d + 1)) as f64 / 2.0),
        fwt: upper / pairs,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let gt = [0, 1, 1, 2];
        assert_eq!(dice_score(&gt, &gt, 3).unwrap().mean, 1.0);

        let a = [1, 1, 0, 0];
        let b = [0, 0, 1, 1];
        let r = dice_score(&a, &b, 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));

        // |P| = 4, |G| = 4, overlap 2.
        let p = [1, 1, 1, 1, 0, 0, 0, 0];
        let g = [1, 1, 0, 0, 1, 1, 0, 0];
        assert_eq!(dice_score(&p, &g, 2).unwrap().per_class[1], Some(0.5));
    }

    #[test]
    fn dice_absent_classes() {
        let p = [0, 0, 2, 2];
        let g = [0, 0, 0, 0];
        let r = dice_score(&p, &g, 4).unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.per_class[2], Some(0.0));
        assert_eq!(r.foreground_mean(), None);
        assert!(dice_score(&p, &g[..3], 4).is_err());
        assert!(dice_score(&[5], &[0], 4).is_err());
    }

    #[test]
    fn foreground_mean_skips_background_and_missing() {
        let g = [0, 1, 1, 3];
        let p = [0, 1, 0, 3];
        let r = dice_score(&p, &g, 4).unwrap();
        // class 1: 2*1/(1+2) = 2/3, class 3: 1
        let want = (2.0 / 3.0 + 1.0) / 2.0;
        assert!((r.foreground_mean().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn hand_matrices() {
        let r = TrainTestMatrix::new(vec![vec![0.9, 0.5], vec![0.9, 0.8]]).unwrap();
        let m = cl_metrics(&r).unwrap();
        assert_eq!(m.rem, 1.0);
        assert_eq!(m.bwt_plus, 0.0);
        assert!((m.tl - 0.85).abs() < 1e-15);
        assert!((m.cl_dsc - 2.6 / 3.0).abs() < 1e-15);
        assert_eq!(m.fwt, 0.5);

        let r = TrainTestMatrix::new(vec![vec![0.8, 0.3], vec![0.6, 0.75]]).unwrap();
        let m = cl_metrics(&r).unwrap();
        assert!((m.rem - 0.8).abs() < 1e-15);
        assert_eq!(m.bwt_plus, 0.0);
        assert!((m.tl - 0.775).abs() < 1e-15);
        assert!((m.cl_dsc - 2.15 / 3.0).abs() < 1e-15);
        assert_eq!(m.fwt, 0.3);
    }

    #[test]
    fn constant_matrix() {
        let r = TrainTestMatrix::new(vec![vec![0.7; 3]; 3]).unwrap();
        let m = cl_metrics(&r).unwrap();
        assert_eq!((m.rem, m.bwt_plus), (1.0, 0.0));
        for v in [m.tl, m.cl_dsc, m.fwt] {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let r = TrainTestMatrix::new(vec![vec![0.1, 0.2], vec![1.0 / 3.0, 0.75]]).unwrap();
        let text = r.to_csv();
        assert!(text.starts_with("domain_1,domain_2\n"));
        assert_eq!(TrainTestMatrix::from_csv(&text).unwrap(), r);

        let err = TrainTestMatrix::from_csv("domain_1,domain_2\n0.1,0.2\n0.3\n").unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        let err = TrainTestMatrix::from_csv("domain_1\n0.5\n").unwrap_err();
        assert!(err.to_string().contains("D must be ≥ 2"), "{err}");
        assert!(TrainTestMatrix::new(vec![vec![0.5, 1.5], vec![0.1, 0.1]]).is_err());
    }

    #[test]
    fn metrics_json_keys() {
        let r = TrainTestMatrix::new(vec![vec![0.9, 0.5], vec![0.9, 0.8]]).unwrap();
        let m = cl_metrics(&r).unwrap();
        for name in ClMetrics::NAMES {
            assert!(m.get(name).is_some());
        }
    }
}
