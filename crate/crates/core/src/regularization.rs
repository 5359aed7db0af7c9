//! Importance-driven strategies and baseline regularizers.
//!
//! Every strategy reduces to a [`Hooks`] set the trainer applies at each
//! step: an anchored quadratic penalty, per-parameter learning-rate scaling,
//! a freeze mask, weight decay and dropout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{Granularity, ImportanceMap};
use crate::network::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FineTune,
    Joint,
    Mas,
    MasLr,
    MasFix,
    L2,
    Dropout,
    MasLrDropout,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::FineTune,
        StrategyKind::Joint,
        StrategyKind::Mas,
        StrategyKind::MasLr,
        StrategyKind::MasFix,
        StrategyKind::L2,
        StrategyKind::Dropout,
        StrategyKind::MasLrDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "fine_tune",
            StrategyKind::Joint => "joint",
            StrategyKind::Mas => "mas",
            StrategyKind::MasLr => "mas_lr",
            StrategyKind::MasFix => "mas_fix",
            StrategyKind::L2 => "l2",
            StrategyKind::Dropout => "dropout",
            StrategyKind::MasLrDropout => "mas_lr_dropout",
        }
    }

    /// Whether the strategy consumes importance weights.
    pub fn uses_importance(self) -> bool {
        matches!(
            self,
            StrategyKind::Mas
                | StrategyKind::MasLr
                | StrategyKind::MasFix
                | StrategyKind::MasLrDropout
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::config("strategy.kind", format!("unknown strategy {s:?}")))
    }
}

/// Active continual-learning strategy and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Surrogate-loss weight.
    pub lambda: f64,
    /// Additional fraction of the network that may be frozen per domain.
    pub beta_per_domain: f64,
    /// Parameters below this normalized importance are never force-frozen.
    pub min_importance_to_freeze: f64,
    pub l2_coefficient: f64,
    pub dropout_rate: f64,
    /// `None` picks the per-strategy default.
    pub importance_granularity: Option<Granularity>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::FineTune,
            lambda: 1e4,
            beta_per_domain: 0.25,
            min_importance_to_freeze: 0.05,
            l2_coefficient: 1e-3,
            dropout_rate: 0.2,
            importance_granularity: None,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("strategy.lambda", "must be >= 0"));
        }
        if !(self.beta_per_domain > 0.0 && self.beta_per_domain <= 1.0) {
            return Err(Error::config(
                "strategy.beta_per_domain",
                "must be in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_importance_to_freeze) {
            return Err(Error::config(
                "strategy.min_importance_to_freeze",
                "must be in [0, 1]",
            ));
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return Err(Error::config("strategy.l2_coefficient", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("strategy.dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Kernel level for MAS-Fix, filter level for MAS-LR variants, plain
    /// per-parameter weights otherwise.
    pub fn granularity(&self) -> Granularity {
        self.importance_granularity.unwrap_or(match self.kind {
            StrategyKind::MasFix => Granularity::Kernel,
            StrategyKind::MasLr | StrategyKind::MasLrDropout => Granularity::Filter,
            _ => Granularity::Parameter,
        })
    }

    pub fn hooks(&self) -> Hooks {
        use StrategyKind::*;
        Hooks {
            penalty_lambda: matches!(self.kind, Mas).then_some(self.lambda),
            lr_scaling: matches!(self.kind, MasLr | MasLrDropout),
            freeze: matches!(self.kind, MasFix),
            l2_coefficient: if self.kind == L2 {
                self.l2_coefficient
            } else {
                0.0
            },
            dropout_rate: if matches!(self.kind, Dropout | MasLrDropout) {
                self.dropout_rate
            } else {
                0.0
            },
        }
    }
}

/// Per-step training modifications derived from a strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hooks {
    pub penalty_lambda: Option<f64>,
    pub lr_scaling: bool,
    pub freeze: bool,
    pub l2_coefficient: f64,
    pub dropout_rate: f64,
}

/// Per-parameter freeze flags. A frozen entry never unfreezes.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeMask {
    entries: Vec<(String, Vec<bool>)>,
    frozen: usize,
    total: usize,
}

impl FreezeMask {
    pub fn empty(store: &ParameterStore) -> Self {
        Self::filled(store, false)
    }

    pub fn full(store: &ParameterStore) -> Self {
        Self::filled(store, true)
    }

    fn filled(store: &ParameterStore, value: bool) -> Self {
        let entries: Vec<_> = store
            .entries()
            .iter()
            .map(|e| (e.id.clone(), vec![value; e.tensor.len()]))
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, Vec<bool>)>) -> Self {
        let total = entries.iter().map(|(_, v)| v.len()).sum();
        let frozen = entries.iter().flat_map(|(_, v)| v).filter(|&&b| b).count();
        Self {
            entries,
            frozen,
            total,
        }
    }

    pub fn entries(&self) -> &[(String, Vec<bool>)] {
        &self.entries
    }

    pub fn flags(&self, id: &str) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, v)| v.as_slice())
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn frozen_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.frozen as f64 / self.total as f64
        }
    }

    pub fn check_aligned(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.entries.len() == store.len()
            && self
                .entries
                .iter()
                .zip(store.entries())
                .all(|((id, v), e)| *id == e.id && v.len() == e.tensor.len());
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "freeze_mask",
                "does not match the network parameters",
            ))
        }
    }
}

fn check_same_ids(a: &ParameterStore, omega: &ImportanceMap) -> Result<()> {
    omega.check_aligned(a)
}

/// Anchored quadratic penalty `(lambda / P) * sum(omega * (theta - theta_star)^2)`
/// and its gradient `(2 lambda / P) * omega * (theta - theta_star)`.
pub fn surrogate_penalty(
    theta: &ParameterStore,
    theta_star: &ParameterStore,
    omega: &ImportanceMap,
    lambda: f64,
    total_params: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if total_params == 0 {
        return Err(Error::config("total_params", "must be > 0"));
    }
    check_same_ids(theta, omega)?;
    let star_ids: Vec<&str> = theta_star.ids().collect();
    if star_ids != theta.ids().collect::<Vec<_>>() {
        return Err(Error::ParamMismatch {
            missing: theta
                .ids()
                .filter(|i| !star_ids.contains(i))
                .map(String::from)
                .collect(),
            extra: star_ids
                .iter()
                .filter(|i| theta.get(i).is_none())
                .map(|s| s.to_string())
                .collect(),
        });
    }
    let scale = lambda / total_params as f64;
    let mut penalty = 0.0;
    let mut grads = Vec::with_capacity(theta.len());
    for ((cur, star), om) in theta
        .entries()
        .iter()
        .zip(theta_star.entries())
        .zip(omega.entries())
    {
        let g: Vec<f64> = cur
            .tensor
            .data()
            .iter()
            .zip(star.tensor.data())
            .zip(&om.values)
            .map(|((c, s), o)| {
                let d = c - s;
                penalty += o * d * d;
                2.0 * scale * o * d
            })
            .collect();
        grads.push(g);
    }
    Ok((scale * penalty, grads))
}

/// Per-parameter learning rates `(1 - omega) * base_lr`.
pub fn effective_learning_rates(omega: &ImportanceMap, base_lr: f64) -> Result<Vec<Vec<f64>>> {
    if !omega.is_normalized() {
        return Err(Error::Importance(
            "learning-rate scaling needs a normalized map".into(),
        ));
    }
    if base_lr.is_nan() || base_lr <= 0.0 {
        return Err(Error::config("base_lr", "must be > 0"));
    }
    Ok(omega
        .entries()
        .iter()
        .map(|e| e.values.iter().map(|o| (1.0 - o) * base_lr).collect())
        .collect())
}

/// Extends `previous` by freezing the most important unfrozen parameters
/// until the cumulative budget `previous_fraction + beta_d` is reached.
///
/// Only parameters with importance at least `min_importance` are candidates;
/// ties are broken by store order, then flat index.
pub fn build_freeze_mask(
    omega: &ImportanceMap,
    previous: Option<&FreezeMask>,
    beta_d: f64,
    min_importance: f64,
) -> Result<FreezeMask> {
    if beta_d.is_nan() || beta_d <= 0.0 {
        return Err(Error::config("beta_per_domain", "must be > 0"));
    }
    if !omega.is_normalized() {
        return Err(Error::Importance("freezing needs a normalized map".into()));
    }
    let mut entries: Vec<(String, Vec<bool>)> = match previous {
        Some(prev) => {
            let aligned = prev.entries.len() == omega.entries().len()
                && prev
                    .entries
                    .iter()
                    .zip(omega.entries())
                    .all(|((id, v), e)| *id == e.id && v.len() == e.values.len());
            if !aligned {
                return Err(Error::config(
                    "freeze_mask",
                    "previous mask belongs to another network",
                ));
            }
            prev.entries.clone()
        }
        None => omega
            .entries()
            .iter()
            .map(|e| (e.id.clone(), vec![false; e.values.len()]))
            .collect(),
    };
    let total: usize = entries.iter().map(|(_, v)| v.len()).sum();
    let frozen = entries.iter().flat_map(|(_, v)| v).filter(|&&b| b).count();
    let budget = (previous.map_or(0.0, FreezeMask::frozen_fraction) + beta_d).min(1.0);
    // Largest count whose fraction stays within the budget.
    let allowed = ((budget * total as f64) + 1e-9).floor() as usize;

    let mut candidates: Vec<(f64, usize, usize)> = omega
        .entries()
        .iter()
        .enumerate()
        .flat_map(|(e, entry)| {
            let flags = &entries[e].1;
            entry
                .values
                .iter()
                .enumerate()
                .filter(move |(i, &v)| !flags[*i] && v >= min_importance)
                .map(move |(i, &v)| (v, e, i))
        })
        .collect();
    if candidates.is_empty() {
        return Ok(match previous {
            Some(p) => p.clone(),
            None => FreezeMask::from_entries(entries),
        });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, e, i) in candidates.into_iter().take(allowed.saturating_sub(frozen)) {
        entries[e].1[i] = true;
    }
    Ok(FreezeMask::from_entries(entries))
}

/// Weight-decay gradient `coefficient * theta`.
pub fn l2_gradient(theta: &ParameterStore, coefficient: f64) -> Vec<Vec<f64>> {
    theta
        .entries()
        .iter()
        .map(|e| e.tensor.data().iter().map(|v| coefficient * v).collect())
        .collect()
}

/// Hook set for the `l2` and `dropout` baselines.
pub fn apply_baseline(config: &StrategyConfig) -> Result<Hooks> {
    config.validate()?;
    match config.kind {
        StrategyKind::L2 | StrategyKind::Dropout => Ok(config.hooks()),
        other => Err(Error::config(
            "strategy.kind",
            format!("{other} is not a baseline regularizer"),
        )),
    }
}
