//! SGD with momentum, learning-rate schedules and the sequential
//! multi-domain protocol that fills the train-test matrix.
//!
//! Random streams are derived from the schedule seed: one for the network
//! initialization and, per domain, one for batch shuffling and one for
//! dropout masks. A run is therefore a pure function of its inputs, and
//! resuming from a checkpoint replays the remaining domains exactly.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{derive_seed, DomainDataset};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::importance::{accumulate, compute_raw_importance, postprocess, ImportanceMap};
use crate::metrics::{dice_score, TrainTestMatrix};
use crate::network::{ParameterStore, SegNet, SegNetConfig};
use crate::regularization::{
    build_freeze_mask, effective_learning_rates, surrogate_penalty, FreezeMask, StrategyConfig,
    StrategyKind,
};

const INIT_STREAM: u64 = 0x1000;
const SHUFFLE_STREAM: u64 = 0x2000;
const DROPOUT_STREAM: u64 = 0x3000;

/// Step decay applied on the first domain only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.5,
            every_epochs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs_per_domain: usize,
    pub momentum: f64,
    pub initial_lr: f64,
    pub first_domain_decay: LrDecay,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs_per_domain: 12,
            momentum: 0.95,
            initial_lr: 0.1,
            first_domain_decay: LrDecay::default(),
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// Schedule calibrated for the default synthetic suite.
    pub fn desk_scale() -> Self {
        Self {
            epochs_per_domain: 48,
            momentum: 0.95,
            initial_lr: 0.02,
            first_domain_decay: LrDecay {
                factor: 0.5,
                every_epochs: 16,
            },
            batch_size: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_domain == 0 {
            return Err(Error::config("schedule.epochs_per_domain", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("schedule.momentum", "must be in [0, 1)"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("schedule.initial_lr", "must be > 0"));
        }
        let d = &self.first_domain_decay;
        if !(d.factor > 0.0 && d.factor <= 1.0) {
            return Err(Error::config(
                "schedule.first_domain_decay.factor",
                "must be in (0, 1]",
            ));
        }
        if d.every_epochs == 0 {
            return Err(Error::config(
                "schedule.first_domain_decay.every_epochs",
                "must be >= 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Base learning rate for a 0-based `epoch`. The first domain decays;
    /// every later domain holds the first domain's final rate.
    pub fn base_lr(&self, decaying: bool, epoch: usize) -> f64 {
        let e = if decaying {
            epoch
        } else {
            self.epochs_per_domain - 1
        };
        let halvings = (e / self.first_domain_decay.every_epochs) as i32;
        self.initial_lr * self.first_domain_decay.factor.powi(halvings)
    }
}

/// Momentum buffers aligned with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<(String, Vec<f64>)>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(store: &ParameterStore) -> Self {
        Self {
            velocity: store
                .entries()
                .iter()
                .map(|e| (e.id.clone(), vec![0.0; e.tensor.len()]))
                .collect(),
            step: 0,
        }
    }

    pub fn check_aligned(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.velocity.len() == store.len()
            && self
                .velocity
                .iter()
                .zip(store.entries())
                .all(|((id, v), e)| *id == e.id && v.len() == e.tensor.len());
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "optimizer_state",
                "does not match the network parameters",
            ))
        }
    }
}

/// Learning rate for every parameter, or one per scalar.
#[derive(Clone, Debug, PartialEq)]
pub enum LearningRates {
    Uniform(f64),
    PerParameter(Vec<Vec<f64>>),
}

/// One momentum SGD step: `v <- momentum * v + g`, `theta <- theta - lr * v`.
///
/// Entries that are frozen or have a zero learning rate keep their value
/// and have their velocity held at zero.
pub fn sgd_momentum_step(
    params: &mut ParameterStore,
    grads: &[Vec<f64>],
    lr: &LearningRates,
    momentum: f64,
    state: &mut OptimizerState,
    mask: Option<&FreezeMask>,
) -> Result<()> {
    state.check_aligned(params)?;
    if grads.len() != params.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    if let Some(m) = mask {
        m.check_aligned(params)?;
    }
    if let LearningRates::PerParameter(rates) = lr {
        let ok = rates.len() == params.len()
            && rates
                .iter()
                .zip(params.entries())
                .all(|(r, e)| r.len() == e.tensor.len());
        if !ok {
            return Err(Error::shape(
                "sgd_momentum_step",
                "learning-rate map misaligned",
            ));
        }
    }
    for (k, (entry, g)) in params.entries().iter().zip(grads).enumerate() {
        if g.len() != entry.tensor.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{}: gradient length", entry.id),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(entry.id.clone()));
        }
        let bad_rate = match lr {
            LearningRates::Uniform(r) => !(*r >= 0.0 && r.is_finite()),
            LearningRates::PerParameter(rates) => {
                rates[k].iter().any(|r| !(*r >= 0.0 && r.is_finite()))
            }
        };
        if bad_rate {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
    }

    for (k, entry) in params.entries_mut().iter_mut().enumerate() {
        let frozen = mask.map(|m| m.entries()[k].1.as_slice());
        let v = &mut state.velocity[k].1;
        let theta = entry.tensor.data_mut();
        for i in 0..theta.len() {
            let rate = match lr {
                LearningRates::Uniform(r) => *r,
                LearningRates::PerParameter(rates) => rates[k][i],
            };
            if rate == 0.0 || frozen.is_some_and(|f| f[i]) {
                v[i] = 0.0;
                continue;
            }
            v[i] = momentum * v[i] + grads[k][i];
            theta[i] -= rate * v[i];
        }
    }
    state.step += 1;
    Ok(())
}

/// One optimizer step of training.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub domain: usize,
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub step: usize,
    pub loss: f64,
    pub base_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }

    /// Whitespace-separated `domain epoch step loss base_lr` lines.
    pub fn to_lines(&self) -> String {
        let mut s = String::from("domain epoch step loss base_lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{} {} {} {:?} {:?}",
                r.domain, r.epoch, r.step, r.loss, r.base_lr
            );
        }
        s
    }
}

/// Strategy state carried between domains.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainState {
    /// Parameters after the previous domain (the penalty anchor).
    pub theta_star: Option<ParameterStore>,
    /// Accumulated, post-processed importance.
    pub omega: Option<ImportanceMap>,
    pub freeze: Option<FreezeMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainOutcome {
    pub log: TrainLog,
    pub optimizer: OptimizerState,
}

struct StepHooks<'a> {
    penalty: Option<(f64, &'a ParameterStore, &'a ImportanceMap)>,
    lr_omega: Option<&'a ImportanceMap>,
    freeze: Option<&'a FreezeMask>,
    l2: f64,
}

fn resolve_hooks<'a>(
    strategy: &StrategyConfig,
    state: &'a DomainState,
    domain_index: usize,
) -> Result<StepHooks<'a>> {
    strategy.validate()?;
    let hooks = strategy.hooks();
    let later = domain_index > 0;
    let missing = |what: &str| {
        Error::MissingState(format!(
            "{} on domain {} needs {what}",
            strategy.kind,
            domain_index + 1
        ))
    };
    let penalty = match hooks.penalty_lambda {
        Some(lambda) if lambda != 0.0 => match (&state.theta_star, &state.omega) {
            (Some(star), Some(omega)) => Some((lambda, star, omega)),
            _ if later => return Err(missing("importance and anchor parameters")),
            _ => None,
        },
        _ => None,
    };
    let lr_omega = if hooks.lr_scaling {
        match &state.omega {
            Some(o) => Some(o),
            None if later => return Err(missing("importance")),
            None => None,
        }
    } else {
        None
    };
    let freeze = if hooks.freeze {
        match &state.freeze {
            Some(f) => Some(f),
            None if later => return Err(missing("a freeze mask")),
            None => None,
        }
    } else {
        None
    };
    Ok(StepHooks {
        penalty,
        lr_omega,
        freeze,
        l2: hooks.l2_coefficient,
    })
}

/// Trains `net` on one domain with the strategy's hooks.
///
/// The first domain (`domain_index == 0`) uses the decaying schedule;
/// later domains hold its final rate. Strategy state absent on the first
/// domain simply disables the corresponding hook.
pub fn train_domain(
    net: &mut SegNet,
    data: &DomainDataset,
    strategy: &StrategyConfig,
    schedule: &TrainSchedule,
    state: &DomainState,
    domain_index: usize,
) -> Result<DomainOutcome> {
    let hooks = resolve_hooks(strategy, state, domain_index)?;
    let rate = strategy.hooks().dropout_rate;
    train_loop(
        net,
        data,
        &hooks,
        rate,
        schedule,
        domain_index == 0,
        domain_index,
    )
}

fn train_loop(
    net: &mut SegNet,
    data: &DomainDataset,
    hooks: &StepHooks<'_>,
    dropout_rate: f64,
    schedule: &TrainSchedule,
    decaying: bool,
    domain_index: usize,
) -> Result<DomainOutcome> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::config("domain", "training set is empty"));
    }
    let mut work = if dropout_rate > 0.0 {
        net.with_dropout_rate(dropout_rate)?
    } else {
        net.clone()
    };
    let total_params = work.num_params();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        schedule.seed,
        SHUFFLE_STREAM + domain_index as u64,
    ));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        schedule.seed,
        DROPOUT_STREAM + domain_index as u64,
    ));
    let mut optimizer = OptimizerState::zeros(work.params());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..schedule.epochs_per_domain {
        let base_lr = schedule.base_lr(decaying, epoch);
        let lr = match hooks.lr_omega {
            Some(omega) => LearningRates::PerParameter(effective_learning_rates(omega, base_lr)?),
            None => LearningRates::Uniform(base_lr),
        };
        order.shuffle(&mut shuffle_rng);
        for (s, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let diverged = |reason: String| Error::Divergence {
                domain: domain_index + 1,
                epoch: epoch + 1,
                step: s + 1,
                reason,
            };
            let (batch, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let vars = work.params().bind(&mut g, true)?;
            let x = g.constant(batch)?;
            let step_loss = (|| {
                let logits = work.forward(&mut g, x, &vars, Some(&mut dropout_rng))?;
                let probs = g.softmax_channel(logits)?;
                g.cross_entropy(probs, &labels)
            })();
            let loss_var = match step_loss {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(format!("non-finite {op} output")))
                }
                Err(e) => return Err(e),
            };
            let mut loss = g.value(loss_var).data()[0];
            let mut grads_out = g.backward(loss_var)?;
            let mut grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|v| grads_out.take(*v).expect("bound as parameter"))
                .collect();

            if let Some((lambda, star, omega)) = hooks.penalty {
                let (pen, pgrad) =
                    surrogate_penalty(work.params(), star, omega, lambda, total_params)?;
                loss += pen;
                for (g, p) in grads.iter_mut().flatten().zip(pgrad.iter().flatten()) {
                    *g += p;
                }
            }
            if hooks.l2 != 0.0 {
                for (g, e) in grads.iter_mut().zip(work.params().entries()) {
                    for (gv, t) in g.iter_mut().zip(e.tensor.data()) {
                        *gv += hooks.l2 * t;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(diverged("loss is not finite".into()));
            }
            match sgd_momentum_step(
                work.params_mut(),
                &grads,
                &lr,
                schedule.momentum,
                &mut optimizer,
                hooks.freeze,
            ) {
                Err(Error::NonFiniteGradient(id)) => {
                    return Err(diverged(format!("non-finite gradient for {id}")))
                }
                other => other?,
            }
            log.records.push(StepRecord {
                domain: domain_index + 1,
                epoch: epoch + 1,
                step: s + 1,
                loss,
                base_lr,
            });
        }
    }
    *net.params_mut() = work.params().clone();
    Ok(DomainOutcome { log, optimizer })
}

/// Mean over images of the foreground Dice (classes present in the ground
/// truth, background excluded).
pub fn evaluate_dice(net: &SegNet, eval: &DomainDataset) -> Result<f64> {
    let images = eval.all_images()?;
    let pred = net.predict_labels(&images)?;
    let px = eval.height * eval.width;
    let mut scores = Vec::with_capacity(eval.len());
    for (p, gt) in pred.chunks_exact(px).zip(&eval.labels) {
        let gt: Vec<usize> = gt.iter().map(|&l| l as usize).collect();
        if let Some(m) = dice_score(p, &gt, eval.num_classes)?.foreground_mean() {
            scores.push(m);
        }
    }
    if scores.is_empty() {
        return Err(Error::Metrics("evaluation set has no foreground".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Everything a sequential run needs.
#[derive(Clone, Debug)]
pub struct SequenceSpec<'a> {
    pub train: &'a [DomainDataset],
    pub eval: &'a [DomainDataset],
    pub network: SegNetConfig,
    pub strategy: StrategyConfig,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, Default)]
pub struct SequenceOptions {
    /// Writes `domain_<i>.ckpt` after every domain when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continues after the domains this checkpoint covers.
    pub resume_from: Option<Checkpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    /// Finished rows of the train-test matrix.
    pub rows: Vec<Vec<f64>>,
    pub checkpoints: Vec<PathBuf>,
    /// One training log per domain trained in this call.
    pub logs: Vec<TrainLog>,
    /// Accumulated importance after each domain trained in this call.
    pub importance_history: Vec<ImportanceMap>,
    pub freeze_history: Vec<FreezeMask>,
    pub network: SegNet,
}

impl SequenceResult {
    pub fn matrix(&self) -> Result<TrainTestMatrix> {
        if self.rows.len() != self.rows.first().map_or(0, Vec::len) {
            return Err(Error::Metrics(format!(
                "sequence incomplete: {} finished rows",
                self.rows.len()
            )));
        }
        TrainTestMatrix::new(self.rows.clone())
    }
}

/// A failed run with everything finished before the failure.
#[derive(Debug)]
pub struct SequenceFailure {
    pub partial: SequenceResult,
    pub error: Error,
}

impl std::fmt::Display for SequenceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} finished domains)",
            self.error,
            self.partial.rows.len()
        )
    }
}

impl std::error::Error for SequenceFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Seed of the freshly initialized network of a run.
pub fn init_seed(schedule: &TrainSchedule) -> u64 {
    derive_seed(schedule.seed, INIT_STREAM)
}

/// Trains through every domain in order, filling one row of the
/// train-test matrix after each.
pub fn run_sequence(
    spec: &SequenceSpec<'_>,
    options: SequenceOptions,
) -> Result<SequenceResult, Box<SequenceFailure>> {
    let fresh = SegNet::build(spec.network.clone(), init_seed(&spec.schedule));
    let start = match fresh {
        Ok(net) => net,
        Err(error) => {
            return Err(Box::new(SequenceFailure {
                partial: empty_result(
                    SegNet::build(SegNetConfig::default(), 0).expect("default config"),
                ),
                error,
            }))
        }
    };
    let mut result = empty_result(start.clone());
    match drive(spec, options, start, &mut result) {
        Ok(()) => Ok(result),
        Err(error) => Err(Box::new(SequenceFailure {
            partial: result,
            error,
        })),
    }
}

fn empty_result(network: SegNet) -> SequenceResult {
    SequenceResult {
        rows: Vec::new(),
        checkpoints: Vec::new(),
        logs: Vec::new(),
        importance_history: Vec::new(),
        freeze_history: Vec::new(),
        network,
    }
}

fn drive(
    spec: &SequenceSpec<'_>,
    options: SequenceOptions,
    fresh: SegNet,
    result: &mut SequenceResult,
) -> Result<()> {
    let d = spec.train.len();
    if d < 2 {
        return Err(Error::config("benchmark", "need at least 2 domains"));
    }
    if spec.eval.len() != d {
        return Err(Error::config(
            "benchmark",
            format!(
                "{d} training domains but {} evaluation sets",
                spec.eval.len()
            ),
        ));
    }
    spec.strategy.validate()?;
    spec.schedule.validate()?;
    let strategy = &spec.strategy;
    let granularity = strategy.granularity();

    let mut net = fresh.clone();
    let mut omega: Option<ImportanceMap> = None;
    let mut freeze: Option<FreezeMask> = None;
    let mut first = 0;
    if let Some(ckpt) = options.resume_from {
        if ckpt.domains_completed == 0 || ckpt.domains_completed >= d {
            return Err(Error::config(
                "resume",
                format!(
                    "checkpoint covers {} of {d} domains",
                    ckpt.domains_completed
                ),
            ));
        }
        if ckpt.progress.len() != ckpt.domains_completed
            || ckpt.progress.iter().any(|r| r.len() != d)
        {
            return Err(Error::config(
                "resume",
                "checkpoint progress does not match the benchmark",
            ));
        }
        if ckpt.network.config() != &spec.network {
            return Err(Error::config(
                "resume",
                "checkpoint network differs from the configured one",
            ));
        }
        net = ckpt.network;
        omega = ckpt.importance;
        freeze = ckpt.freeze;
        first = ckpt.domains_completed;
        result.rows = ckpt.progress;
    }
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for i in first..d {
        let outcome = if strategy.kind == StrategyKind::Joint {
            let seen: Vec<&DomainDataset> = spec.train[..=i].iter().collect();
            let union = DomainDataset::union(&seen)?;
            net = fresh.clone();
            let hooks = StepHooks {
                penalty: None,
                lr_omega: None,
                freeze: None,
                l2: 0.0,
            };
            train_loop(&mut net, &union, &hooks, 0.0, &spec.schedule, true, i)?
        } else {
            let state = DomainState {
                theta_star: Some(net.params().clone()),
                omega: omega.clone(),
                freeze: freeze.clone(),
            };
            train_domain(
                &mut net,
                &spec.train[i],
                strategy,
                &spec.schedule,
                &state,
                i,
            )?
        };

        let raw = compute_raw_importance(&net, &[spec.train[i].all_images()?])?;
        let processed = postprocess(&raw, granularity)?;
        let running = accumulate(omega.as_ref(), &processed, i + 1)?;
        if strategy.hooks().freeze {
            let mask = build_freeze_mask(
                &running,
                freeze.as_ref(),
                strategy.beta_per_domain,
                strategy.min_importance_to_freeze,
            )?;
            result.freeze_history.push(mask.clone());
            freeze = Some(mask);
        }
        omega = Some(running.clone());

        let row = spec
            .eval
            .iter()
            .map(|e| evaluate_dice(&net, e))
            .collect::<Result<Vec<f64>>>()?;
        result.rows.push(row);
        result.logs.push(outcome.log);
        result.importance_history.push(running);
        result.network = net.clone();

        if let Some(dir) = &options.checkpoint_dir {
            let path = dir.join(format!("domain_{}.ckpt", i + 1));
            Checkpoint {
                network: net.clone(),
                domains_completed: i + 1,
                importance: omega.clone(),
                freeze: freeze.clone(),
                optimizer: Some(outcome.optimizer),
                progress: result.rows.clone(),
            }
            .save(&path)?;
            result.checkpoints.push(path);
        }
    }
    Ok(())
}
