//! Runs every strategy on the default four-domain suite over several seeds
//! and prints mean metrics per strategy.
//!
//! Usage: `cargo run --release -p masseg-core --example strategy_sweep
//! [seeds] [initial_lr] [momentum] [epochs] [strategies]`

use std::time::Instant;

use masseg_core::benchmark::default_four_domain_suite;
use masseg_core::metrics::{cl_metrics, mean_std, ClMetrics};
use masseg_core::regularization::{StrategyConfig, StrategyKind};
use masseg_core::trainer::{run_sequence, LrDecay, SequenceOptions, SequenceSpec, TrainSchedule};
use masseg_core::SegNetConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let seeds: u64 = arg(1).map_or(Ok(5), str::parse)?;
    let defaults = TrainSchedule::desk_scale();
    let initial_lr: f64 = arg(2).map_or(Ok(defaults.initial_lr), str::parse)?;
    let momentum: f64 = arg(3).map_or(Ok(defaults.momentum), str::parse)?;
    let epochs: usize = arg(4).map_or(Ok(defaults.epochs_per_domain), str::parse)?;
    let kinds: Vec<StrategyKind> = match arg(5) {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => StrategyKind::ALL.to_vec(),
    };
    for kind in kinds {
        let start = Instant::now();
        let mut per_seed: Vec<ClMetrics> = Vec::new();
        for seed in 0..seeds {
            let suite = default_four_domain_suite(seed)?;
            let train: Vec<_> = suite.iter().map(|p| p.train.clone()).collect();
            let eval: Vec<_> = suite.iter().map(|p| p.eval.clone()).collect();
            let spec = SequenceSpec {
                train: &train,
                eval: &eval,
                network: SegNetConfig::default(),
                strategy: StrategyConfig::new(kind),
                schedule: TrainSchedule {
                    seed,
                    initial_lr,
                    momentum,
                    epochs_per_domain: epochs,
                    first_domain_decay: LrDecay {
                        every_epochs: (epochs / 3).max(1),
                        ..defaults.first_domain_decay.clone()
                    },
                    ..defaults.clone()
                },
            };
            let result = run_sequence(&spec, SequenceOptions::default())?;
            let r = result.matrix()?;
            if std::env::var_os("SWEEP_VERBOSE").is_some() {
                let frozen: Vec<String> = result
                    .freeze_history
                    .iter()
                    .map(|m| format!("{:.3}", m.frozen_fraction()))
                    .collect();
                println!(
                    "{kind} seed {seed} frozen [{}]\n{}",
                    frozen.join(" "),
                    r.to_csv()
                );
            }
            per_seed.push(cl_metrics(&r)?);
        }
        let mut line = format!("{:<16}", kind.name());
        for name in ClMetrics::NAMES {
            let vals: Vec<f64> = per_seed.iter().map(|m| m.get(name).unwrap()).collect();
            let (m, s) = mean_std(&vals);
            line += &format!(" {name}={m:.4}±{s:.4}");
        }
        println!("{line} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
