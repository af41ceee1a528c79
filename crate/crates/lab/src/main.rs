use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rft_core::finetune::{EngineKind, RewardMode};
use rft_lab::{ExperimentConfig, Pipeline};

#[derive(Parser)]
#[command(name = "rft-lab", version, about = "Step-wise reward fine-tuning experiments on synthetic motion")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Offset added to every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    engine: Option<Engine>,
    /// How intermediate states are scored during fine-tuning.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Trajectory,
    Easytune,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    OdePredict,
    Perceive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the semantic backbone and the preference adapter.
    PretrainReward,
    /// Refine the semantic reward on self-mined hard negatives.
    SplRefine,
    /// Train the generator, then the authenticity adapter against it.
    PretrainDiffusion,
    /// Fine-tune the generator with the selected engine.
    Finetune,
    /// Write seed-replicated metrics.
    Evaluate,
    /// Write figure data files.
    Diagnostics,
    /// Every stage from data generation to evaluation.
    Run {
        /// Stop before fine-tuning and report baseline metrics only.
        #[arg(long)]
        skip_finetune: bool,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seeds = config.seeds.shifted(s);
    }
    if let Some(dir) = cli.out {
        config.output.dir = dir;
    }
    if let Some(e) = cli.engine {
        config.engine.kind = match e {
            Engine::Trajectory => EngineKind::Trajectory,
            Engine::Easytune => EngineKind::EasyTune,
        };
    }
    if let Some(m) = cli.mode {
        config.engine.mode = match m {
            Mode::OdePredict => RewardMode::OdePredict,
            Mode::Perceive => RewardMode::Perceive,
        };
    }
    if let Command::ShowConfig = cli.command {
        config.validate()?;
        print!("{}", config.to_flat_string()?);
        return Ok(());
    }
    let p = Pipeline::new(config)?;
    match cli.command {
        Command::GenData => {
            let c = p.gen_data()?;
            println!("{} motions written to {}", c.len(), p.out.display());
        }
        Command::PretrainReward => {
            p.pretrain_reward()?;
            println!("reward model saved to {}", p.path("reward_pretrained.ckpt").display());
        }
        Command::SplRefine => {
            p.spl_refine()?;
            println!("refined reward model saved to {}", p.path("reward_refined.ckpt").display());
        }
        Command::PretrainDiffusion => {
            p.pretrain_diffusion()?;
            println!("generator and final reward model saved under {}", p.out.display());
        }
        Command::Finetune => {
            let run = p.finetune()?;
            let last = run.evals.last().map(|e| e.value);
            println!(
                "{}: {} updates, peak {} nodes, final eval reward {}",
                run.kind.name(),
                run.trace.len(),
                run.peak_nodes(),
                last.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Evaluate => print_report(&p.evaluate()?),
        Command::Diagnostics => {
            p.diagnostics()?;
            println!("figure data written to {}", p.path("diagnostics").display());
        }
        Command::Run { skip_finetune } => print_report(&p.run_all(!skip_finetune)?),
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn print_report(report: &rft_lab::eval::MetricsReport) {
    for (name, iv) in &report.metrics {
        println!("{name:32} {:>10.4}  [{:.4}, {:.4}]", iv.mean, iv.lo, iv.hi);
    }
}
