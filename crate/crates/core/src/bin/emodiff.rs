use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use emodiff::harness::commands::{self, PipelineConfig, Prompt, RunDir, SampleArgs};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "emodiff", version, about = "Emotion-conditioned expression diffusion on a synthetic corpus")]
struct Cli {
    /// Seed applied to every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory shared by all steps.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    GenerateData,
    TrainBinding,
    TrainSyncExpert,
    TrainDiffusion,
    #[command(group(ArgGroup::new("prompt").required(true).args(["label", "text", "audio", "motion"])))]
    Sample {
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        text: Option<String>,
        /// Audio feature container.
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Expression sequence container.
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        weight: f64,
        #[arg(long)]
        steps: Option<usize>,
        /// Content container to animate (default: first test clip).
        #[arg(long)]
        content: Option<PathBuf>,
        /// Binding checkpoint (default: the one in --out).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Denoiser checkpoint (default: the one in --out).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output container (default: sample_<modality>.emdf in --out, e.g. sample_label.emdf).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    Evaluate,
    AblateWeights,
    AblateDeterministic,
    Plot {
        /// Metric CSV to plot (default: the weight ablation in --out).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn print<T: Serialize>(v: &T) -> emodiff::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> emodiff::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let dir = RunDir::new(&cli.out)?;
    match cli.command {
        Command::GenerateData => print(&commands::generate_data(&cfg, &dir)?),
        Command::TrainBinding => print(&commands::train_binding_cmd(&cfg, &dir)?),
        Command::TrainSyncExpert => print(&commands::train_sync_expert_cmd(&cfg, &dir)?),
        Command::TrainDiffusion => {
            let log = commands::train_diffusion_cmd(&cfg, &dir)?;
            let (a, b) = log.start_end(20);
            println!("loss {a:.4} -> {b:.4} over {} iterations; params {}", log.total.len(), log.final_hash);
            Ok(())
        }
        Command::Sample {
            label,
            text,
            audio,
            motion,
            weight,
            steps,
            content,
            bank,
            model,
            output,
        } => {
            let prompt = match (label, text, audio, motion) {
                (Some(k), ..) => Prompt::Label(k),
                (_, Some(t), ..) => Prompt::Text(t),
                (_, _, Some(a), _) => Prompt::Audio(a),
                (.., Some(m)) => Prompt::Motion(m),
                _ => unreachable!("clap enforces one prompt"),
            };
            let args = SampleArgs {
                prompt,
                weight,
                steps,
                content,
                seed: cli.seed.unwrap_or(cfg.train.seed),
                bank,
                model,
                output,
            };
            print(&commands::sample_cmd(&args, &dir)?)
        }
        Command::Evaluate => print(&commands::evaluate_cmd(&cfg, &dir)?),
        Command::AblateWeights => print(&commands::ablate_weights_cmd(&cfg, &dir)?),
        Command::AblateDeterministic => print(&commands::ablate_deterministic_cmd(&cfg, &dir)?),
        Command::Plot { input } => {
            println!("{}", commands::plot_cmd(&dir, input.as_deref())?.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
