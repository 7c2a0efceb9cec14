use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use talkflow::commands;
use talkflow::config::RunConfig;
use talkflow::run::Run;
use talkflow_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "talkflow",
    version,
    about = "Audio-driven expression, pose and image generation at desk scale"
)]
struct Cli {
    /// JSON configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default runs/<experiment>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base preset: desk or paper-shape.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Only errors and results on the terminal.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and held-out coefficient sequences.
    SynthData,
    /// Train the expression flow and build its latent bank.
    TrainExpflow(TrainArgs),
    /// Train the pose flow.
    TrainPoseflow(TrainArgs),
    /// Train the patch autoencoder and codebook.
    TrainCodebook(TrainArgs),
    /// Train the code-prediction image generator over the frozen codebook.
    TrainVqig(TrainArgs),
    /// Roll out expression (and pose, if trained) sequences under several seeds.
    Sample {
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        sequence: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        /// Decode raw samples without snapping to the latent bank.
        #[arg(long)]
        no_project: bool,
    },
    /// Replay one held-out sequence's expression onto another's audio and start frame.
    Transfer {
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long, default_value_t = 1)]
        target: usize,
    },
    /// Render PNG frames from a source face and a coefficient track.
    Animate {
        #[arg(long)]
        sequence: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Use the held-out sequence's own coefficients instead of generated ones.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Run acceptance criteria against the trained artifacts.
    Eval {
        /// Run directory trained with a different dropout rate.
        #[arg(long)]
        ablation_run: Option<PathBuf>,
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        criteria: Option<Vec<u8>>,
    },
    /// Dump held-out latents with class labels and a 2-D PCA projection.
    ExportLatents,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Continue from the run's checkpoint if present.
    #[arg(long)]
    resume: bool,
    /// Overrides the configured total step count.
    #[arg(long)]
    steps: Option<u64>,
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), cli.preset.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let train_steps = |block: &mut talkflow::config::TrainingBlock, args: &TrainArgs| {
        if let Some(s) = args.steps {
            block.steps = s;
        }
    };
    match &cli.command {
        Command::TrainExpflow(a) => train_steps(&mut config.train_expflow, a),
        Command::TrainPoseflow(a) => train_steps(&mut config.train_poseflow, a),
        Command::TrainCodebook(a) => train_steps(&mut config.train_codebook, a),
        Command::TrainVqig(a) => train_steps(&mut config.train_vqig, a),
        Command::Sample {
            seeds,
            class,
            sequence,
            length,
            no_project,
        } => {
            let s = &mut config.sample;
            s.seeds = seeds.unwrap_or(s.seeds);
            s.class = class.or(s.class);
            s.sequence = sequence.unwrap_or(s.sequence);
            s.length = length.unwrap_or(s.length);
            s.project &= !no_project;
        }
        Command::Animate {
            sequence: Some(q), ..
        } => config.sample.sequence = *q,
        _ => {}
    }
    config.validate()?;
    let dir = cli.out.clone().unwrap_or_else(|| Run::default_dir(&config));
    let run = Run::new(config, dir);
    let q = cli.quiet;
    match cli.command {
        Command::SynthData => commands::synth_data(&run, q),
        Command::TrainExpflow(a) => commands::train_expflow(&run, q, a.resume),
        Command::TrainPoseflow(a) => commands::train_poseflow(&run, q, a.resume),
        Command::TrainCodebook(a) => commands::train_codebook(&run, q, a.resume),
        Command::TrainVqig(a) => commands::train_vqig(&run, q, a.resume),
        Command::Sample { .. } => commands::sample(&run, q),
        Command::Transfer { reference, target } => commands::transfer(&run, q, reference, target),
        Command::Animate {
            frames,
            ground_truth,
            ..
        } => commands::animate(&run, q, ground_truth, frames),
        Command::Eval {
            ablation_run,
            criteria,
        } => {
            let wanted = criteria.unwrap_or_else(|| (1..=12).collect());
            if let Some(bad) = wanted.iter().find(|c| !(1..=12).contains(*c)) {
                return Err(Error::argument(format!("no criterion {bad}")));
            }
            commands::eval(&run, q, &wanted, ablation_run.as_deref()).map(|_| ())
        }
        Command::ExportLatents => commands::export_latents(&run, q),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(talkflow::exit_code(&e) as u8)
        }
    }
}
