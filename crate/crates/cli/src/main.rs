//! `seld` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seld_cli::commands::{self, SynthArgs};
use seld_cli::synth::ToySceneSpec;
use seld_cli::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "seld", version, about = "Sound event localization and detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic FoA clips with label CSVs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Scene description file; random toy scenes when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        max_events: usize,
        /// Only static sources.
        #[arg(long)]
        r#static: bool,
    },
    /// Extract and cache features for every clip of a directory.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Finetune a checkpoint with the VTM loss.
    FinetuneVtm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Decode clips into event CSVs.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overlapping windows fused by median.
        #[arg(long)]
        io: bool,
        /// Rotation test-time augmentation.
        #[arg(long)]
        ctai: bool,
        #[arg(long)]
        acs_count: Option<usize>,
        #[arg(long)]
        ctai_threshold: Option<f64>,
        /// Window length in seconds (5, 10 or 20).
        #[arg(long)]
        seq_len: Option<u32>,
        /// Audio/feature files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score predicted against reference label CSVs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export channel-attention maps and their column similarities.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Reference labels used to group similarity columns.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn checkpoint_config(config: Option<PathBuf>, checkpoint: &std::path::Path) -> Result<RunConfig> {
    let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
    commands::reconcile(cfg, checkpoint)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, scene, count, seed, duration, classes, max_events, r#static } => {
            if classes == 0 || !(duration > 0.0) {
                return Err(CliError::Config("classes and duration must be positive".into()));
            }
            let toy = ToySceneSpec { duration_s: duration, n_classes: classes, max_events, moving: !r#static };
            let files = commands::cmd_synth(&SynthArgs { out_dir: out, scene, count, seed, toy, n_tracks: 3 })?;
            println!("wrote {} clips", files.len());
        }
        Command::Features { input, out } => {
            let files = commands::cmd_features(&input, &out)?;
            println!("wrote {} feature files", files.len());
        }
        Command::Train { config, max_steps } => {
            let mut cfg = RunConfig::load(&config)?;
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            let o = commands::cmd_train(&cfg)?;
            let last = o.report.log.last().map_or(f64::NAN, |l| l.loss);
            println!("{} steps, last loss {last:.6}; checkpoint {}", o.report.log.len(), o.checkpoint.display());
        }
        Command::FinetuneVtm { config, checkpoint, out, steps } => {
            let mut cfg = checkpoint_config(Some(config), &checkpoint)?;
            if let Some(s) = steps {
                cfg.vtm_steps = s;
            }
            let o = commands::cmd_finetune_vtm(&cfg, &checkpoint, &out)?;
            println!("{} steps; checkpoint {}", o.report.log.len(), o.checkpoint.display());
        }
        Command::Infer { config, checkpoint, out, io, ctai, acs_count, ctai_threshold, seq_len, inputs } => {
            let mut cfg = checkpoint_config(config, &checkpoint)?;
            cfg.io |= io;
            cfg.ctai |= ctai;
            if let Some(r) = acs_count {
                cfg.acs_count = r;
            }
            if let Some(t) = ctai_threshold {
                cfg.ctai_threshold = t;
            }
            if let Some(s) = seq_len {
                cfg.seq_len_s = s;
            }
            let clips = commands::cmd_infer(&cfg, &checkpoint, &inputs, &out)?;
            for c in clips {
                println!("{}: {} events -> {}", c.name, c.result.events.len(), c.events_csv.display());
            }
        }
        Command::Eval { pred, reference, classes, out } => {
            let report = commands::cmd_eval(&pred, &reference, classes, out.as_deref())?;
            print!("{report}");
        }
        Command::Analyze { config, checkpoint, input, labels, out } => {
            let cfg = checkpoint_config(config, &checkpoint)?;
            let r = commands::cmd_analyze(&cfg, &checkpoint, &input, labels.as_deref(), &out)?;
            println!("frobenius_distance {:.6}", r.frobenius_distance);
            if let Some((w, x)) = r.within_cross {
                println!("within {w:.6} cross {x:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
