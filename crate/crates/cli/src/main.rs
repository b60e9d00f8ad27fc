use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mpdr::data::LabelColumn;
use mpdr_cli::commands::{self, Options};
use mpdr_cli::CliError;

/// Manifold projection-diffusion recovery experiments.
#[derive(Parser, Debug)]
#[command(name = "mpdr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit every configured autoencoder and write one checkpoint each.
    PretrainAe(Common),
    /// Train the energy against the pretrained ensemble.
    Train(Common),
    /// Score test inliers and outliers with a trained energy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// CSV of inliers (defaults to the configured test split).
        #[arg(long)]
        inliers: Option<PathBuf>,
        /// CSV of outliers (defaults to the configured test split).
        #[arg(long)]
        outliers: Option<PathBuf>,
    },
    /// Dump energy and normalized density on the configured 2D grid.
    DensityGrid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Draw negatives for the first training rows and dump them.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Whether the last CSV column holds labels.
    #[arg(long, value_enum)]
    label_col: Option<LabelArg>,
    /// Skip the sphere re-projection of noisy latents.
    #[arg(long)]
    no_latent_reproject: bool,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Energy checkpoint (defaults to `energy.ckpt` in the output directory).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelArg {
    None,
    Last,
}

impl Common {
    fn options(self) -> Options {
        Options {
            config: self.config,
            seed: self.seed,
            out: self.out,
            label_col: self.label_col.map(|l| match l {
                LabelArg::None => LabelColumn::None,
                LabelArg::Last => LabelColumn::Last,
            }),
            no_latent_reproject: self.no_latent_reproject,
            ..Options::default()
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MPDR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("MPDR_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new("E_THREADS", e.to_string()))
}

fn run(cli: Cli) -> Result<Vec<mpdr_cli::record::Record>, CliError> {
    init_threads()?;
    match cli.command {
        Command::PretrainAe(c) => commands::pretrain_ae(&c.options()),
        Command::Train(c) => commands::train_cmd(&c.options()),
        Command::Eval {
            common,
            model,
            inliers,
            outliers,
        } => commands::eval(&Options {
            model: model.model,
            inliers,
            outliers,
            ..common.options()
        }),
        Command::DensityGrid { common, model } => commands::density_grid(&Options {
            model: model.model,
            ..common.options()
        }),
        Command::Sample { common, model } => commands::sample(&Options {
            model: model.model,
            ..common.options()
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::new("E_USAGE", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(records) => {
            for r in records {
                println!("{r}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
