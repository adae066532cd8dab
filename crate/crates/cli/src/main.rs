use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttdioc_cli::run::{self, CliError, Context, SweepKind};

#[derive(Parser, Debug)]
#[command(name = "ttdioc", version = env!("TTDIOC_VERSION"), about = "Inverse optimal control of time-varying cost weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset seed (overrides `data.seed`).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and validation demonstrations.
    Generate(Common),
    /// Solve one forward problem from the first initial state.
    SolveForward(Common),
    /// Fit constant weights.
    Spioc(Common),
    /// Fit trigonometric time-dependent weights.
    Ttd(Common),
    /// Sliding-window Kalman estimate.
    Kf(Common),
    /// Parameter sweeps.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
    },
    /// Revalidate a saved solution on the configured validation split.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Solution file written by `spioc` or `ttd`.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TTDIOC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let (name, common) = match &command {
        Command::Generate(c) => ("generate", c),
        Command::SolveForward(c) => ("solve-forward", c),
        Command::Spioc(c) => ("spioc", c),
        Command::Ttd(c) => ("ttd", c),
        Command::Kf(c) => ("kf", c),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::Validate { common, .. } => ("validate", common),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
    }
    let ctx = Context::open(name, &common.config, common.out.clone(), common.seed)?;
    let result = match command {
        Command::Generate(_) => run::generate(&ctx),
        Command::SolveForward(_) => run::solve_forward(&ctx),
        Command::Spioc(_) => run::spioc(&ctx),
        Command::Ttd(_) => run::ttd(&ctx),
        Command::Kf(_) => run::kf(&ctx),
        Command::Sweep { kind, .. } => run::sweep(&ctx, kind),
        Command::Validate { model, .. } => run::validate(&ctx, &model),
    };
    ctx.finish(result.is_ok())?;
    result
}
