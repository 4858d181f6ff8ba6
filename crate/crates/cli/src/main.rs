use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use billiardlab::billiard::SpeedBand;
use billiardlab::cli::{self, CliError, Outcome, RunConfig};
use clap::{Parser, Subcommand};

/// Open billiards among convex obstacles: scene checks, periodic orbits,
/// pressure sums and amplitude decay.
#[derive(Parser, Debug)]
#[command(name = "billiardlab", version)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Scene file (JSON).
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Longest word length to enumerate.
    #[arg(long, global = true, default_value_t = 8)]
    max_len: usize,
    #[arg(long, global = true, default_value_t = 0.0)]
    alpha: f64,
    /// Upper end of the bisection bracket for the critical exponent.
    #[arg(long, global = true)]
    alpha_max: Option<f64>,
    #[arg(long, global = true, default_value_t = 40.0)]
    t_max: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    speed_min: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    speed_max: f64,
    /// Primary output file; sidecars get a suffix. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Weight each orbit/reversal pair once.
    #[arg(long, global = true)]
    merge_reversal: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the scene and test the no-eclipse condition.
    SceneCheck,
    /// Enumerate primitive periodic orbits up to --max-len.
    Orbits,
    /// Shell sums of the pressure series and the critical exponent.
    Ikawa,
    /// Amplitude decay profile on [0, --t-max].
    Decay,
    /// Convergence of the amplitude along repetitions of one periodic word.
    Convergence {
        /// Word such as 1-2-3.
        #[arg(long)]
        word: String,
        #[arg(long, default_value_t = 0)]
        remainder: usize,
        #[arg(long, default_value_t = 6)]
        r_max: usize,
    },
    /// Follow one broken ray.
    Trace {
        #[arg(long, num_args = 3, allow_negative_numbers = true, value_names = ["X", "Y", "Z"])]
        pos: Vec<f64>,
        #[arg(long, num_args = 3, allow_negative_numbers = true, value_names = ["X", "Y", "Z"])]
        dir: Vec<f64>,
        #[arg(long, default_value_t = 100.0)]
        time: f64,
        #[arg(long, default_value_t = 10_000)]
        max_events: usize,
    },
    /// Randomised checks of the flow near tangencies and near the trapped set.
    Probe {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
    },
}

fn config(args: &Args) -> Result<RunConfig, CliError> {
    let scene = args
        .scene
        .clone()
        .ok_or_else(|| CliError::Input("--scene is required".into()))?;
    let band = SpeedBand::new(args.speed_min, args.speed_max)
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(RunConfig {
        scene,
        max_len: args.max_len,
        alpha: args.alpha,
        alpha_max: args.alpha_max,
        t_max: args.t_max,
        band,
        out: args.out.clone(),
        seed: args.seed,
        merge_reversal: args.merge_reversal,
    })
}

fn run(args: &Args) -> Result<Outcome, CliError> {
    let cfg = config(args)?;
    match &args.command {
        Command::SceneCheck => cli::cmd_scene_check(&cfg),
        Command::Orbits => cli::cmd_orbits(&cfg),
        Command::Ikawa => cli::cmd_ikawa(&cfg),
        Command::Decay => cli::cmd_decay(&cfg),
        Command::Convergence {
            word,
            remainder,
            r_max,
        } => cli::cmd_convergence(&cfg, word, *remainder, *r_max),
        Command::Trace {
            pos,
            dir,
            time,
            max_events,
        } => cli::cmd_trace(
            &cfg,
            [pos[0], pos[1], pos[2]],
            [dir[0], dir[1], dir[2]],
            *time,
            *max_events,
        ),
        Command::Probe { samples, eta } => cli::cmd_probe(&cfg, *samples, *eta),
    }
}

fn threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BILLIARDLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Input(format!(
            "BILLIARDLAB_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(e.to_string()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = threads().and_then(|_| run(&args));
    match outcome {
        Ok(o) => {
            // The primary artifact may own stdout, so the summary goes to stderr.
            eprint!("{}", o.summary);
            match o.write(args.out.as_deref()) {
                Ok(Some(primary)) => {
                    let _ = std::io::stdout().lock().write_all(primary.as_bytes());
                }
                Ok(None) => {}
                Err(e) => {
                    eprintln!("error: cannot write output: {e}");
                    return ExitCode::from(2);
                }
            }
            ExitCode::from(o.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
