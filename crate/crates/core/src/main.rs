use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use insenskit::config::ScenarioConfig;
use insenskit::scenario::{run_scenario, write_outputs, RunOptions, Subcommand};

#[derive(Parser)]
#[command(name = "insenskit", version, about = "Insensitizing controls for the heat equation under domain variations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Checks the boundary formula for the shape derivative against re-solves.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Synthesizes a control.
    #[command(subcommand)]
    Run(RunCommand),
}

#[derive(ClapSubcommand)]
enum VerifyCommand {
    ShapeDerivative(Common),
}

#[derive(ClapSubcommand)]
enum RunCommand {
    /// Approximate insensitizing, optionally with a terminal goal.
    Approx(Common),
    /// Exact insensitizing for a finite set of directions.
    ExactFd(Common),
    /// Explicit cutoff construction.
    Constructive(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for randomized restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solve independent subproblems concurrently.
    #[arg(long)]
    parallel: bool,
    /// Output directory; overrides `[output].dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (sub, args) = match cli.command {
        Command::Verify(VerifyCommand::ShapeDerivative(a)) => (Subcommand::VerifyShapeDerivative, a),
        Command::Run(RunCommand::Approx(a)) => (Subcommand::RunApprox, a),
        Command::Run(RunCommand::ExactFd(a)) => (Subcommand::RunExactFd, a),
        Command::Run(RunCommand::Constructive(a)) => (Subcommand::RunConstructive, a),
    };
    match execute(sub, &args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("insenskit: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(sub: Subcommand, args: &Common) -> insenskit::Result<u8> {
    if !args.parallel {
        // Sequential unless asked otherwise; ignore the error if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cfg = ScenarioConfig::load(&args.config)?;
    let art = run_scenario(
        &cfg,
        sub,
        RunOptions {
            seed: args.seed,
            parallel: args.parallel,
        },
    )?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("insenskit-out"));
    let files = write_outputs(&art, &dir, cfg.output.control)?;
    let r = &art.report;
    // A closed stdout must not turn a finished run into a failure.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} [{}]: {:?} in {:.2} s", sub.label(), r.run_id, r.outcome, r.wall_time_s);
    for f in files {
        let _ = writeln!(out, "  wrote {}", f.display());
    }
    Ok(r.exit_code() as u8)
}
