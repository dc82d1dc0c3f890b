use clap::{Args, Parser, Subcommand};
use msqg_core::params::NoiseMode;
use msqg_core::run::{execute_with_workers, RunConfig, RunError};
use msqg_core::verify::{run_suite, CATALOGUE};
use std::path::PathBuf;
use std::process::ExitCode;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "msqg-forge", version, about = "Convex-integration iterates for stochastic SQG on the 2-torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the noise, build the iterates and write the report.
    Run(RunArgs),
    /// Run the invariant suite without a production run.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<NoiseMode>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 lets the pool decide); does not change any result.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 3 when any invariant of the run fails.
    #[arg(long)]
    strict: bool,
    /// Monte-Carlo path count for P(stopping time >= horizon).
    #[arg(long)]
    paths: Option<usize>,
    /// Run the invariant suite before the production run.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Print the invariant catalogue and exit.
    #[arg(long)]
    list: bool,
}

fn parse_mode(s: &str) -> Result<NoiseMode, String> {
    match s {
        "additive" => Ok(NoiseMode::Additive),
        "multiplicative" => Ok(NoiseMode::Multiplicative),
        _ => Err(format!("unknown mode {s:?}, expected additive or multiplicative")),
    }
}

fn load(common: &Common) -> Result<RunConfig, RunError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = common.mode {
        config.mode = m;
    }
    if let Some(s) = common.stages {
        config.scheme.stages = s;
    }
    if let Some(n) = common.grid {
        config.grid = n;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(config)
}

fn verify(config: &RunConfig, workers: usize) -> Result<i32, RunError> {
    let pool = msqg_core::run::pool(workers)?;
    let outcomes = pool.install(|| run_suite(config.grid, config.seed))?;
    let mut code = 0;
    for o in &outcomes {
        println!("{:<26} {:>12.3e}  tol {:>9.1e}  {}", o.name, o.measured, o.tolerance, if o.holds { "ok" } else { "FAIL" });
        if !o.holds {
            code = 3;
        }
    }
    Ok(code)
}

fn run(args: &RunArgs) -> Result<i32, RunError> {
    let mut config = load(&args.common)?;
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    if let Some(k) = args.paths {
        config.monte_carlo.paths = k;
    }
    config.strict |= args.strict;
    if args.verify {
        let code = verify(&config, args.common.workers)?;
        if code != 0 {
            return Ok(code);
        }
    }
    let out = execute_with_workers(&config, args.common.workers)?;
    out.write(&config.output.dir, config.output.checkpoints)?;
    let r = &out.report;
    println!("stopping time {} ({})", r.stopping.time, r.stopping.rule);
    if let Some(mc) = &r.monte_carlo {
        println!(
            "P(stopping time >= {}) = {:.4} +- {:.4} over {} paths",
            mc.horizon, mc.probability, mc.standard_error, mc.paths
        );
    }
    for s in &r.stages {
        let held = s.inductive.rows.iter().filter(|row| row.holds).count();
        println!("stage {}: {held}/{} inductive bounds hold", s.level, s.inductive.rows.len());
    }
    for f in &r.failures {
        eprintln!("invariant failure: {f}");
    }
    println!("report written to {}", config.output.dir.join("report.json").display());
    Ok(out.exit_code(config.strict))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Verify(args) if args.list => {
            for inv in CATALOGUE {
                println!("{:<26} tol {:>8.1e}  {}", inv.name, inv.tolerance, inv.anchor);
            }
            Ok(0)
        }
        Command::Verify(args) => load(&args.common).and_then(|c| verify(&c, args.common.workers)),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
