use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use routekit::app::{self, AppError, RouteOptions};
use routekit::config::{EngineConfig, CONFIG_ENV};
use routekit_core::bench::{CostAxis, Toggle};

const USAGE_EXIT: u8 = 64;

#[derive(Parser)]
#[command(name = "routekit", version, about = "Generate, benchmark and compare solution programs for visual tasks")]
struct Cli {
    /// Engine configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Time,
    Money,
}

#[derive(Subcommand)]
enum Command {
    /// Check a task specification.
    Validate { task: PathBuf },
    /// Run routing sessions and write the solution pool.
    Route {
        task: PathBuf,
        #[arg(long)]
        budget: usize,
        /// Committee roles to remove, comma separated.
        #[arg(long, value_parser = roles_arg)]
        ablate: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a pool and write curve.csv / curve.svg.
    Bench {
        task: PathBuf,
        pool: PathBuf,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "time")]
        cost_axis: Axis,
    },
    /// Ablation table over committee configurations.
    Ablate {
        task: PathBuf,
        /// e.g. full,-code_debugger,-code_checker
        #[arg(
            long,
            default_value = "full,-code_debugger,-code_checker,-requirement_checker,-repetition_checker",
            value_parser = toggles_arg
        )]
        toggles: String,
        #[arg(long, default_value_t = 3)]
        budget: usize,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Performance of every iteration's candidate in a run.
    Trace {
        task: PathBuf,
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run routing from a recorded gateway transcript.
    Replay {
        task: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report { run_dir: PathBuf },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn roles_arg(s: &str) -> Result<String, String> {
    app::parse_roles(s).map(|_| s.to_owned()).map_err(|e| e.to_string())
}

fn toggles_arg(s: &str) -> Result<String, String> {
    app::parse_toggles(s).map(|_| s.to_owned()).map_err(|e| e.to_string())
}

fn load_config(explicit: Option<&Path>) -> anyhow::Result<EngineConfig> {
    Ok(EngineConfig::load(EngineConfig::locate(explicit)?)?)
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config = || load_config(cli.config.as_deref()).map_err(AppError::from);
    match cli.command {
        Command::Validate { task } => {
            let spec = app::load_task(&task)?;
            println!("{}: valid ({} instances, {} examples)", task.display(), spec.instances.len(), spec.example_count);
        }
        Command::Route { task, budget, ablate, out } => {
            let cfg = config()?;
            let spec = app::load_task(&task)?;
            let removed = app::parse_roles(ablate.as_deref().unwrap_or(""))?;
            let summary = app::route(&cfg, &spec, &RouteOptions { budget, removed, out, ..Default::default() })?;
            for o in &summary.outcomes {
                println!("{}  {:?}  iterations={}", o.session_id, o.kind, o.iterations_used);
            }
            println!("pool: {} solution(s) in {}", summary.pool.len(), summary.run_dir.join(app::POOL_FILE).display());
        }
        Command::Bench { task, pool, metric, out, cost_axis } => {
            let cfg = config()?;
            let spec = app::load_task(&task)?;
            let axis = match cost_axis {
                Axis::Time => CostAxis::Time,
                Axis::Money => CostAxis::Money,
            };
            let summary = app::bench(&cfg, &spec, &pool, metric.as_deref(), out, axis)?;
            println!("metric: {} ({:?})", summary.metric.metric_name, summary.metric.chosen_by);
            for r in &summary.records {
                println!(
                    "{}  p={}  c_time={:.4}s  c_money=${}  error_rate={}",
                    r.solution_id, r.p, r.c_time, r.c_money, r.error_rate
                );
            }
            println!("curve: {}", summary.out_dir.join("curve.csv").display());
        }
        Command::Ablate { task, toggles, budget, runs, metric, out } => {
            let cfg = config()?;
            let spec = app::load_task(&task)?;
            let toggles: Vec<Toggle> = app::parse_toggles(&toggles)?;
            let (path, rows) = app::ablate(&cfg, &spec, &toggles, budget, runs, metric.as_deref(), out)?;
            for r in &rows {
                match &r.failure {
                    Some(f) => println!("{}  FAILED: {f}", r.config),
                    None => println!(
                        "{}  acc={}  error_rate={}  avg_num_solutions={}",
                        r.config,
                        r.acc.unwrap_or_default(),
                        r.error_rate.unwrap_or_default(),
                        r.avg_num_solutions.unwrap_or_default()
                    ),
                }
            }
            println!("table: {}", path.display());
        }
        Command::Trace { task, runs_dir, metric, out } => {
            let cfg = config()?;
            let spec = app::load_task(&task)?;
            let (path, points) = app::trace(&cfg, &spec, &runs_dir, metric.as_deref(), out)?;
            for p in &points {
                println!(
                    "{}  iteration {}  p={}{}",
                    p.session_id,
                    p.iteration,
                    p.p,
                    if p.error { "  (all executions failed)" } else { "" }
                );
            }
            println!("trace: {}", path.display());
        }
        Command::Replay { task, transcript, budget, out } => {
            let cfg = config()?;
            let spec = app::load_task(&task)?;
            let summary = app::replay(&cfg, &spec, &transcript, budget, out)?;
            let pool_path = summary.route.run_dir.join(app::POOL_FILE);
            match summary.matches_original {
                Some(true) => println!("replayed pool is identical to the original: {}", pool_path.display()),
                Some(false) => {
                    return Err(
                        anyhow::anyhow!("replayed pool {} differs from the original run", pool_path.display()).into()
                    );
                }
                None => println!("replayed pool: {}", pool_path.display()),
            }
        }
        Command::Report { run_dir } => print!("{}", app::report(&run_dir)?),
        Command::Serve { addr } => {
            let cfg = config()?;
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            rt.block_on(routekit::service::serve(cfg, &addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Validation(report)) => {
            eprint!("{}", app::describe_violations(&report));
            eprintln!("error: task specification is invalid");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
