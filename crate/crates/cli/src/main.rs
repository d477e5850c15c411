use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use keylab_core::experiments::{
    aggregate_runs, bench_designs, emit_bench_csv, emit_csv, run_experiment, ExperimentConfig,
    ExperimentError, RunOptions, PRESETS,
};
use keylab_core::keystore::Design;
use keylab_core::kmlink::KmRole;
use keylab_service::{Node, ServiceConfig};

/// QKD key-manager storage experiments, benchmarks and key delivery service.
#[derive(Parser)]
#[command(name = "keylab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV tables.
    Run(RunArgs),
    /// Time supply-key creation of several designs on one request sequence.
    Bench(BenchArgs),
    /// Serve keys over HTTP as one key manager of a pair.
    Serve(ServeArgs),
    /// List the built-in presets, or print one as JSON.
    Presets {
        /// Preset to print.
        name: Option<String>,
    },
}

#[derive(Args)]
struct Source {
    /// Built-in experiment.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Experiment description in JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `km.default_key_size_bytes=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the full repetition count.
    #[arg(long)]
    full: bool,
    /// Explicit repetition count.
    #[arg(long, conflicts_with = "full")]
    runs: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    source: Source,
    /// Comma-separated designs to compare.
    #[arg(long, value_delimiter = ',', default_value = "hash,queue,deque")]
    designs: Vec<String>,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address.
    #[arg(long, env = "KEYLAB_BIND", default_value = "127.0.0.1:8080")]
    bind: String,
    /// Address of the peer key manager.
    #[arg(long, env = "KEYLAB_PEER")]
    peer: Option<String>,
    #[arg(long, default_value = "master")]
    role: String,
    #[arg(long, default_value = "deque")]
    design: String,
    /// Default key size of the common store, in bytes.
    #[arg(long, default_value_t = 32)]
    default_key_size: usize,
    /// Retry hint sent with 503 answers, in seconds.
    #[arg(long, default_value_t = 0.1)]
    hold_time: f64,
    #[arg(long)]
    sae_id: Option<String>,
    #[arg(long)]
    peer_sae_id: Option<String>,
    /// Fixed seed for ids; operating-system entropy otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

/// Failures split by exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn load(source: &Source) -> Result<ExperimentConfig, Failure> {
    let base = match (&source.preset, &source.config) {
        (Some(name), None) => ExperimentConfig::preset(name)?,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        _ => {
            return Err(Failure::Config(anyhow::anyhow!(
                "name exactly one of --preset or --config"
            )))
        }
    };
    Ok(base.with_overrides(&source.overrides)?)
}

fn out_dir(source: &Source, cfg: &ExperimentConfig, sub: &str) -> PathBuf {
    source
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(format!("{}{sub}", cfg.name)))
}

fn options(source: &Source) -> RunOptions {
    RunOptions {
        full: source.full,
        runs: source.runs,
    }
}

fn write_config(dir: &std::path::Path, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json_pretty())
        .with_context(|| format!("{}", path.display()))
        .map_err(Failure::Runtime)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load(&args.source)?;
    let opts = options(&args.source);
    let total = opts.run_count(&cfg) * cfg.cells().len() as u64;
    let mut done = 0;
    let records = run_experiment(&cfg, opts, |_| {
        done += 1;
        if done % 50 == 0 || done == total {
            eprintln!("{done}/{total} runs");
        }
    })?;
    let summary = aggregate_runs(&records)?;
    let dir = out_dir(&args.source, &cfg, "");
    let written = emit_csv(&summary, &dir)?;
    write_config(&dir, &cfg)?;
    println!("{}: {}", cfg.name, summary.render().trim_end());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let designs = args
        .designs
        .iter()
        .map(|d| d.parse::<Design>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Config(e.into()))?;
    let cfg = load(&args.source)?;
    let opts = options(&args.source);
    let runs = opts.run_count(&cfg);
    let report = bench_designs(&cfg, &designs, opts, |r| {
        if r % 25 == 0 || r == runs {
            eprintln!("{r}/{runs} runs");
        }
    })?;
    let dir = out_dir(&args.source, &cfg, "-bench");
    let written = emit_bench_csv(&report, &dir)?;
    write_config(&dir, &cfg)?;
    println!(
        "{} runs, designs {}, identical requests: {}",
        report.runs,
        designs.iter().map(|d| d.name()).collect::<Vec<_>>().join(","),
        report.identical_requests()
    );
    println!("{:<8} {:>10} {:>12}", "design", "supplies", "mean us");
    for d in &designs {
        let mut n = 0;
        let mut sum = 0.0;
        for (k, s) in &report.timing {
            if k.design == *d {
                n += s.n();
                sum += s.mean() * s.n() as f64;
            }
        }
        println!("{:<8} {:>10} {:>12.3}", d.name(), n, sum / n.max(1) as f64);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let cfg = (|| -> anyhow::Result<ServiceConfig> {
        let role: KmRole = args.role.parse()?;
        let design: Design = args.design.parse()?;
        anyhow::ensure!(args.default_key_size > 0, "--default-key-size must be positive");
        anyhow::ensure!(
            args.hold_time.is_finite() && args.hold_time >= 0.0,
            "--hold-time must be non-negative"
        );
        let mut cfg = ServiceConfig::new(role, design, args.default_key_size);
        if let Some(peer) = &args.peer {
            cfg = cfg.with_peer(peer.clone());
        }
        cfg.hold_time = Duration::from_secs_f64(args.hold_time);
        cfg.seed = args.seed;
        if let Some(id) = &args.sae_id {
            cfg.sae_id = id.clone();
        }
        if let Some(id) = &args.peer_sae_id {
            cfg.peer_sae_id = id.clone();
        }
        Ok(cfg)
    })()
    .map_err(Failure::Config)?;
    let rt = tokio::runtime::Runtime::new()
        .context("starting the runtime")
        .map_err(Failure::Runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        let node = Node::start(cfg.clone())?;
        tracing::info!(
            bind = %listener.local_addr()?,
            role = %cfg.role,
            design = %cfg.settings.design,
            peer = cfg.peer.as_deref().unwrap_or("-"),
            "serving"
        );
        keylab_service::serve(listener, node).await?;
        anyhow::Ok(())
    })
    .map_err(Failure::Runtime)
}

fn presets(name: Option<String>) -> Result<(), Failure> {
    match name {
        Some(n) => println!("{}", ExperimentConfig::preset(&n)?.to_json_pretty()),
        None => {
            for n in PRESETS {
                let cfg = ExperimentConfig::preset(n)?;
                println!(
                    "{n:<14} design {:<6} {} runs ({} with --full)",
                    cfg.km.design, cfg.runs, cfg.full_runs
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Presets { name } => presets(name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
