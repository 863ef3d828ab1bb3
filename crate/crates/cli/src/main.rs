//! Command-line front end: run the online loop, verify the math, inspect
//! the codebook, or trace one collection episode.
//!
//! Exit codes: 0 on success, 1 on invalid usage or configuration (including
//! argument parse errors), 2 on runtime failures (I/O, numeric guards, or a
//! failed verification suite).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attract::harness::{
    collect_trajectory, online_loop, render_trace_csv, salts, stream_seed, BiasMode, HarnessError,
    RunConfig, ENV_TAG,
};
use attract::vq::{build_table_cached, choose_bins, resolve_cache_dir, Codebook};
use attract::{AttractionTable, PolicyParams, RewardNormalizer};

#[derive(Parser)]
#[command(
    name = "attract",
    version,
    about = "Attraction-weighted action memory in an online decision loop"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the online loop and write metrics.csv to the output directory.
    Run(RunArgs),
    /// Run every verification suite at full scale and report pass/fail.
    Check,
    /// Build the grid codebook and routing table and report their shape.
    Codebook(CodebookArgs),
    /// Collect one episode and write its per-step attraction trace as CSV.
    Trace(TraceArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat TOML keys); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Disable the attraction bias for this run regardless of config.
    #[arg(long)]
    no_bias: bool,
}

#[derive(Args)]
struct CodebookArgs {
    /// Action dimension.
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Requested number of codes.
    #[arg(long, default_value_t = 27)]
    codes: usize,
    /// Grid resolution per dimension; 0 picks it adaptively.
    #[arg(long, default_value_t = 0)]
    bins: u32,
    /// Cache directory for the routing table (falls back to the
    /// ATTRACT_CACHE_DIR environment variable, then to no cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Environment seed of the traced episode (default: derived from the
    /// run seed like the first collection episode of a run).
    #[arg(long)]
    episode_seed: Option<u64>,
}

/// Failures split by whose fault they are, for the exit code.
enum CliError {
    /// Bad usage or configuration -> exit 1.
    Validation(String),
    /// The tool itself failed at runtime -> exit 2.
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set wants KEY=VALUE, got '{kv}'")))?;
        cfg.set_override(key, value)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let mode = if args.no_bias { BiasMode::ForceOff } else { BiasMode::Auto };
    let out = online_loop(&cfg, mode)?;
    let last = out.series.rows().last().expect("a run always records its initial row");
    println!(
        "run finished: {} episodes, {} env steps, {} evaluation rows",
        out.episodes,
        out.env_steps,
        out.series.rows().len()
    );
    println!("final evaluation return (shifted gm): {}", last.return_mean_gm);
    println!("routing table: {:?}", out.cache);
    println!("metrics written to {}", out.metrics_path.display());
    Ok(())
}

fn cmd_check() -> Result<(), CliError> {
    let reports = attract::verify::run_all();
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} suites passed", reports.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failed} of {} suites failed", reports.len())))
    }
}

fn cmd_codebook(args: &CodebookArgs) -> Result<(), CliError> {
    let bins_req = if args.bins == 0 { None } else { Some(args.bins) };
    let (bins, m) = choose_bins(args.dim, args.codes, bins_req)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let codebook =
        Codebook::build(args.dim, m, bins).map_err(|e| CliError::Validation(e.to_string()))?;
    let dir = resolve_cache_dir(args.cache_dir.as_deref());
    let (table, outcome) = build_table_cached(&codebook, ENV_TAG, dir.as_deref())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "codebook: {} codes on a {}^{} grid ({} cells)",
        m,
        bins,
        args.dim,
        table.entries().len()
    );
    println!("cache: {outcome:?}");
    for (i, code) in codebook.codes().iter().enumerate().take(8) {
        println!("  code {i}: {code:?}");
    }
    if m > 8 {
        println!("  ... {} more", m - 8);
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let (bins, m) = choose_bins(cfg.action_dim, cfg.codes, cfg.bins_request())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let codebook =
        Codebook::build(cfg.action_dim, m, bins).map_err(|e| CliError::Runtime(e.to_string()))?;
    let explicit = (!cfg.cache_dir.is_empty()).then(|| PathBuf::from(&cfg.cache_dir));
    let dir = resolve_cache_dir(explicit.as_deref());
    let (grid, _) = build_table_cached(&codebook, ENV_TAG, dir.as_deref())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut table = AttractionTable::new(m, cfg.ewa_params())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut normalizer = RewardNormalizer::new(cfg.reward_clip)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut init_rng = rand_seeded(stream_seed(cfg.seed, salts::INIT, 0));
    let params = PolicyParams::init(cfg.backbone_config(), cfg.beta_entropy, &mut init_rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut policy_rng = rand_seeded(stream_seed(cfg.seed, salts::POLICY, 0));
    let episode_seed = args
        .episode_seed
        .unwrap_or_else(|| stream_seed(cfg.seed, salts::COLLECT_ENV, 0));

    let bias = attract::harness::resolve_bias(&cfg, BiasMode::Auto);
    let traj = collect_trajectory(
        &params,
        &mut table,
        &mut normalizer,
        &grid,
        &cfg,
        episode_seed,
        &mut policy_rng,
        bias.as_ref(),
    )?;

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = Path::new(&cfg.output_dir).join("trace.csv");
    std::fs::write(&path, render_trace_csv(&traj))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "episode seed {}: {} steps, return {}",
        episode_seed,
        traj.len(),
        traj.total_return()
    );
    println!("trace written to {}", path.display());
    Ok(())
}

fn rand_seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (with usage); keep exit code 1
            // for every usage problem, while --help/--version stay success.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Check => cmd_check(),
        Cmd::Codebook(args) => cmd_codebook(args),
        Cmd::Trace(args) => cmd_trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
