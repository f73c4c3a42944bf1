//! `taton`: equilibrium computation and tatonnement experiments for Fisher markets.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use taton_core::dynamics::{self, Kernel, PolicyConfig, RunConfig};
use taton_core::elasticity::{market_elasticity, sampled_market_elasticity};
use taton_core::experiments::{
    batch_run, generate_market, sigma_groups, BatchConfig, GenConfig, Palette, FULL_SCALE_COUNT,
};
use taton_core::io::{self as tio, ParsedMarket};
use taton_core::oracle::{
    certify_with_method, solve_dual, solve_grid, CertificateMethod, DualConfig, EquilibriumCertificate,
};
use taton_core::Market;

const GRID_CERTIFY_FLOOR: f64 = 1e-12;

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "taton", version, about = "Fisher market equilibria by entropic tatonnement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute equilibrium prices with an oracle and certify them. Exits 0 iff certified.
    Solve {
        market: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Dual)]
        method: Method,
        /// Tolerance for the certificate residuals.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Grid points per simplex edge (grid method).
        #[arg(long, default_value_t = 2001)]
        resolution: usize,
    },
    /// Run tatonnement from the file's initial prices (or B/m per good). Exits 0 iff converged.
    Simulate {
        market: PathBuf,
        /// `theoretical`, `adaptive`, `adaptive=<gamma0>` or `fixed=<gamma>`.
        #[arg(long, default_value = "adaptive")]
        gamma: GammaArg,
        #[arg(long, value_enum, default_value_t = KernelArg::Entropy)]
        kernel: KernelArg,
        #[arg(long, default_value_t = 50_000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Trajectory CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        record_every: usize,
    },
    /// Report analytic and sampled Hicksian elasticity bounds.
    Elasticity {
        market: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write randomly generated market files.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 10)]
        buyers: usize,
        #[arg(long, default_value_t = 5)]
        goods: usize,
        /// Comma-separated `kind[:weight]` list.
        #[arg(long, default_value = "ces,cobb_douglas,leontief")]
        palette: String,
        #[arg(long, default_value = "markets")]
        out: PathBuf,
        /// Keep raw budgets instead of normalizing them to sum to one.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Run a batch study and print its summary as JSON.
    Bench {
        /// JSON file with optional `gen` and `batch` sections; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Full batch result (every market record) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-market records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        palette: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        buyers: Option<usize>,
        #[arg(long)]
        goods: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Use the full 10,000-market batch size.
        #[arg(long, conflicts_with = "count")]
        full: bool,
    },
    /// Certify the given prices as an equilibrium. Exits 0 iff valid.
    Verify {
        market: PathBuf,
        #[arg(required = true, num_args = 1.., allow_negative_numbers = true)]
        prices: Vec<f64>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dual,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Entropy,
    Euclidean,
}

#[derive(Clone, Copy, Debug)]
struct GammaArg(PolicyConfig);

impl FromStr for GammaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let value = |v: &str| -> Result<f64, String> {
            match v.parse::<f64>() {
                Ok(g) if g.is_finite() && g > 0.0 => Ok(g),
                _ => Err(format!("step size must be a positive number, got {v:?}")),
            }
        };
        match s.split_once('=') {
            None if s == "theoretical" => Ok(GammaArg(PolicyConfig::Theoretical)),
            None if s == "adaptive" => Ok(GammaArg(PolicyConfig::default())),
            Some(("adaptive", v)) => Ok(GammaArg(PolicyConfig::Adaptive { initial: value(v)? })),
            Some(("fixed", v)) => Ok(GammaArg(PolicyConfig::Fixed { gamma: value(v)? })),
            _ => Err(format!("expected theoretical, adaptive[=<gamma0>] or fixed=<gamma>, got {s:?}")),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    gen: GenConfig,
    batch: BatchConfig,
}

fn load(path: &Path) -> Result<ParsedMarket, Box<dyn std::error::Error>> {
    let parsed = tio::read_market(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for w in &parsed.warnings {
        eprintln!("{}: {w}", path.display());
    }
    Ok(parsed)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.10}")).collect::<Vec<_>>().join(" ")
}

fn print_certificate(cert: &EquilibriumCertificate) {
    let r = &cert.residuals;
    println!("optimality_gap: {:.3e}", r.optimality_gap);
    println!("clearing: {:.3e}", r.clearing);
    println!("walras: {:.3e}", r.walras);
    println!("certified: {} (tol {:e})", cert.valid, cert.tol);
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn solve(path: &Path, method: Method, tol: f64, resolution: usize) -> CliResult {
    let market = load(path)?.market;
    let (prices, phi, cm) = match method {
        Method::Dual => {
            let sol = solve_dual(&market, &DualConfig::default())?;
            println!("dual_residual: {:.3e}", sol.residual);
            (sol.prices, sol.phi, CertificateMethod::DualMinimization)
        }
        Method::Grid => {
            let sol = solve_grid(&market, resolution)?;
            println!("grid_resolution: {}", sol.resolution);
            (sol.prices, sol.phi, CertificateMethod::Grid)
        }
    };
    println!("prices: {}", fmt_vec(&prices));
    println!("phi: {phi:.12}");
    // Boundary grid points are lifted to a tiny positive price so demand is defined.
    let floor = GRID_CERTIFY_FLOOR * market.total_budget();
    let lifted: Vec<f64> = prices.iter().map(|&p| p.max(floor)).collect();
    let cert = certify_with_method(&market, &lifted, tol, cm)?;
    print_certificate(&cert);
    Ok(status(cert.valid))
}

fn initial_prices(parsed: &ParsedMarket) -> Vec<f64> {
    let m = parsed.market.num_goods();
    parsed.initial_prices.clone().unwrap_or_else(|| vec![parsed.market.total_budget() / m as f64; m])
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    path: &Path,
    gamma: GammaArg,
    kernel: KernelArg,
    iters: usize,
    tol: f64,
    out: Option<&Path>,
    record_every: usize,
) -> CliResult {
    let parsed = load(path)?;
    let p0 = initial_prices(&parsed);
    let config = RunConfig {
        max_iters: iters,
        policy: gamma.0,
        kernel: match kernel {
            KernelArg::Entropy => Kernel::WeightedEntropy,
            KernelArg::Euclidean => Kernel::SquaredEuclidean,
        },
        tol,
        record_every,
    };
    let traj = dynamics::run(&parsed.market, &p0, &config)?;
    if let Some(out) = out {
        let file = File::create(out).map_err(|e| format!("{}: {e}", out.display()))?;
        let mut w = BufWriter::new(file);
        tio::write_trajectory_csv(&traj, &mut w)?;
        w.flush()?;
    }
    println!("termination: {}", traj.termination.label());
    if let dynamics::Termination::Diverged { reason } = &traj.termination {
        eprintln!("diverged: {reason}");
    }
    println!("iterations: {}", traj.iterations);
    println!("prices: {}", fmt_vec(&traj.final_prices));
    println!("phi: {:.12}", traj.final_phi);
    println!("max_excess: {:.3e}", traj.final_max_excess);
    println!("gamma: {} (escalations {})", traj.policy.gamma, traj.policy.events.len());
    Ok(status(traj.termination == dynamics::Termination::Converged))
}

fn elasticity(path: &Path, samples: usize, seed: u64) -> CliResult {
    let market = load(path)?.market;
    let analytic = market_elasticity(&market);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = sampled_market_elasticity(&market, samples, &mut rng)?;
    println!("buyer kind analytic sampled_max");
    for (i, spec) in market.utilities().iter().enumerate() {
        println!("{i} {} {} {:.6}", spec.kind(), analytic.per_buyer[i], sampled.per_buyer[i]);
    }
    println!("epsilon: {}", analytic.epsilon);
    println!("sampled_epsilon: {:.6}", sampled.epsilon);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    seed: u64,
    count: u64,
    buyers: usize,
    goods: usize,
    palette: &str,
    out: &Path,
    no_normalize: bool,
) -> CliResult {
    let config = GenConfig {
        buyers,
        goods,
        palette: Palette::parse(palette)?,
        seed,
        normalize_budgets: !no_normalize,
        ..GenConfig::default()
    };
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    for index in 0..count {
        let (market, p0): (Market, Vec<f64>) = generate_market(&config, index)?;
        let file = out.join(format!("market_{seed}_{index:05}.json"));
        fs::write(&file, tio::market_to_json(&market, Some(&p0))).map_err(|e| format!("{}: {e}", file.display()))?;
        println!("{}", file.display());
    }
    Ok(ExitCode::SUCCESS)
}

struct BenchArgs {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    palette: Option<String>,
    count: Option<usize>,
    buyers: Option<usize>,
    goods: Option<usize>,
    seed: Option<u64>,
    iters: Option<usize>,
    tol: Option<f64>,
    full: bool,
}

fn bench(args: BenchArgs) -> CliResult {
    let BenchFile { gen: mut generator, mut batch } = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => BenchFile::default(),
    };
    if let Some(p) = &args.palette {
        generator.palette = Palette::parse(p)?;
    }
    if let Some(n) = args.buyers {
        generator.buyers = n;
    }
    if let Some(m) = args.goods {
        generator.goods = m;
    }
    if let Some(s) = args.seed {
        generator.seed = s;
    }
    if let Some(c) = args.count {
        batch.count = c;
    }
    if args.full {
        batch.count = FULL_SCALE_COUNT;
    }
    if let Some(t) = args.iters {
        batch.run.max_iters = t;
    }
    if let Some(t) = args.tol {
        batch.run.tol = t;
    }
    let result = batch_run(&generator, &batch)?;
    if let Some(out) = &args.out {
        fs::write(out, tio::batch_to_json(&result)).map_err(|e| format!("{}: {e}", out.display()))?;
    }
    if let Some(path) = &args.csv {
        let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut w = BufWriter::new(file);
        tio::write_records_csv(&result.records, &mut w)?;
        w.flush()?;
    }
    let report = serde_json::json!({
        "palette": generator.palette.to_string(),
        "seed": generator.seed,
        "normalize_budgets": generator.normalize_budgets,
        "summary": result.summary,
        "sigma_groups": sigma_groups(&result.records),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn verify(path: &Path, prices: &[f64], tol: f64) -> CliResult {
    let market = load(path)?.market;
    let cert = certify_with_method(&market, prices, tol, CertificateMethod::Supplied)?;
    print_certificate(&cert);
    Ok(status(cert.valid))
}

fn configure_threads() -> Result<(), Box<dyn std::error::Error>> {
    let Ok(value) = std::env::var("TATON_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TATON_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Solve { market, method, tol, resolution } => solve(&market, method, tol, resolution),
        Command::Simulate { market, gamma, kernel, iters, tol, out, record_every } => {
            simulate(&market, gamma, kernel, iters, tol, out.as_deref(), record_every)
        }
        Command::Elasticity { market, samples, seed } => elasticity(&market, samples, seed),
        Command::Gen { seed, count, buyers, goods, palette, out, no_normalize } => {
            generate(seed, count, buyers, goods, &palette, &out, no_normalize)
        }
        Command::Bench { config, out, csv, palette, count, buyers, goods, seed, iters, tol, full } => {
            bench(BenchArgs { config, out, csv, palette, count, buyers, goods, seed, iters, tol, full })
        }
        Command::Verify { market, prices, tol } => verify(&market, &prices, tol),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
