use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use lkik_core::coefficients::{
    adaptive_coefficients, mve_program_coefficients, sampling_overhead, taylor_coefficients,
};
use lkik_core::experiment::{
    self, drift_rows, drift_summary, magnus_scan, to_csv, write_atomic, CircuitSource, DriftConfig,
    DriftShape, ExperimentConfig, Progress,
};
use lkik_core::shots::Policy;
use lkik_core::{exec, magnus, Error, Result};

#[derive(Parser)]
#[command(
    name = "lkik",
    version,
    about = "Layered KIK error-mitigation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its CSV and manifest.
    Run(RunArgs),
    /// Check a config and print it with defaults filled in.
    Validate { config: PathBuf },
    /// Print a mitigation coefficient table as CSV.
    Coeffs(CoeffArgs),
    /// Magnus report and bias-versus-bound scan.
    Magnus(MagnusArgs),
    /// Drift-resilience shot simulation, CSV on stdout.
    Drift(DriftArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; overrides LKIK_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Suppress per-point progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("table").required(true).args(["taylor", "adaptive", "mve"])))]
struct CoeffArgs {
    /// Taylor weights of order M.
    #[arg(long, value_name = "M")]
    taylor: Option<usize>,
    /// Adaptive weights of order M for echo-squared g.
    #[arg(long, num_args = 2, value_names = ["M", "G"])]
    adaptive: Option<Vec<String>>,
    /// Multivariate weights for L layers at the given order.
    #[arg(long, num_args = 2, value_names = ["L", "ORDER"])]
    mve: Option<Vec<usize>>,
}

#[derive(Args)]
struct MagnusArgs {
    /// Circuit file or builtin:<name>.
    #[arg(long, default_value = "builtin:chain")]
    circuit: String,
    #[arg(long, default_value_t = 0.02)]
    xi: f64,
    /// Layer counts for the bias scan.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    layers: Vec<usize>,
    /// Layer count of the circuit whose full Ω₂ decomposition is reported.
    #[arg(long, default_value_t = 2)]
    report_layers: usize,
    #[arg(long, default_value_t = 16)]
    quadrature: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long, value_delimiter = ',', default_value = "2")]
    orders: Vec<usize>,
    /// Seeds; `a..b` ranges are inclusive.
    #[arg(long, default_value = "1..200")]
    seeds: String,
    #[arg(long, default_value_t = 4)]
    gates: usize,
    #[arg(long, default_value_t = 20)]
    n_hop: u64,
    #[arg(long, default_value_t = 200)]
    rounds: u64,
    #[arg(long, default_value_t = 0.3)]
    before: f64,
    #[arg(long, default_value_t = 0.5)]
    after: f64,
    #[arg(long, default_value = "abrupt")]
    shape: String,
    #[arg(long, default_value_t = 0.5)]
    switch_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "hopping,sequential")]
    policies: Vec<String>,
    /// Print the replicate summary as JSON on stderr.
    #[arg(long)]
    summary: bool,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut points = Vec::new();
    let mut cur = e;
    while let Error::AtPoint { point, source } = cur {
        points.push(point.clone());
        cur = source;
    }
    serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": cur.to_string(),
            "point": if points.is_empty() { None } else { Some(points.join("; ")) },
        }
    })
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn progress(p: &Progress) {
    eprintln!("[{}/{}] {}", p.done, p.total, p.point);
}

fn silent(_: &Progress) {}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = experiment::validate_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = Some(vec![seed]);
    }
    let dir = cfg.output_dir(args.out.as_deref());
    let report: &(dyn Fn(&Progress) + Sync) = if args.quiet { &silent } else { &progress };
    let out = exec::with_threads(args.threads, || experiment::run_experiment(&cfg, report))?;
    let paths = experiment::write_outputs(&dir, &out)?;
    emit(
        &paths
            .iter()
            .map(|p| format!("{}\n", p.display()))
            .collect::<String>(),
    )
}

fn validate(path: &Path) -> Result<()> {
    let cfg = experiment::validate_config(path)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&cfg)?))
}

fn parse<T: std::str::FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{s}`")))
}

fn coeffs(args: CoeffArgs) -> Result<()> {
    let set = if let Some(m) = args.taylor {
        taylor_coefficients(m)?
    } else if let Some(v) = args.adaptive {
        adaptive_coefficients(parse("adaptive.M", &v[0])?, parse("adaptive.g", &v[1])?)?
    } else if let Some(v) = args.mve {
        mve_program_coefficients(v[0], v[1])?
    } else {
        unreachable!("clap requires one table")
    };
    let (gamma, gamma2) = sampling_overhead(&set);
    let mut out = String::from("index,weight,amplification,gamma,gamma2\n");
    for (i, e) in set.entries.iter().enumerate() {
        out += &format!(
            "{i},{},{},{gamma},{gamma2}\n",
            e.weight,
            e.amplification.label()
        );
    }
    emit(&out)
}

fn magnus_cmd(args: MagnusArgs) -> Result<()> {
    let source = CircuitSource::resolve(&args.circuit, Path::new("."))?;
    let dir = ExperimentConfig::of_kind(experiment::ExperimentKind::LayerSweep)
        .output_dir(args.out.as_deref());
    let (rows, summary) = exec::with_threads(args.threads, || -> Result<_> {
        let rows = magnus_scan(&source, args.xi, &args.layers)?;
        let circ = source.build(args.xi, args.report_layers, true)?;
        let report = magnus::omega2(&circ, args.quadrature)?;
        Ok((rows, report.summary()))
    })?;
    let report =
        serde_json::json!({ "xi": args.xi, "layers": args.report_layers, "report": summary });
    std::fs::create_dir_all(&dir)?;
    let csv = write_atomic(&dir.join("magnus_scan.csv"), &to_csv(&rows)?)?;
    let json = write_atomic(
        &dir.join("magnus_report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    emit(&format!("{}\n{}\n", csv.display(), json.display()))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse("seeds", a)?, parse("seeds", b)?);
                if a > b {
                    return Err(Error::config("seeds", format!("empty range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse("seeds", part)?),
        }
    }
    if out.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    Ok(out)
}

fn drift_cmd(args: DriftArgs) -> Result<()> {
    let shape = match args.shape.as_str() {
        "abrupt" => DriftShape::Abrupt,
        "ramp" => DriftShape::Ramp,
        other => {
            return Err(Error::config(
                "shape",
                format!("unknown drift shape `{other}`"),
            ))
        }
    };
    let policies = args
        .policies
        .iter()
        .map(|p| match p.as_str() {
            "hopping" => Ok(Policy::Hopping),
            "sequential" => Ok(Policy::Sequential),
            other => Err(Error::config(
                "policies",
                format!("unknown policy `{other}`"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let drift = DriftConfig {
        gates: args.gates,
        n_hop: args.n_hop,
        rounds: args.rounds,
        before: args.before,
        after: args.after,
        shape,
        switch_fraction: args.switch_fraction,
        policies,
    };
    // Reuse the experiment validation for the drift block.
    let mut cfg = ExperimentConfig::of_kind(experiment::ExperimentKind::DriftDemo);
    cfg.orders = Some(args.orders.clone());
    cfg.seeds = Some(parse_seeds(&args.seeds)?);
    cfg.drift = Some(drift.clone());
    let cfg = cfg.normalize()?;
    let seeds = cfg.seeds.clone().unwrap_or_default();
    let rows = exec::with_threads(args.threads, || {
        drift_rows(&drift, &args.orders, &seeds, &silent)
    })?;
    emit(&String::from_utf8_lossy(&to_csv(&rows)?))?;
    if args.summary {
        eprintln!("{}", serde_json::to_string_pretty(&drift_summary(&rows))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": msg.trim(), "point": null } })
            );
            return ExitCode::from(2);
        }
    };
    let res = match cli.command {
        Command::Run(a) => run(a),
        Command::Validate { config } => validate(&config),
        Command::Coeffs(a) => coeffs(a),
        Command::Magnus(a) => magnus_cmd(a),
        Command::Drift(a) => drift_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
