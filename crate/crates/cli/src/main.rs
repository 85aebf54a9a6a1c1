//! `gpcsi` command-line front end.
//!
//! Subcommands: `sweep`, `estimate`, `demo-slice`, `gradcheck`, `psd-check`.
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical
//! failure, 4 property-check violation.
//!
//! Output formats:
//! - CSV files are comma-separated with a header row and `.` decimals.
//! - Matrix dumps (`*.mat`) hold a header line `rows cols` followed by one
//!   `re,im` line per entry in row-major order.
//! - `manifest.toml` is the fully resolved configuration plus a `[manifest]`
//!   table; passing it back as `--config` replays the run byte-identically.

use clap::{Args, Parser, Subcommand};
use gpcsi::checks::{run_gradcheck, run_psd_check};
use gpcsi::eval::{
    run_monte_carlo, run_single, summarize, write_rows_csv, write_timings_csv, EstimatorKind, ExperimentConfig, ResultRow,
};
use gpcsi::gpr::{credible_interval, GpModel};
use gpcsi::kernel::ArrayPair;
use gpcsi::lattice::{ActiveSet, IndexPair, UraGeometry};
use gpcsi::learn::{optimize, variance_matched_init};
use gpcsi::pilot::{db_to_linear, observe};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const DEMO_OMEGA: [usize; 6] = [1, 4, 7, 10, 13, 16];

#[derive(Parser)]
#[command(name = "gpcsi", version, about = "GP-based MIMO channel estimation: sweeps, demos and property checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sweep over SNR, pilot budget and trials.
    Sweep(Common),
    /// One trial at the first SNR point and first pilot budget, with matrix dumps.
    Estimate(Common),
    /// 1-D receive slice reconstructed from six transmit pilots.
    DemoSlice(Common),
    /// Finite-difference check of the likelihood gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Kernel positive-semidefiniteness and lattice-shift invariance.
    PsdCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 64)]
        max_points: usize,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file (TOML). A previous run's manifest.toml works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set learn.restarts=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated estimator list (genie,gpr,ls,mmse,omp,amp).
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Config(String),
    Numerical(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Check(m) => write!(f, "property check failed: {m}"),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn eval_err(e: gpcsi::eval::EvalError) -> CliError {
    use gpcsi::eval::EvalError;
    match e {
        EvalError::Config(m) => CliError::Config(m),
        EvalError::Io(m) => CliError::Io(m),
        other => CliError::Numerical(other.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(c) => sweep(&c),
        Command::Estimate(c) => estimate(&c),
        Command::DemoSlice(c) => demo_slice(&c),
        Command::Gradcheck { common, points, step, tol } => gradcheck(&common, points, step, tol),
        Command::PsdCheck { common, draws, max_points } => psd_check(&common, draws, max_points),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpcsi: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Sets `value` at the dotted `key`, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not of the form key=value")))?;
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.trim().to_string(), parsed))
}

/// Resolves the configuration: file (or defaults), then `--set`, then the
/// dedicated flags.
fn load_config(c: &Common, require_file: bool) -> Result<ExperimentConfig, CliError> {
    let mut table = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None if require_file => return Err(CliError::Config("--config is required for this subcommand".into())),
        None => toml::Table::try_from(ExperimentConfig::default()).map_err(|e| CliError::Config(e.to_string()))?,
    };
    table.remove("manifest");
    for raw in &c.overrides {
        let (k, v) = parse_override(raw)?;
        set_dotted(&mut table, &k, v)?;
    }
    if let Some(t) = c.trials {
        table.insert("trials".into(), toml::Value::Integer(t as i64));
    }
    if let Some(s) = c.seed {
        let s = i64::try_from(s).map_err(|_| CliError::Config("seed must fit in a signed 64-bit integer".into()))?;
        table.insert("master_seed".into(), toml::Value::Integer(s));
    }
    if let Some(list) = &c.estimators {
        let mut names = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind = EstimatorKind::parse(name).ok_or_else(|| CliError::Config(format!("unknown estimator `{name}`")))?;
            names.push(toml::Value::String(kind.name().into()));
        }
        table.insert("estimators".into(), toml::Value::Array(names));
    }
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| {
        let origin = c.config.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default();
        CliError::Config(format!("{origin}{}", e.to_string().trim()))
    })?;
    cfg.validate().map_err(eval_err)?;
    Ok(cfg)
}

/// Writes through a temporary file in the same directory and renames it, so
/// a file is either complete or absent.
fn write_atomic(dir: &Path, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush().map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(dir.join(name)).map_err(io_err)?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    write_atomic(dir, name, |w| w.write_all(text.as_bytes()).map_err(io_err))
}

fn manifest(cfg: &ExperimentConfig, subcommand: &str) -> Result<String, CliError> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut m = toml::Table::new();
    m.insert("subcommand".into(), toml::Value::String(subcommand.into()));
    m.insert("seed".into(), toml::Value::Integer(cfg.master_seed as i64));
    m.insert("gpcsi_version".into(), toml::Value::String(env!("CARGO_PKG_VERSION").into()));
    table.insert("manifest".into(), toml::Value::Table(m));
    toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))
}

fn hyperparam_records(rows: &[ResultRow]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in rows {
        if let Some(theta) = &r.theta {
            let rec = serde_json::json!({
                "snr_db": r.snr_db,
                "n_t": r.n_t,
                "trial": r.trial,
                "lml": r.lml,
                "theta": theta,
            });
            writeln!(out, "{rec}").expect("writing to a String");
        }
    }
    Ok(out)
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn sweep(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c, true)?;
    prepare_out(&c.out)?;
    let rows = run_monte_carlo(&cfg).map_err(eval_err)?;
    write_atomic(&c.out, "results.csv", |w| write_rows_csv(&rows, w).map_err(eval_err))?;
    write_atomic(&c.out, "timings.csv", |w| write_timings_csv(&rows, w).map_err(eval_err))?;
    let summary = summarize(&rows);
    write_text(&c.out, "summary.json", &(serde_json::to_string_pretty(&summary).map_err(io_err)? + "\n"))?;
    write_text(&c.out, "hyperparams.jsonl", &hyperparam_records(&rows)?)?;
    write_text(&c.out, "manifest.toml", &manifest(&cfg, "sweep")?)?;
    for s in &summary {
        let db = s.mean_nmse_db.map(|v| format!("{v:8.2}")).unwrap_or_else(|| "     n/a".into());
        println!(
            "{:6} snr {:6.1} dB  n_t {:3}  NMSE {db} dB  SE {:7.3} bit/s/Hz  flagged {}",
            s.estimator, s.snr_db, s.n_t, s.mean_se_bps_hz, s.flagged
        );
    }
    println!("wrote {} rows to {}", rows.len(), c.out.join("results.csv").display());
    Ok(())
}

fn estimate(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c, true)?;
    prepare_out(&c.out)?;
    let n_t = cfg.nt_list[0];
    let outcome = run_single(&cfg, 0, 0, &[n_t]).map_err(eval_err)?;
    write_text(&c.out, "h_true.mat", &outcome.channel.to_dump())?;
    for (row, est) in &outcome.rows {
        if row.estimator != EstimatorKind::Genie.name() {
            write_text(&c.out, &format!("h_{}.mat", row.estimator), &est.to_dump())?;
        }
        println!("{:6} n_t {:3}  NMSE {:8.2} dB  SE {:7.3} bit/s/Hz", row.estimator, row.n_t, row.nmse_db, row.se_bps_hz);
    }
    let rows: Vec<ResultRow> = outcome.rows.iter().map(|(r, _)| r.clone()).collect();
    write_atomic(&c.out, "estimate.csv", |w| write_rows_csv(&rows, w).map_err(eval_err))?;
    write_text(&c.out, "hyperparams.jsonl", &hyperparam_records(&rows)?)?;
    write_text(&c.out, "manifest.toml", &manifest(&cfg, "estimate")?)?;
    Ok(())
}

fn demo_slice(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c, false)?;
    let n_total = cfg.tx.total();
    if n_total != 16 {
        return Err(CliError::Config(format!("demo-slice needs 16 transmit antennas, config has {n_total}")));
    }
    prepare_out(&c.out)?;
    let rx = UraGeometry::new(1, 1).expect("1x1 array");
    let arrays = ArrayPair::new(rx, cfg.tx);
    let root = gpcsi::linalg::RngStream::new(cfg.master_seed);
    let h = gpcsi::channel::generate_sv(&cfg.sv, rx, cfg.tx, root.split(1).seed()).map_err(|e| CliError::Numerical(e.to_string()))?;
    let omega = ActiveSet::new(DEMO_OMEGA.to_vec(), n_total).map_err(|e| CliError::Config(e.to_string()))?;
    let rho = db_to_linear(cfg.snr_db_list[0]);
    let (_, obs) = observe(&h, &omega, cfg.p_active, rho, &mut root.split(2)).map_err(|e| CliError::Numerical(e.to_string()))?;

    let theta = match optimize(&obs, &arrays, &cfg.learn, root.split(3).seed()) {
        Ok(rep) => rep.best_theta,
        Err(e) => {
            log::warn!("hyperparameter learning failed ({e}); using the initial θ");
            let space = cfg.learn.space(&obs);
            variance_matched_init(&space, &obs, &arrays, cfg.learn.init_variance, cfg.learn.init_frequencies)
        }
    };
    let model = GpModel::fit(&theta, &obs, &arrays).map_err(|e| CliError::Numerical(e.to_string()))?;
    let grid: Vec<IndexPair> = (1..=n_total).map(|t| IndexPair::new(1, t)).collect();
    let post = model.posterior(&grid, false);
    let ci = credible_interval(&post, 0.95).map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut csv = String::from("tx_index,true_re,observed,observation,mean,lo95,hi95\n");
    for t in 1..=n_total {
        let k = t - 1;
        let observation = obs.grid.iter().position(|p| p.tx == t).map(|i| obs.z[i].re.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{t},{},{},{observation},{},{},{}",
            h.entries()[(0, k)].re,
            omega.contains(t),
            post.mean[k],
            ci[k].0,
            ci[k].1
        )
        .expect("writing to a String");
    }
    write_text(&c.out, "demo_slice.csv", &csv)?;
    write_text(&c.out, "manifest.toml", &manifest(&cfg, "demo-slice")?)?;
    println!("wrote {}", c.out.join("demo_slice.csv").display());
    Ok(())
}

fn check_seed(c: &Common) -> u64 {
    c.seed.unwrap_or(ExperimentConfig::default().master_seed)
}

fn gradcheck(c: &Common, points: usize, step: f64, tol: f64) -> Result<(), CliError> {
    if !(step > 0.0 && tol > 0.0) {
        return Err(CliError::Config("--step and --tol must be positive".into()));
    }
    if points == 0 {
        eprintln!("warning: 0 sample points requested; the gradient check is vacuous");
    }
    let s = run_gradcheck(points, check_seed(c), step, tol).map_err(|e| CliError::Numerical(e.to_string()))?;
    println!(
        "gradcheck: {} points x {} coordinates, worst relative error {:.3e} ({}), tolerance {:.1e}, violations {}",
        s.points,
        s.coordinates,
        s.worst_rel_err,
        match (&s.worst_coordinate, s.worst_point) {
            (Some(name), Some(p)) => format!("{name} at point {p}"),
            _ => "none".into(),
        },
        s.tolerance,
        s.violations
    );
    if s.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} gradient coordinates exceed the tolerance", s.violations)))
    }
}

fn psd_check(c: &Common, draws: usize, max_points: usize) -> Result<(), CliError> {
    if max_points == 0 {
        return Err(CliError::Config("--max-points must be positive".into()));
    }
    if draws == 0 {
        eprintln!("warning: 0 draws requested; the PSD check is vacuous");
    }
    let s = run_psd_check(draws, max_points, check_seed(c));
    println!(
        "psd-check: {} draws, worst min-eigenvalue/trace {:.3e}, {} shift pairs with worst error {:.3e}, violations {}",
        s.draws, s.worst_eig_ratio, s.shift_pairs, s.worst_shift_err, s.violations
    );
    if s.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} kernel property violations", s.violations)))
    }
}
