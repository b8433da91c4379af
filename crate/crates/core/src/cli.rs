//! `avolt`: command-line front end.
//!
//! Exit codes: 0 on success, 1 when a check fails, 2 when the run could not
//! complete. A JSON error report is written to the output directory in the
//! last case.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{fourier_point, EnsembleFormat, Model, RunConfig};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::heston::CharfnCache;
use crate::pricing::{check_table, price_table, write_price_csv, InversionSettings, TableChecks};
use crate::riccati::RiccatiOptions;
use crate::simulate::{
    mean_path_deterministic, EnsembleWriter, PathSimulator, StreamAcc, StreamRequest, BLOCK_SIZE,
};
use crate::validation::{model_transform, run_validation, screen, simulators, ValidationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "avolt", version, about = "Affine Volterra processes and Volterra-Heston pricing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.dir` of the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log: LogFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sweep `E[exp(i w X¹_T)]` over the configured w ladder.
    Charfn,
    /// European call and put table by Fourier inversion.
    Price,
    /// Simulate an ensemble and summarize it.
    Simulate,
    /// Run the cross-validation suite.
    Validate,
    /// Print the JSON schema of the run configuration.
    Schema,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Charfn => "charfn",
            Self::Price => "price",
            Self::Simulate => "simulate",
            Self::Validate => "validate",
            Self::Schema => "schema",
        }
    }
}

pub fn run() -> i32 {
    run_with(Cli::parse())
}

pub fn run_with(cli: Cli) -> i32 {
    init_logging(cli.log);
    if cli.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    if cli.command == Command::Schema {
        let schema = serde_json::to_string_pretty(&RunConfig::schema()).expect("schema serializes");
        println!("{schema}");
        return EXIT_OK;
    }
    let out = match &cli.out {
        Some(p) => p.clone(),
        None => PathBuf::from("out"),
    };
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => return fail(cli.command, &out, &e),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    if let Err(e) = fs::create_dir_all(&out) {
        return fail(cli.command, &out, &e.into());
    }
    let result = match cli.command {
        Command::Charfn => cmd_charfn(&cfg, &out),
        Command::Price => cmd_price(&cfg, &out),
        Command::Simulate => cmd_simulate(&cfg, &out),
        Command::Validate => cmd_validate(&cfg, &out),
        Command::Schema => unreachable!(),
    };
    match result {
        Ok(code) => code,
        Err(e) => fail(cli.command, &out, &e),
    }
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    RunConfig::load(path)
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    command: &'a str,
    kind: &'static str,
    message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Validation(_) => "validation",
        Error::Unsupported(_) => "unsupported",
        Error::BlowUp { .. } => "blow_up",
        Error::NoConvergence { .. } => "no_convergence",
        Error::RejectedParameters(_) => "rejected",
        Error::NumericalViolation(_) => "numerical_violation",
        Error::StateSpace { .. } => "state_space",
        Error::SimulationFailure { .. } => "simulation_failure",
        Error::Consistency(_) => "consistency",
        Error::Pricing(_) => "pricing",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Logs `e` and writes `error.json`; `validate` also writes a failed report.
fn fail(command: Command, out: &Path, e: &Error) -> i32 {
    log::error!("{e}");
    let report = ErrorReport {
        command: command.name(),
        kind: error_kind(e),
        message: e.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&report).expect("error report serializes");
    text.push('\n');
    let written = fs::create_dir_all(out).map_err(Error::from).and_then(|_| {
        write_atomic(out, "error.json", |w| Ok(w.write_all(text.as_bytes())?))?;
        if command == Command::Validate {
            let r = ValidationReport::aborted(e);
            write_atomic(out, "validation.json", |w| Ok(w.write_all(r.to_json().as_bytes())?))?;
        }
        Ok(())
    });
    if let Err(w) = written {
        log::error!("could not write the error report: {w}");
    }
    EXIT_ERROR
}

fn init_logging(format: LogFormat) {
    let env = env_logger::Env::default().default_filter_or("info");
    let mut b = env_logger::Builder::from_env(env);
    if format == LogFormat::Json {
        b.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}

/// Writes `dir/name` through a temporary file in `dir` and a rename.
pub fn write_atomic<F>(dir: &Path, name: &str, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> Result<()>,
{
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w)?;
        w.flush()?;
    }
    publish(tmp, &dir.join(name))
}

/// Syncs `tmp` and renames it onto `path`, readable like a normal file.
fn publish(tmp: tempfile::NamedTempFile, path: &Path) -> Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn cmd_charfn(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let opts = RiccatiOptions::default();
    let ws = &cfg.task.charfn.w;
    for &w in ws {
        if let Some(why) = screen(&model, &fourier_point(w, model.dim()), &grid)? {
            return Err(Error::RejectedParameters(format!("w = {w}: {why}")));
        }
    }
    let values: Vec<Complex64> = ws
        .par_iter()
        .map(|&w| model_transform(&model, &fourier_point(w, model.dim()), &grid, &opts))
        .collect::<Result<_>>()?;
    write_atomic(out, "charfn.csv", |f| {
        f.write_all(b"w,re,im\n")?;
        for (w, v) in ws.iter().zip(&values) {
            writeln!(f, "{w},{},{}", v.re, v.im)?;
        }
        Ok(())
    })?;
    log::info!("wrote {} charfn points to {}", ws.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_price(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let Model::Heston(params) = cfg.model()? else {
        return Err(Error::Unsupported("pricing needs a Heston model".into()));
    };
    let task = &cfg.task.price;
    let maturity = task.maturity.unwrap_or(cfg.grid.horizon);
    let mut strikes = task.strikes.clone();
    strikes.sort_by(f64::total_cmp);
    let settings = InversionSettings {
        n_steps: task.riccati_steps,
        ..Default::default()
    };
    let rows = price_table(&params, maturity, &strikes, &settings, &CharfnCache::new())?;
    let checks = check_table(&rows, params.s0);
    if !checks.passed() {
        return Err(Error::NumericalViolation(describe_checks(&checks)));
    }
    write_atomic(out, "prices.csv", |f| write_price_csv(&rows, f))?;
    log::info!("priced {} strikes, {}", rows.len(), describe_checks(&checks));
    Ok(EXIT_OK)
}

fn describe_checks(c: &TableChecks) -> String {
    format!(
        "parity {:.2e}, bound violation {:.2e}, min second difference {:.2e}, max increase {:.2e}",
        c.parity, c.bound_violation, c.min_second_difference, c.max_increase
    )
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    scheme: crate::simulate::SchemeTag,
    /// `E[S_T] - S₀` and its standard error (Heston only).
    martingale: Option<Check>,
    moment_power: u32,
    moment_sup: f64,
    moment_sup_time: f64,
    /// `max_{t,c} |mean(X_t^c) - m_c(t)| / SE` against the noiseless path.
    mean_path_max_z: f64,
    mean_path_max_z_time: f64,
    /// The same deviation at `T` only.
    mean_path_terminal_z: f64,
}

#[derive(Debug, Serialize)]
struct Check {
    estimate: f64,
    std_error: f64,
    pass: bool,
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let task = &cfg.task.simulate;
    let n_paths = cfg.mc.n_paths;
    let seed = cfg.mc.seed;
    let sim = simulators(&model, &grid, &[1])?.remove(0);
    let req = StreamRequest {
        norm_power: Some(task.moment_power),
        mean_path: true,
        ..Default::default()
    };
    let formats: &[crate::simulate::EnsembleFormat] = match task.format {
        EnsembleFormat::Binary => &[crate::simulate::EnsembleFormat::Binary],
        EnsembleFormat::Csv => &[crate::simulate::EnsembleFormat::Csv],
        EnsembleFormat::Both => &[crate::simulate::EnsembleFormat::Binary, crate::simulate::EnsembleFormat::Csv],
    };
    let mut files = Vec::new();
    let mut writers = Vec::new();
    for f in formats {
        let name = match f {
            crate::simulate::EnsembleFormat::Binary => "ensemble.bin",
            crate::simulate::EnsembleFormat::Csv => "ensemble.csv",
        };
        let tmp = tempfile::NamedTempFile::new_in(out)?;
        let w = EnsembleWriter::new(
            BufWriter::new(tmp.reopen()?),
            *f,
            &grid,
            sim.dim(),
            sim.noise_dim(),
            n_paths,
        )?;
        files.push((tmp, name));
        writers.push(w);
    }
    let stats = stream_to_writers(&sim, n_paths, seed, &req, &mut writers)?;
    for w in writers {
        w.finish()?;
    }
    for (tmp, name) in files {
        publish(tmp, &out.join(name))?;
    }

    let summary = stats.summary(grid);
    let moments = summary.norm_moment_report().expect("moments requested");
    let (k, c, x0) = model.affine();
    let oracle = mean_path_deterministic(&k, &c, &x0, &grid)?;
    let mut worst = (0.0f64, 0.0);
    let mut terminal = 0.0f64;
    for (j, (est, m)) in summary.mean_path.iter().zip(&oracle).enumerate() {
        for (e, mc) in est.iter().zip(m) {
            if e.std_error > 0.0 {
                let z = (e.value - mc).abs() / e.std_error;
                if z > worst.0 {
                    worst = (z, grid.time(j));
                }
                if j == grid.n_steps() {
                    terminal = terminal.max(z);
                }
            }
        }
    }
    let martingale = match &model {
        Model::Heston(h) => Some(Check {
            estimate: summary.spot.value - h.s0,
            std_error: summary.spot.std_error,
            pass: (summary.spot.value - h.s0).abs() <= 3.0 * summary.spot.std_error + 1e-12,
        }),
        Model::Generic { .. } => None,
    };
    let report = SimulationSummary {
        n_paths,
        n_steps: grid.n_steps(),
        seed,
        scheme: sim.scheme(),
        martingale,
        moment_power: task.moment_power,
        moment_sup: moments.sup,
        moment_sup_time: grid.time(moments.sup_node),
        mean_path_max_z: worst.0,
        mean_path_max_z_time: worst.1,
        mean_path_terminal_z: terminal,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(out, "summary.json", |f| Ok(f.write_all(text.as_bytes())?))?;
    log::info!(
        "simulated {n_paths} paths on {} steps; mean-path max deviation {:.2} SE",
        grid.n_steps(),
        worst.0
    );
    Ok(EXIT_OK)
}

/// Simulates blocks of paths in parallel and writes them in path order.
fn stream_to_writers<W: Write>(
    sim: &PathSimulator,
    n_paths: usize,
    seed: u64,
    req: &StreamRequest,
    writers: &mut [EnsembleWriter<W>],
) -> Result<StreamAcc> {
    let grid: TimeGrid = *sim.grid();
    let mut total = StreamAcc::new(req, &grid, sim.dim());
    let mut start = 0;
    while start < n_paths {
        let end = (start + BLOCK_SIZE).min(n_paths);
        let paths = (start..end)
            .into_par_iter()
            .map(|i| sim.simulate_path(seed, i))
            .collect::<Result<Vec<_>>>()?;
        let mut block = StreamAcc::new(req, &grid, sim.dim());
        for (i, path) in (start..end).zip(&paths) {
            block.push(req, path, i)?;
            for w in writers.iter_mut() {
                w.write_path(i, path)?;
            }
        }
        total.merge(&block);
        start = end;
    }
    Ok(total)
}

fn cmd_validate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let report = run_validation(cfg)?;
    write_atomic(out, "validation.json", |f| Ok(f.write_all(report.to_json().as_bytes())?))?;

    // the paths behind the pathwise checks
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let sim = simulators(&model, &grid, &[1])?.remove(0);
    let n = cfg.task.validate.dual_paths;
    write_atomic(out, "ensemble.bin", |f| {
        let mut w = EnsembleWriter::new(
            f,
            crate::simulate::EnsembleFormat::Binary,
            &grid,
            sim.dim(),
            sim.noise_dim(),
            n,
        )?;
        let paths = (0..n)
            .into_par_iter()
            .map(|i| sim.simulate_path(cfg.mc.seed, i))
            .collect::<Result<Vec<_>>>()?;
        for (i, p) in paths.iter().enumerate() {
            w.write_path(i, p)?;
        }
        w.finish()?;
        Ok(())
    })?;
    for item in &report.items {
        log::info!("{:?} {} measured {:e} tolerance {:e}", item.status, item.name, item.measured, item.tolerance);
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}
