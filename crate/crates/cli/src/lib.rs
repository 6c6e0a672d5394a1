//! `mecor` command-line tool: fit, simulate, prep and report.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad input, bad flags),
//! 3 on numerical failures. Errors are written to stderr as one JSON object.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mecor_core::baselines::{fit_fh, fit_yl};
use mecor_core::io as fmt;
use mecor_core::mspe::{jackknife_covariance, jackknife_refits_with, mspe_estimate};
use mecor_core::prediction::predict_all;
use mecor_core::report::{build_report, report_svg, write_report_csv};
use mecor_core::simulation::{parse_grid, run_simulation, MethodSet, SimConfig, SimResult};
use mecor_core::survey_prep::prepare;
use mecor_core::{fit_mecor, ErrorClass, JkScale, Method, SaeError};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mecor,
    Yl,
    Fh,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mecor => Method::Mecor,
            MethodArg::Yl => Method::Yl,
            MethodArg::Fh => Method::Fh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JkScaleArg {
    /// Plain sum over deletions.
    #[value(name = "paper")]
    Plain,
    /// Sum scaled by (n - 1) / n.
    Classic,
}

impl From<JkScaleArg> for JkScale {
    fn from(s: JkScaleArg) -> Self {
        match s {
            JkScaleArg::Plain => JkScale::Plain,
            JkScaleArg::Classic => JkScale::Classic,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mecor", version, about = "Small area estimation with correlated covariate measurement error")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Base seed; simulation config k uses seed + k.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, or `-` for stdout.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: String,
    #[arg(long, global = true, value_enum, default_value = "paper")]
    pub jk_scale: JkScaleArg,
    /// Procedure for `fit` (default mecor); restricts `simulate` to one method.
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an area-level CSV; writes fit.json, predictions.csv and mspe.csv.
    Fit {
        input: PathBuf,
        /// Skip the jackknife MSPE step.
        #[arg(long)]
        no_jackknife: bool,
    },
    /// Run a simulation grid; writes parameter and MSPE tables per family.
    Simulate {
        grid: PathBuf,
        /// Override the replicate count of every config.
        #[arg(long)]
        reps: Option<usize>,
        /// Skip jackknife MSPE estimation inside replicates.
        #[arg(long)]
        no_jackknife: bool,
    },
    /// Unit-level CSV to area-level CSV; writes areas.csv and prep.json.
    Prep { input: PathBuf },
    /// Direct SE against root MSPE; writes report.csv and report.svg.
    Report {
        /// Area-level CSV (with optional n_i column).
        #[arg(long)]
        areas: PathBuf,
        /// MSPE CSV written by `fit`.
        #[arg(long)]
        mspe: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Core(SaeError),
    Usage(String),
}

impl From<SaeError> for CliError {
    fn from(e: SaeError) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(SaeError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.class() == ErrorClass::Numerical => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Core(e) => serde_json::json!({
                "error": e.kind(),
                "class": match e.class() {
                    ErrorClass::Validation => "validation",
                    ErrorClass::Numerical => "numerical",
                },
                "message": e.to_string(),
            }),
            CliError::Usage(msg) => serde_json::json!({
                "error": "Usage",
                "class": "validation",
                "message": msg,
            }),
        }
    }
}

/// Where output files go.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn new(target: &str) -> Result<Self, CliError> {
        if target == "-" {
            return Ok(Self { dir: None });
        }
        let dir = PathBuf::from(target);
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir) })
    }

    fn emit(
        &self,
        name: &str,
        write: impl FnOnce(&mut dyn Write) -> mecor_core::Result<()>,
    ) -> Result<(), CliError> {
        match &self.dir {
            Some(dir) => {
                let mut w = BufWriter::new(File::create(dir.join(name))?);
                write(&mut w)?;
                w.flush()?;
            }
            None => {
                let stdout = io::stdout();
                let mut w = stdout.lock();
                write(&mut w)?;
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path)?))
}

fn cmd_fit(g: &GlobalOpts, input: &Path, no_jackknife: bool, sink: &Sink) -> Result<(), CliError> {
    let area = fmt::read_areas(open(input)?)?;
    let ds = &area.dataset;
    let method: Method = g.method.unwrap_or(MethodArg::Mecor).into();
    let scale: JkScale = g.jk_scale.into();

    let (fit, predictions, fh_mspe) = match method {
        Method::Mecor => {
            let fit = fit_mecor(ds)?;
            let preds = predict_all(ds, &fit.params)?;
            (fit, preds, None)
        }
        Method::Yl => {
            let yl = fit_yl(ds)?;
            (yl.fit, yl.predictions, None)
        }
        Method::Fh => {
            let fh = fit_fh(ds)?;
            (fh.fit, fh.predictions, Some(fh.mspe))
        }
    };

    let (mspe, jk_cov) = if let Some(fh) = fh_mspe {
        (Some(fmt::fh_as_mspe_records(&fh)), None)
    } else if no_jackknife {
        (None, None)
    } else {
        let jk = jackknife_refits_with(ds, method)?;
        (
            Some(mspe_estimate(ds, &jk, scale)?),
            Some(jackknife_covariance(&jk, scale)?),
        )
    };

    let json = fmt::fit_json(&fit, jk_cov.as_ref());
    sink.emit("fit.json", |w| fmt::write_json(w, &json))?;
    sink.emit("predictions.csv", |w| fmt::write_predictions(w, &predictions, method))?;
    if let Some(m) = mspe {
        sink.emit("mspe.csv", |w| fmt::write_mspe(w, &m, method))?;
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<Vec<SimConfig>, CliError> {
    Ok(parse_grid(open(path)?)?)
}

fn cmd_simulate(
    g: &GlobalOpts,
    grid: &Path,
    reps: Option<usize>,
    no_jackknife: bool,
    sink: &Sink,
) -> Result<(), CliError> {
    let mut configs = load_grid(grid)?;
    for (k, c) in configs.iter_mut().enumerate() {
        if let Some(r) = reps {
            c.mc_reps = r;
        }
        if let Some(s) = g.seed {
            c.seed = s.wrapping_add(k as u64);
        }
        c.validate()?;
    }
    let mut set = MethodSet {
        mecor_mspe: !no_jackknife,
        jk_scale: g.jk_scale.into(),
        ..MethodSet::default()
    };
    if let Some(m) = g.method {
        set.mecor = m == MethodArg::Mecor;
        set.yl = m == MethodArg::Yl;
        set.fh = m == MethodArg::Fh;
        set.mecor_mspe &= set.mecor;
    }

    let mut families: BTreeMap<(&'static str, &'static str), Vec<SimResult>> = BTreeMap::new();
    for c in &configs {
        let r = run_simulation(c, &set)?;
        families
            .entry((c.dist.as_str(), c.psi_pattern.as_str()))
            .or_default()
            .push(r);
    }
    for ((dist, pattern), results) in &families {
        sink.emit(&format!("params_{dist}_{pattern}.csv"), |w| {
            fmt::write_param_table(w, results)
        })?;
        sink.emit(&format!("mspe_{dist}_{pattern}.csv"), |w| {
            fmt::write_mspe_table(w, results)
        })?;
        sink.emit(&format!("per_area_{dist}_{pattern}.csv"), |w| {
            fmt::write_per_area_table(w, results)
        })?;
    }
    Ok(())
}

fn cmd_prep(input: &Path, sink: &Sink) -> Result<(), CliError> {
    let (units, warnings) = fmt::read_units(open(input)?)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let out = prepare(&units)?;
    let ds = out.dataset()?;
    let sizes = out.sample_sizes();
    sink.emit("areas.csv", |w| fmt::write_areas(w, &ds, Some(&sizes)))?;
    sink.emit("prep.json", |w| fmt::write_json(w, &out.sidecar_json()))?;
    Ok(())
}

fn cmd_report(areas: &Path, mspe: &Path, sink: &Sink) -> Result<(), CliError> {
    let area = fmt::read_areas(open(areas)?)?;
    let records = fmt::read_mspe(open(mspe)?)?;
    let report = build_report(&area.dataset, area.sample_sizes.as_deref(), &records)?;
    eprintln!(
        "mean ratio of root MSPE to direct SE: {:.4} over {} areas",
        report.mean_ratio,
        report.rows.len()
    );
    sink.emit("report.csv", |w| write_report_csv(w, &report))?;
    sink.emit("report.svg", |w| {
        w.write_all(report_svg(&report).as_bytes())?;
        Ok(())
    })?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let sink = Sink::new(&cli.global.output_dir)?;
    match &cli.command {
        Command::Fit {
            input,
            no_jackknife,
        } => cmd_fit(&cli.global, input, *no_jackknife, &sink),
        Command::Simulate {
            grid,
            reps,
            no_jackknife,
        } => cmd_simulate(&cli.global, grid, *reps, *no_jackknife, &sink),
        Command::Prep { input } => cmd_prep(input, &sink),
        Command::Report { areas, mspe } => cmd_report(areas, mspe, &sink),
    }
}

/// Runs a parsed command on a pool sized by `--threads`.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.global.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}
