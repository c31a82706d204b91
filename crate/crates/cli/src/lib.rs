//! Command-line front-end: `analyze`, `simulate` and `probe`.
//!
//! Exit codes: 0 success, 2 invalid input (configuration, data, paths),
//! 3 estimation failure. Diagnostics go to stderr; when `--out` is omitted
//! the JSON report goes to stdout.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use subgroup_ate::analysis::{analyze, AnalysisResult};
use subgroup_ate::data::read_csv;
use subgroup_ate::design_math::{
    default_c_grid, deviation_curve, se_ratio_actual_vs_expected, split_probability, AllocationLaw,
};
use subgroup_ate::simulation::{run_simulation, SimulationReport};
use subgroup_ate::{Error, VERSION};

use config::{AnalyzeConfig, PanelA, PanelB, ProbeConfig, SimulateConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_ESTIMATION: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "subgroup-ate", version, about = "Design-based subgroup treatment effects for RCTs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate subgroup effects for a trial dataset.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte Carlo study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Tabulate allocation probabilities and actual-vs-expected SE ratios.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// An error tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

impl Failure {
    fn invalid(error: Error) -> Self {
        Self {
            code: EXIT_INVALID,
            error,
        }
    }

    fn estimation(error: Error) -> Self {
        let code = match error {
            Error::Invalid(_) | Error::Config(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_INVALID,
            _ => EXIT_ESTIMATION,
        };
        Self { code, error }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

pub fn run(cli: Cli) -> u8 {
    let outcome = match cli.command {
        Command::Analyze { data, config, out } => cmd_analyze(&data, &config, out.as_deref()),
        Command::Simulate { config, out, threads } => cmd_simulate(&config, out.as_deref(), threads),
        Command::Probe { config, out } => cmd_probe(&config, out.as_deref()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            if let Error::Invalid(vs) = &f.error {
                for v in vs {
                    eprintln!("  - {v}");
                }
            }
            f.code
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::invalid(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<fs::File, Failure> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<S: Serialize>(value: &S, out: Option<&Path>, name: &str) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::invalid(Error::Config(e.to_string())))?;
    match out {
        Some(dir) => {
            let path = dir.join(name);
            fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    version: &'static str,
    data: String,
    /// Analysis uses no randomness.
    seed: Option<u64>,
    rows_read: usize,
    config: &'a AnalyzeConfig,
    result: &'a AnalysisResult<f64>,
}

pub const ESTIMATES_HEADER: [&str; 14] = [
    "subgroup", "estimator", "variant", "tau_hat", "se", "df", "statistic", "p_value", "ci_lower", "ci_upper", "n_k",
    "n_k1", "n_k0", "pi_k",
];

fn write_estimates_csv(result: &AnalysisResult<f64>, path: &Path) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| io_err(path, std::io::Error::other(e));
    w.write_record(ESTIMATES_HEADER).map_err(csv_err)?;
    let kind = serde_json::to_value(result.metadata.estimator)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    for e in result.estimates.iter().chain(std::iter::once(&result.overall)) {
        for s in &e.se_menu {
            w.write_record([
                e.subgroup.clone(),
                kind.clone(),
                s.variant.clone(),
                e.tau_hat.to_string(),
                s.se.to_string(),
                s.df.to_string(),
                s.statistic.to_string(),
                s.p_value.to_string(),
                s.ci[0].to_string(),
                s.ci[1].to_string(),
                e.n_k.to_string(),
                e.n_k1.to_string(),
                e.n_k0.to_string(),
                e.pi_k.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn cmd_analyze(data: &Path, config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mut cfg: AnalyzeConfig = config::load(config).map_err(Failure::invalid)?;
    cfg.resolve();
    let ds = read_csv::<f64>(data, &cfg.columns.schema(), cfg.design.spec()).map_err(Failure::invalid)?;
    let result = analyze(&ds, &cfg.analysis_spec()).map_err(Failure::estimation)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    let report = AnalyzeReport {
        version: VERSION,
        data: data.display().to_string(),
        seed: None,
        rows_read: ds.n(),
        config: &cfg,
        result: &result,
    };
    if cfg.format.json() || out.is_none() {
        write_json(&report, out, "analysis.json")?;
    }
    if let (Some(dir), true) = (out, cfg.format.csv()) {
        write_estimates_csv(&result, &dir.join("estimates.csv"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    version: &'static str,
    seed: u64,
    config: &'a SimulateConfig,
    report: &'a SimulationReport,
}

/// Runs every specification in order; the thread count affects speed only.
pub fn run_specs(cfg: &SimulateConfig, threads: usize) -> Result<SimulationReport, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::invalid(Error::Config(format!("cannot start {threads} threads: {e}"))))?;
    let sims = cfg.sim_configs();
    for s in &sims {
        s.validate().map_err(Failure::invalid)?;
    }
    let mut report = SimulationReport::default();
    for (i, s) in sims.iter().enumerate() {
        let start = Instant::now();
        let r = pool.install(|| run_simulation(s)).map_err(Failure::estimation)?;
        eprintln!(
            "[{}/{}] n = {}, pi1 = {}, v = {}: {} draws x {} reps in {:.1}s",
            i + 1,
            sims.len(),
            s.n,
            s.pi1,
            s.v,
            s.n_draws,
            s.n_reps,
            start.elapsed().as_secs_f64()
        );
        report.merge(r);
    }
    Ok(report)
}

pub fn cmd_simulate(config: &Path, out: Option<&Path>, threads: usize) -> Result<(), Failure> {
    let mut cfg: SimulateConfig = config::load(config).map_err(Failure::invalid)?;
    cfg.resolve().map_err(Failure::invalid)?;
    let report = run_specs(&cfg, threads)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        if cfg.format.csv() {
            let path = dir.join("simulation.csv");
            report.write_csv(create(&path)?).map_err(Failure::invalid)?;
        }
    }
    if cfg.format.json() || out.is_none() {
        let doc = SimulateReport {
            version: VERSION,
            seed: cfg.seed,
            config: &cfg,
            report: &report,
        };
        write_json(&doc, out, "simulation.json")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelASummary {
    pub n: u64,
    pub n1: u64,
    pub n_k: u64,
    pub split_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelBSummary {
    pub n_k: u64,
    pub p: f64,
    pub phi: f64,
    pub theta: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelBPoint {
    pub delta1: f64,
    /// `delta1 / (.5 n_k)`.
    pub scaled_delta: f64,
    pub ratio: f64,
}

fn law_for(a: &PanelA) -> Result<AllocationLaw, Error> {
    let n1 = a.n1.unwrap_or_else(|| (a.n as f64 * a.p).round() as u64);
    AllocationLaw::new(a.n, n1, a.n_k)
}

/// The delta1 grid `-D, -D + step, ..., D` with `D = share * n_k * p`,
/// restricted to values leaving both arms at least one unit.
pub fn panel_b_curve(b: &PanelB) -> Result<Vec<PanelBPoint>, Error> {
    if !(b.delta_step > 0.0 && b.delta_share >= 0.0) {
        return Err(Error::Domain("delta_step must be positive and delta_share nonnegative".into()));
    }
    let n_k = b.n_k as f64;
    let bound = b.delta_share * n_k * b.p;
    let steps = (bound / b.delta_step + 1e-9).floor() as i64;
    let mut out = Vec::new();
    for i in -steps..=steps {
        let delta1 = i as f64 * b.delta_step;
        let n1 = n_k * b.p + delta1;
        if n1 < 1.0 || n_k - n1 < 1.0 {
            continue;
        }
        out.push(PanelBPoint {
            delta1,
            scaled_delta: delta1 / (0.5 * n_k),
            ratio: se_ratio_actual_vs_expected(n_k, b.p, delta1, b.phi, b.theta)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Domain("the delta1 grid is empty".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct ProbeReport<'a> {
    version: &'static str,
    seed: Option<u64>,
    config: &'a ProbeConfig,
    panel_a: Vec<PanelASummary>,
    panel_b: Vec<PanelBSummary>,
}

pub fn cmd_probe(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg: ProbeConfig = config::load(config).map_err(Failure::invalid)?;
    if cfg.panel_a.is_empty() && cfg.panel_b.is_empty() {
        return Err(Failure::invalid(Error::Config("no [[panel_a]] or [[panel_b]] tables given".into())));
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }

    let mut a_rows = Vec::new();
    let mut a_summary = Vec::new();
    for a in &cfg.panel_a {
        let law = law_for(a).map_err(Failure::invalid)?;
        let grid = a.c_grid.clone().unwrap_or_else(default_c_grid);
        let split = split_probability(&law);
        for pt in deviation_curve(&law, &grid).map_err(Failure::invalid)? {
            a_rows.push([
                law.n.to_string(),
                law.n1.to_string(),
                law.n_k.to_string(),
                split.to_string(),
                pt.arm.name().to_string(),
                pt.c.to_string(),
                pt.probability.to_string(),
            ]);
        }
        a_summary.push(PanelASummary {
            n: law.n,
            n1: law.n1,
            n_k: law.n_k,
            split_probability: split,
        });
    }

    let mut b_rows = Vec::new();
    let mut b_summary = Vec::new();
    for b in &cfg.panel_b {
        let curve = panel_b_curve(b).map_err(Failure::invalid)?;
        let ratios = curve.iter().map(|p| p.ratio);
        b_summary.push(PanelBSummary {
            n_k: b.n_k,
            p: b.p,
            phi: b.phi,
            theta: b.theta,
            min_ratio: ratios.clone().fold(f64::INFINITY, f64::min),
            max_ratio: ratios.fold(f64::NEG_INFINITY, f64::max),
        });
        for pt in curve {
            b_rows.push([
                b.n_k.to_string(),
                b.p.to_string(),
                b.phi.to_string(),
                b.theta.to_string(),
                pt.delta1.to_string(),
                pt.scaled_delta.to_string(),
                pt.ratio.to_string(),
            ]);
        }
    }

    if let Some(dir) = out {
        let tables: [(&str, [&str; 7], &Vec<[String; 7]>); 2] = [
            ("panel_a.csv", ["n", "n1", "n_k", "split_probability", "arm", "c", "probability"], &a_rows),
            ("panel_b.csv", ["n_k", "p", "phi", "theta", "delta1", "scaled_delta", "ratio"], &b_rows),
        ];
        for (name, header, rows) in tables {
            if rows.is_empty() {
                continue;
            }
            let path = dir.join(name);
            let mut w = csv::Writer::from_writer(create(&path)?);
            let csv_err = |e: csv::Error| io_err(&path, std::io::Error::other(e));
            w.write_record(header).map_err(csv_err)?;
            for r in rows {
                w.write_record(r).map_err(csv_err)?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
        }
    }
    let report = ProbeReport {
        version: VERSION,
        seed: None,
        config: &cfg,
        panel_a: a_summary,
        panel_b: b_summary,
    };
    write_json(&report, out, "probe.json")
}
