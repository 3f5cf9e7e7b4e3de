//! Command-line front end: configuration, data files and persisted results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{blb_stderr_for, BlbConfig, BlbResult};
use crate::error::{AqmmError, Result};
use crate::estimate::{fit, predict, FitControls, FitResult, Level, NewData};
use crate::model::{assemble, ClusteredData, DesignInfo, ModelSpec};
use crate::sim::{desk_grid, run_scenario, MetricsRow, MetricsTable, SimScenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const BUNDLE_FILE: &str = "bundle.json";
const PLOT_GRID: usize = 101;

#[derive(Debug, Parser)]
#[command(name = "aqmm", version, about = "Additive quantile mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model at each quantile level and write a result bundle.
    Fit(RunArgs),
    /// Predict from a stored bundle.
    Predict(PredictArgs),
    /// Fit and add bag-of-little-bootstraps standard errors.
    Boot(RunArgs),
    /// Run the Monte-Carlo study.
    Simulate(RunArgs),
    /// Render tables and plot data from a stored bundle.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all available cores by default.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Quantile levels, comma separated; replaces the configured list.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub newdata: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub level: u8,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; defaults to the bundle's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Headered CSV, one row per observation; relative paths resolve against the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    /// Overrides the seeds of the controls, resampling and scenarios.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub controls: FitControls,
    #[serde(default)]
    pub blb: BlbConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

fn default_taus() -> Vec<f64> {
    vec![0.5]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            taus: default_taus(),
            seed: None,
            out: None,
            controls: FitControls::default(),
            blb: BlbConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Scenarios to run; the desk-scale grid when empty.
    pub scenarios: Vec<SimScenario>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AqmmError::Config(e.to_string()))
    }

    /// Read a config file, resolving the data path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AqmmError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = &cfg.data {
            if d.is_relative() {
                cfg.data = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    /// Apply command-line overrides and propagate the seed.
    pub fn resolve(mut self, args: &RunArgs) -> Result<Self> {
        if let Some(seed) = args.seed {
            self.seed = Some(seed);
        }
        if let Some(out) = &args.out {
            self.out = Some(out.clone());
        }
        if !args.tau.is_empty() {
            self.taus = args.tau.clone();
        }
        if let Some(seed) = self.seed {
            self.controls.seed = seed;
            self.blb.seed = seed;
            self.simulate.scenarios.iter_mut().for_each(|s| s.seed = seed);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(AqmmError::Config("no quantile levels given".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(AqmmError::Config(format!("quantile level {t} is outside (0, 1)")));
        }
        self.controls.validate()?;
        for s in &self.simulate.scenarios {
            s.validate()?;
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("aqmm-out"))
    }

    fn model(&self) -> Result<&ModelSpec> {
        self.model.as_ref().ok_or_else(|| AqmmError::Config("config has no [model] section".into()))
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| AqmmError::Config("config has no data path".into()))
    }
}

/// Estimate with its bootstrap standard error when one was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

/// Table-style summary of one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub tau: f64,
    pub fixed_effects: Vec<CoefRow>,
    pub random_names: Vec<String>,
    pub random_sd: Vec<f64>,
    pub random_corr: Vec<Vec<f64>>,
    pub smooth_names: Vec<String>,
    pub smooth_sd: Vec<f64>,
    pub sigma: f64,
    pub pnr: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub omega_final: f64,
}

pub fn summarize(fit: &FitResult, blb: Option<&BlbResult>) -> FitSummary {
    let (random_sd, random_corr) = fit.ranef_sd_corr();
    FitSummary {
        tau: fit.tau,
        fixed_effects: fit
            .fixed_names
            .iter()
            .zip(&fit.beta)
            .enumerate()
            .map(|(j, (name, &estimate))| CoefRow {
                name: name.clone(),
                estimate,
                se: blb.map(|b| b.se[j]),
            })
            .collect(),
        random_names: fit.random_names.clone(),
        random_sd,
        random_corr,
        smooth_names: fit.smooth_names.clone(),
        smooth_sd: fit.smooth_var.iter().map(|v| v.max(0.0).sqrt()).collect(),
        sigma: fit.sigma,
        pnr: fit.pnr,
        loglik: fit.loglik,
        converged: fit.converged,
        iterations: fit.iterations,
        omega_final: fit.omega_final,
    }
}

/// Everything needed to report on and predict from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub config: RunConfig,
    pub design: DesignInfo,
    pub summary: Vec<FitSummary>,
    pub fits: Vec<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blb: Option<Vec<BlbResult>>,
}

impl Bundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| AqmmError::Io(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AqmmError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AqmmError::Input(format!("{}: {e}", path.display())))
    }
}

/// Machine-file number format: 17 significant digits, so values round-trip exactly.
pub fn num17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    format!("{x:.16e}")
}

/// Report number format: 4 significant digits.
pub fn num4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t == "."
}

/// Read the named numeric columns and an optional label column from a headered CSV.
/// Missing values are rejected.
pub fn read_table(path: &Path, numeric: &[String], label: Option<&str>) -> Result<(usize, BTreeMap<String, Vec<f64>>, Option<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| AqmmError::Io(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| AqmmError::Data(e.to_string()))?.clone();
    let index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| AqmmError::Spec(format!("column '{name}' not found in {}", path.display())))
    };
    let num_idx: Vec<(String, usize)> = numeric.iter().map(|n| Ok((n.clone(), index(n)?))).collect::<Result<_>>()?;
    let label_idx = label.map(index).transpose()?;
    let mut columns: BTreeMap<String, Vec<f64>> = numeric.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut nrows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AqmmError::Data(e.to_string()))?;
        let row = line + 2;
        for (name, j) in &num_idx {
            let field = record.get(*j).unwrap_or("");
            if is_missing(field) {
                return Err(AqmmError::Data(format!("missing value in column '{name}' at line {row}")));
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| AqmmError::Data(format!("column '{name}' at line {row}: '{field}' is not a number")))?;
            columns.get_mut(name).expect("column registered").push(v);
        }
        if let (Some(j), Some(l)) = (label_idx, labels.as_mut()) {
            let field = record.get(j).unwrap_or("");
            if is_missing(field) {
                return Err(AqmmError::Data(format!("missing cluster label at line {row}")));
            }
            l.push(field.trim().to_string());
        }
        nrows += 1;
    }
    Ok((nrows, columns, labels))
}

/// Load the model data named by a spec.
pub fn read_data(path: &Path, spec: &ModelSpec) -> Result<ClusteredData> {
    let mut numeric = vec![spec.response.clone()];
    numeric.extend(spec.covariates());
    let mut seen = std::collections::HashSet::new();
    numeric.retain(|c| seen.insert(c.clone()));
    let (_, mut columns, labels) = read_table(path, &numeric, Some(&spec.cluster))?;
    let y = columns.remove(&spec.response).expect("response column read");
    ClusteredData::new(y, labels.expect("cluster column read"), columns)
}

/// Predictions with one column per quantile level, a fallback flag and the
/// number of adjacent level pairs whose predictions cross.
pub fn write_predictions(path: &Path, taus: &[f64], columns: &[Vec<f64>], fallback: &[bool], clusters: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AqmmError::Io(e.to_string()))?;
    let mut header = vec!["row".to_string()];
    if clusters.is_some() {
        header.push("cluster".into());
    }
    header.extend(taus.iter().map(|t| format!("q_{t}")));
    header.push("fallback_level0".into());
    header.push("crossings".into());
    w.write_record(&header).map_err(|e| AqmmError::Io(e.to_string()))?;
    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&a, &b| taus[a].total_cmp(&taus[b]));
    let nrows = columns.first().map_or(0, Vec::len);
    for r in 0..nrows {
        let mut rec = vec![r.to_string()];
        if let Some(c) = clusters {
            rec.push(c[r].clone());
        }
        rec.extend(columns.iter().map(|c| num17(c[r])));
        rec.push(u8::from(fallback[r]).to_string());
        let crossings = order.windows(2).filter(|p| columns[p[1]][r] < columns[p[0]][r]).count();
        rec.push(crossings.to_string());
        w.write_record(&rec).map_err(|e| AqmmError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Fitted smooth curves on an even grid over each basis range, in response units.
pub fn plot_data(bundle: &Bundle) -> Vec<(f64, String, f64, f64)> {
    let mut out = Vec::new();
    for fit in &bundle.fits {
        for term in &bundle.design.smooths {
            let (lo, hi) = term.basis.range();
            let grid: Vec<f64> = (0..PLOT_GRID).map(|k| lo + (hi - lo) * k as f64 / (PLOT_GRID - 1) as f64).collect();
            let raw = term.basis.evaluate(&grid);
            let (nc, pc) = term.reparam.apply(&raw);
            for (r, &x) in grid.iter().enumerate() {
                let mut value = 0.0;
                for (c, j) in term.fixed_cols.clone().enumerate() {
                    value += nc[(r, c)] * fit.beta[j];
                }
                for (c, j) in term.random_cols.clone().enumerate() {
                    value += pc[(r, c)] * fit.v_hat[j];
                }
                out.push((fit.tau, format!("s({})", term.spec.variable), x, value));
            }
        }
    }
    out
}

pub fn write_plot_data(path: &Path, bundle: &Bundle) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AqmmError::Io(e.to_string()))?;
    w.write_record(["tau", "term", "x", "fit"]).map_err(|e| AqmmError::Io(e.to_string()))?;
    for (tau, term, x, v) in plot_data(bundle) {
        w.write_record([tau.to_string(), term, num17(x), num17(v)])
            .map_err(|e| AqmmError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AqmmError::Io(e.to_string()))?;
    w.write_record([
        "scenario", "n", "M", "method", "tau", "PNR", "bias", "msep", "rmsep", "relbias_b3", "rmse_b3", "relbias_b4", "rmse_b4",
        "converged_rate", "replicates_used",
    ])
    .map_err(|e| AqmmError::Io(e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.n.to_string(), r.m.to_string(), r.method.clone(), r.tau.to_string()];
        rec.extend(
            [r.pnr, r.bias, r.msep, r.rmsep, r.relbias_b3, r.rmse_b3, r.relbias_b4, r.rmse_b4, r.converged_rate]
                .iter()
                .map(|v| num17(*v)),
        );
        rec.push(r.replicates_used.to_string());
        w.write_record(&rec).map_err(|e| AqmmError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable tables: fixed effects with standard errors, random-effect
/// standard deviations and correlations, smooth-term standard deviations and PNR.
pub fn render_report(bundle: &Bundle) -> String {
    let mut s = String::new();
    let taus: Vec<String> = bundle.summary.iter().map(|f| format!("tau = {}", f.tau)).collect();
    let width = 24;
    let col = 22;
    let line = |label: &str, cells: Vec<String>| -> String {
        let mut l = format!("{label:<width$}");
        for c in cells {
            l.push_str(&format!("{c:>col$}"));
        }
        l.push('\n');
        l
    };
    s.push_str(&line("", taus));
    s.push_str("Fixed effects\n");
    if let Some(first) = bundle.summary.first() {
        for (j, row) in first.fixed_effects.iter().enumerate() {
            let cells = bundle
                .summary
                .iter()
                .map(|f| {
                    let c = &f.fixed_effects[j];
                    match c.se {
                        Some(se) => format!("{} ({})", num4(c.estimate), num4(se)),
                        None => num4(c.estimate),
                    }
                })
                .collect();
            s.push_str(&line(&format!("  {}", row.name), cells));
        }
        if !first.random_names.is_empty() {
            s.push_str("Random effects: standard deviations\n");
            for (i, name) in first.random_names.iter().enumerate() {
                s.push_str(&line(&format!("  {name}"), bundle.summary.iter().map(|f| num4(f.random_sd[i])).collect()));
            }
            if first.random_names.len() > 1 {
                s.push_str("Random effects: correlations\n");
                for i in 0..first.random_names.len() {
                    for j in 0..i {
                        let label = format!("  {}, {}", first.random_names[i], first.random_names[j]);
                        s.push_str(&line(&label, bundle.summary.iter().map(|f| num4(f.random_corr[i][j])).collect()));
                    }
                }
            }
        }
        if !first.smooth_names.is_empty() {
            s.push_str("Smooth terms: standard deviations\n");
            for (k, name) in first.smooth_names.iter().enumerate() {
                s.push_str(&line(&format!("  {name}"), bundle.summary.iter().map(|f| num4(f.smooth_sd[k])).collect()));
            }
        }
        s.push_str(&line("PNR", bundle.summary.iter().map(|f| num4(f.pnr)).collect()));
        s.push_str(&line("log-likelihood", bundle.summary.iter().map(|f| num4(f.loglik)).collect()));
        s.push_str(&line("converged", bundle.summary.iter().map(|f| f.converged.to_string()).collect()));
    }
    if let Some(blb) = bundle.blb.as_ref().and_then(|b| b.first()) {
        s.push_str(&format!(
            "Standard errors: bag of little bootstraps, s = {}, b = {}, R = {}\n",
            blb.config.subsets, blb.subset_size, blb.config.replicates
        ));
    }
    s
}

pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut s = format!(
        "{:<14}{:>4}{:>5}{:>7}{:>8}{:>9}{:>9}{:>9}{:>11}{:>11}{:>7}\n",
        "scenario", "n", "M", "tau", "PNR", "bias", "msep", "rmsep", "relbias_b3", "relbias_b4", "conv"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14}{:>4}{:>5}{:>7}{:>8}{:>9}{:>9}{:>9}{:>11}{:>11}{:>7}\n",
            r.scenario,
            r.n,
            r.m,
            r.tau,
            num4(r.pnr),
            num4(r.bias),
            num4(r.msep),
            num4(r.rmsep),
            num4(r.relbias_b3),
            num4(r.relbias_b4),
            num4(r.converged_rate)
        ));
    }
    s
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    threads: usize,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_metadata(dir: &Path, command: &str, started: u64) -> Result<()> {
    let meta = Metadata {
        command,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: now(),
        threads: rayon::current_num_threads(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| AqmmError::Io(e.to_string()))?;
    fs::write(dir.join("metadata.json"), text + "\n")?;
    Ok(())
}

fn config_for(args: &RunArgs) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(args)
}

/// Fit every level (optionally with resampling SEs) and write the bundle and side files.
/// Returns the bundle and whether every fit converged.
pub fn run_fit(cfg: &RunConfig, with_blb: bool) -> Result<(Bundle, bool)> {
    let spec = cfg.model()?;
    let data = read_data(cfg.data_path()?, spec)?;
    let design = assemble(&data, spec)?;
    let fits: Vec<FitResult> = {
        use rayon::prelude::*;
        cfg.taus.par_iter().map(|&tau| fit(&design, tau, &cfg.controls, None)).collect::<Result<_>>()?
    };
    let blb = if with_blb { Some(blb_stderr_for(&design, &fits, &cfg.controls, &cfg.blb)?) } else { None };
    let summary = fits
        .iter()
        .enumerate()
        .map(|(k, f)| summarize(f, blb.as_ref().map(|b| &b[k])))
        .collect();
    let all_converged = fits.iter().all(|f| f.converged);
    let bundle = Bundle {
        config: cfg.clone(),
        design: design.info(),
        summary,
        fits,
        blb,
    };
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    bundle.save(&dir.join(BUNDLE_FILE))?;
    let columns: Vec<Vec<f64>> = bundle.fits.iter().map(|f| f.fitted_level1.clone()).collect();
    write_predictions(&dir.join("predictions.csv"), &cfg.taus, &columns, &vec![false; data.len()], Some(&data.cluster))?;
    write_plot_data(&dir.join("plot_data.csv"), &bundle)?;
    Ok((bundle, all_converged))
}

/// Predict from a stored bundle; returns the prediction columns and fallback flags.
pub fn run_predict(bundle: &Bundle, newdata: &Path, level: Level) -> Result<(Vec<Vec<f64>>, Vec<bool>, Option<Vec<String>>)> {
    let spec = &bundle.design.spec;
    let covariates = spec.covariates();
    let cluster = match level {
        Level::Cluster => Some(spec.cluster.as_str()),
        Level::Population => None,
    };
    let (nrows, columns, labels) = read_table(newdata, &covariates, cluster)?;
    let nd = NewData { nrows, cluster: labels.clone(), columns };
    let mut out = Vec::with_capacity(bundle.fits.len());
    let mut fallback = vec![false; nrows];
    for f in &bundle.fits {
        let p = predict(f, &bundle.design, &nd, level)?;
        fallback = p.fallback;
        out.push(p.values);
    }
    Ok((out, fallback, labels))
}

/// Run every configured scenario and write per-scenario and combined metric files.
pub fn run_simulate(cfg: &RunConfig, taus_given: bool) -> Result<Vec<MetricsTable>> {
    let mut scenarios = if cfg.simulate.scenarios.is_empty() {
        desk_grid(cfg.seed.unwrap_or(1))
    } else {
        cfg.simulate.scenarios.clone()
    };
    if taus_given {
        scenarios.iter_mut().for_each(|s| s.taus = cfg.taus.clone());
    }
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    let mut tables = Vec::new();
    let mut all_rows = Vec::new();
    for sc in &scenarios {
        let table = run_scenario(sc, &cfg.controls)?;
        let name = format!("metrics_{}_n{}_M{}.csv", sc.label(), sc.n, sc.m);
        write_metrics_csv(&dir.join(name), &table.rows)?;
        all_rows.extend(table.rows.iter().cloned());
        tables.push(table);
    }
    write_metrics_csv(&dir.join("metrics.csv"), &all_rows)?;
    let json = serde_json::to_string_pretty(&tables).map_err(|e| AqmmError::Io(e.to_string()))?;
    fs::write(dir.join("metrics.json"), json + "\n")?;
    fs::write(dir.join("metrics.txt"), render_metrics(&all_rows))?;
    Ok(tables)
}

pub fn exit_code(err: &AqmmError) -> i32 {
    match err {
        AqmmError::NonConvergence { .. } | AqmmError::Diagnostic(_) => EXIT_NONCONVERGENCE,
        AqmmError::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn init_threads(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(AqmmError::Config("--jobs must be positive".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Execute a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("aqmm: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let started = now();
    match cli.command {
        Command::Fit(args) => fit_command(&args, false, "fit", started),
        Command::Boot(args) => fit_command(&args, true, "boot", started),
        Command::Predict(args) => {
            init_threads(args.jobs)?;
            let bundle = Bundle::load(&args.bundle)?;
            let level = Level::from_index(args.level)?;
            let (cols, fallback, labels) = run_predict(&bundle, &args.newdata, level)?;
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| args.bundle.parent().map_or_else(PathBuf::new, Path::to_path_buf));
            fs::create_dir_all(&dir)?;
            let taus: Vec<f64> = bundle.fits.iter().map(|f| f.tau).collect();
            let path = dir.join(format!("predictions_level{}.csv", args.level));
            write_predictions(&path, &taus, &cols, &fallback, labels.as_deref())?;
            let n_fallback = fallback.iter().filter(|f| **f).count();
            if n_fallback > 0 {
                eprintln!("aqmm: {n_fallback} rows had unseen clusters and use level-0 predictions");
            }
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Simulate(args) => {
            init_threads(args.jobs)?;
            let cfg = config_for(&args)?;
            let tables = run_simulate(&cfg, !args.tau.is_empty())?;
            let rows: Vec<MetricsRow> = tables.iter().flat_map(|t| t.rows.iter().cloned()).collect();
            print!("{}", render_metrics(&rows));
            write_metadata(&cfg.out_dir(), "simulate", started)?;
            let all = rows.iter().all(|r| r.converged_rate == 1.0);
            Ok(if all { EXIT_OK } else { EXIT_NONCONVERGENCE })
        }
        Command::Report(args) => {
            let bundle = Bundle::load(&args.bundle)?;
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| args.bundle.parent().map_or_else(PathBuf::new, Path::to_path_buf));
            fs::create_dir_all(&dir)?;
            let text = render_report(&bundle);
            fs::write(dir.join("report.txt"), &text)?;
            write_plot_data(&dir.join("plot_data.csv"), &bundle)?;
            print!("{text}");
            Ok(EXIT_OK)
        }
    }
}

fn fit_command(args: &RunArgs, with_blb: bool, name: &str, started: u64) -> Result<i32> {
    init_threads(args.jobs)?;
    if args.config.is_none() {
        return Err(AqmmError::Config(format!("{name} needs --config")));
    }
    let cfg = config_for(args)?;
    let (bundle, all_converged) = run_fit(&cfg, with_blb)?;
    print!("{}", render_report(&bundle));
    write_metadata(&cfg.out_dir(), name, started)?;
    if !all_converged {
        eprintln!("aqmm: at least one quantile level did not converge; results are flagged in the bundle");
        return Ok(EXIT_NONCONVERGENCE);
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::sd_and_corr;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("taus = [0.5]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[controls]\nomega_shrnk = 0.5\n").is_err());
        assert!(RunConfig::from_toml("[blb]\nsubsets = 4\nreplicats = 3\n").is_err());
    }

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_toml(
            r#"
data = "toy.csv"
taus = [0.1, 0.5, 0.9]
[model]
response = "y"
cluster = "id"
linear = ["x"]
[[model.smooth]]
variable = "t"
basis_kind = "cubic_regression"
dimension = 6
"#,
        )
        .unwrap();
        assert_eq!(cfg.taus, vec![0.1, 0.5, 0.9]);
        let m = cfg.model.unwrap();
        assert_eq!(m.smooth[0].dimension, 6);
        assert!(m.random.intercept);
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let args = RunArgs { config: None, seed: Some(42), jobs: None, out: None, tau: vec![0.25] };
        let mut cfg = RunConfig::default();
        cfg.simulate.scenarios.push(SimScenario::default());
        let cfg = cfg.resolve(&args).unwrap();
        assert_eq!(cfg.controls.seed, 42);
        assert_eq!(cfg.blb.seed, 42);
        assert_eq!(cfg.simulate.scenarios[0].seed, 42);
        assert_eq!(cfg.taus, vec![0.25]);
    }

    #[test]
    fn bad_tau_is_a_config_error() {
        let args = RunArgs { config: None, seed: None, jobs: None, out: None, tau: vec![1.5] };
        assert!(matches!(RunConfig::default().resolve(&args), Err(AqmmError::Config(_))));
    }

    #[test]
    fn number_formats() {
        let x = 0.1 + 0.2;
        assert_eq!(num17(x).parse::<f64>().unwrap(), x);
        assert_eq!(num17(x), "3.0000000000000004e-1");
        assert_eq!(num4(1234.5678), "1235");
        assert_eq!(num4(0.012345), "0.01235");
        assert_eq!(num4(-2.5), "-2.500");
    }

    #[test]
    fn correlations_from_covariance() {
        let (sd, corr) = sd_and_corr(&[vec![4.0, 1.2], vec![1.2, 1.0]]);
        assert_eq!(sd, vec![2.0, 1.0]);
        assert!((corr[1][0] - 0.6).abs() < 1e-15);
        assert_eq!(corr[0][0], 1.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&AqmmError::Data("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&AqmmError::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&AqmmError::Diagnostic("x".into())), EXIT_NONCONVERGENCE);
    }
}
