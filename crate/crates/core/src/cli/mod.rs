//! Command-line front end: `edit`, `compare` and `selftest`.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 usage or config error,
//! 3 runtime abort (for `compare`: at least one run failed).
//!
//! Outputs go under `--out`, else `$SCORE_DISTILL_OUT`, else `./out`.
//! Every file is written via temp-file-and-rename.

pub mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::edit::{run_edit, EditConfig, EditRun, LogRecord, Manifest, RunFailure, LOG_COLUMNS_VERSION};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io::{is_pixel_grid, npy_bytes, png_bytes, write_atomic};
use crate::metrics::{write_metric_csv, MetricRow};
use crate::selftest;

pub const OUT_ENV: &str = "SCORE_DISTILL_OUT";
pub const DEFAULT_OUT: &str = "out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "score-distill", version, about = "Score-distillation editing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one edit from a config (or a previously written manifest).
    Edit {
        config: PathBuf,
        /// Output root; the run is written to `<out>/<run_id>/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs that differ only in the sweep keys and compare them.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Dotted config path being swept, e.g. `weights.w_t`. Repeatable;
        /// `key=v1,v2` additionally declares the expected values.
        #[arg(long = "sweep", required = true)]
        sweep: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Name of the comparison directory under the output root.
        #[arg(long, default_value = "compare")]
        name: String,
        /// Skip `grid.png` and `curves.png`.
        #[arg(long)]
        no_plots: bool,
        /// Run the configs one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[arg(long)]
        sequential: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Edit { config, out } => cmd_edit(&config, &output_root(out)),
        Command::Compare {
            configs,
            sweep,
            out,
            name,
            no_plots,
            sequential,
        } => {
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            let spec = match ExperimentSpec::load(&configs, &sweep, output_root(out).join(name), !no_plots) {
                Ok(spec) => spec,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            };
            cmd_compare(&spec, exec)
        }
        Command::Selftest { sequential } => {
            cmd_selftest(if sequential { Exec::Sequential } else { Exec::default() })
        }
    }
}

pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn check_run_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Config(format!("invalid run_id `{id}`")));
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<EditConfig> {
    let cfg = EditConfig::load(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    check_run_id(&cfg.run_id).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.prepare().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Final image file name: PNG when the source came from a PNG and the
/// result is still a pixel grid, `.npy` otherwise.
pub fn final_image_name(cfg: &EditConfig, image: &crate::Field) -> &'static str {
    if cfg.source.is_png() && is_pixel_grid(image) {
        "final.png"
    } else {
        "final.npy"
    }
}

pub fn manifest_for(cfg: &EditConfig, image_name: &str) -> Manifest {
    Manifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        log_columns_version: LOG_COLUMNS_VERSION.to_string(),
        log_columns: LogRecord::COLUMNS.iter().map(|c| c.to_string()).collect(),
        seeds: cfg.seeds,
        config: cfg.clone(),
        outputs: BTreeMap::from([
            ("final_image".to_string(), image_name.to_string()),
            ("log".to_string(), "log.csv".to_string()),
        ]),
    }
}

fn write_success(dir: &Path, cfg: &EditConfig, run: &EditRun) -> Result<()> {
    let name = final_image_name(cfg, &run.final_image);
    let bytes = if name.ends_with(".png") {
        png_bytes(&run.final_image)?
    } else {
        npy_bytes(&run.final_image)?
    };
    write_atomic(&dir.join(name), &bytes)?;
    write_atomic(&dir.join("log.csv"), run.log.to_csv_string()?.as_bytes())?;
    let mut manifest = serde_json::to_string_pretty(&manifest_for(cfg, name))?;
    manifest.push('\n');
    write_atomic(&dir.join("manifest.json"), manifest.as_bytes())
}

fn write_failure(dir: &Path, failure: &RunFailure) -> Result<()> {
    write_atomic(&dir.join("log.csv"), failure.log.to_csv_string()?.as_bytes())?;
    write_atomic(&dir.join("error.txt"), format!("{failure}\n").as_bytes())
}

/// Runs one config and writes its artifacts to `<root>/<run_id>/`.
fn execute(cfg: &EditConfig, root: &Path) -> std::result::Result<EditRun, String> {
    let dir = root.join(&cfg.run_id);
    match run_edit(cfg) {
        Ok(run) => match write_success(&dir, cfg, &run) {
            Ok(()) => Ok(run),
            Err(e) => Err(format!("writing outputs: {e}")),
        },
        Err(failure) => {
            let mut msg = failure.to_string();
            if let Err(e) = write_failure(&dir, &failure) {
                msg.push_str(&format!("; writing failure report: {e}"));
            }
            Err(msg)
        }
    }
}

pub fn cmd_edit(config: &Path, root: &Path) -> i32 {
    let cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(&cfg, root) {
        Ok(run) => {
            let last = run.log.records.last();
            println!(
                "{}: {} iterations, mse_to_source {:.6e} -> {}",
                cfg.run_id,
                run.log.len(),
                last.map_or(0.0, |r| r.mse_to_source),
                root.join(&cfg.run_id).display()
            );
            EXIT_OK
        }
        Err(msg) => {
            eprintln!("error: run `{}` aborted: {msg}", cfg.run_id);
            EXIT_ABORT
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepKey {
    pub path: String,
    /// Values declared with `key=v1,v2`; empty when not declared.
    pub declared: Vec<String>,
}

impl SweepKey {
    pub fn parse(spec: &str) -> Result<Self> {
        let (path, values) = match spec.split_once('=') {
            Some((p, v)) => (p, v.split(',').map(|s| s.trim().to_string()).collect()),
            None => (spec, Vec::new()),
        };
        let path = path.trim();
        if path.is_empty() || path.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("bad sweep key `{spec}`")));
        }
        Ok(Self {
            path: path.to_string(),
            declared: values,
        })
    }

    fn pointer(&self) -> String {
        self.path.split('.').fold(String::new(), |acc, part| acc + "/" + part)
    }
}

/// Renders a JSON value as a CSV cell: strings unquoted, the rest compact.
pub fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for key in x.keys().chain(y.keys()) {
                let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match (x.get(key), y.get(key)) {
                    (Some(p), Some(q)) => {
                        if let Some(d) = first_difference(p, q, &sub) {
                            return Some(d);
                        }
                    }
                    _ => return Some(sub),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some(if path.is_empty() { "<root>".into() } else { path.into() }),
    }
}

/// A validated multi-run comparison.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub configs: Vec<EditConfig>,
    pub sweep: Vec<SweepKey>,
    /// `sweep_values[run][key]`, rendered.
    pub sweep_values: Vec<Vec<String>>,
    pub out_dir: PathBuf,
    pub plots: bool,
}

impl ExperimentSpec {
    pub fn new(configs: Vec<EditConfig>, sweep: Vec<SweepKey>, out_dir: PathBuf, plots: bool) -> Result<Self> {
        if configs.len() < 2 {
            return Err(Error::Config("compare needs at least two configs".into()));
        }
        if sweep.is_empty() {
            return Err(Error::Config("compare needs at least one --sweep key".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &configs {
            check_run_id(&c.run_id)?;
            if !seen.insert(c.run_id.clone()) {
                return Err(Error::Config(format!("duplicate run_id `{}`", c.run_id)));
            }
        }
        let mut stripped = Vec::with_capacity(configs.len());
        let mut sweep_values = Vec::with_capacity(configs.len());
        for c in &configs {
            let mut v = serde_json::to_value(c)?;
            let mut row = Vec::new();
            for key in &sweep {
                let slot = v
                    .pointer_mut(&key.pointer())
                    .ok_or_else(|| Error::Config(format!("sweep key `{}` not found in `{}`", key.path, c.run_id)))?;
                row.push(render_value(slot));
                *slot = Value::Null;
            }
            if let Value::Object(map) = &mut v {
                map.remove("run_id");
            }
            stripped.push(v);
            sweep_values.push(row);
        }
        for (c, v) in configs.iter().zip(&stripped).skip(1) {
            if let Some(path) = first_difference(&stripped[0], v, "") {
                return Err(Error::Config(format!(
                    "`{}` and `{}` differ in `{path}`, which is not a sweep key",
                    configs[0].run_id, c.run_id
                )));
            }
        }
        for (k, key) in sweep.iter().enumerate() {
            if key.declared.is_empty() {
                continue;
            }
            let found: std::collections::BTreeSet<&str> = sweep_values.iter().map(|r| r[k].as_str()).collect();
            let declared: std::collections::BTreeSet<&str> = key.declared.iter().map(String::as_str).collect();
            if found != declared {
                return Err(Error::Config(format!(
                    "sweep `{}` declares values {declared:?} but the configs have {found:?}",
                    key.path
                )));
            }
        }
        Ok(Self {
            configs,
            sweep,
            sweep_values,
            out_dir,
            plots,
        })
    }

    pub fn load(paths: &[PathBuf], sweep: &[String], out_dir: PathBuf, plots: bool) -> Result<Self> {
        if paths.len() < 2 {
            return Err(Error::Config("compare needs at least two configs".into()));
        }
        let sweep = sweep.iter().map(|s| SweepKey::parse(s)).collect::<Result<Vec<_>>>()?;
        // configs that fail validation are still run so that they show up
        // as failures; only parse errors stop the comparison
        let configs = paths
            .iter()
            .map(|p| EditConfig::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(configs, sweep, out_dir, plots)
    }

    /// Grid position of each run: two sweep keys give a `first × second`
    /// grid, anything else a single row in run order.
    pub fn layout(&self) -> (usize, usize, Vec<(usize, usize)>) {
        if self.sweep.len() == 2 {
            let distinct = |k: usize| {
                let mut vals: Vec<&str> = Vec::new();
                for row in &self.sweep_values {
                    if !vals.contains(&row[k].as_str()) {
                        vals.push(&row[k]);
                    }
                }
                vals
            };
            let (rows, cols) = (distinct(0), distinct(1));
            let pos = self
                .sweep_values
                .iter()
                .map(|r| {
                    (
                        rows.iter().position(|v| *v == r[0]).unwrap(),
                        cols.iter().position(|v| *v == r[1]).unwrap(),
                    )
                })
                .collect();
            (rows.len(), cols.len(), pos)
        } else {
            let n = self.configs.len();
            (1, n, (0..n).map(|i| (0, i)).collect())
        }
    }
}

/// Outcome of a comparison, also written to disk by [`cmd_compare`].
#[derive(Debug)]
pub struct CompareReport {
    pub rows: usize,
    pub failures: Vec<(String, String)>,
}

pub fn run_compare(spec: &ExperimentSpec, exec: Exec) -> Result<CompareReport> {
    let runs_root = spec.out_dir.join("runs");
    let results = exec.map_items(&spec.configs, |cfg| execute(cfg, &runs_root));

    let regions: Vec<String> = spec
        .configs
        .iter()
        .flat_map(|c| c.regions.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut table = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run_id".to_string()];
    header.extend(spec.sweep.iter().map(|k| k.path.clone()));
    header.extend(["final_mse_to_source".into(), "final_grad_norm".into()]);
    header.extend(regions.iter().map(|r| format!("region_mse_{r}")));
    table.write_record(&header)?;

    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    let mut rows = 0;
    for ((cfg, values), result) in spec.configs.iter().zip(&spec.sweep_values).zip(&results) {
        let run = match result {
            Ok(run) => run,
            Err(msg) => {
                failures.push((cfg.run_id.clone(), msg.clone()));
                continue;
            }
        };
        let mse = crate::metrics::mse(&run.final_image, &run.source_image)?;
        let grad = run.log.records.last().map_or(0.0, |r| r.grad_norm);
        let mut record = vec![cfg.run_id.clone()];
        record.extend(values.iter().cloned());
        record.extend([mse.to_string(), grad.to_string()]);
        metrics.push(MetricRow {
            run_id: cfg.run_id.clone(),
            metric_name: "mse_to_source".into(),
            value: mse,
        });
        metrics.push(MetricRow {
            run_id: cfg.run_id.clone(),
            metric_name: "final_grad_norm".into(),
            value: grad,
        });
        for r in &regions {
            match cfg.regions.get(r) {
                Some(idx) => {
                    let v = run.region_mse(idx)?;
                    record.push(v.to_string());
                    metrics.push(MetricRow {
                        run_id: cfg.run_id.clone(),
                        metric_name: format!("region_mse_{r}"),
                        value: v,
                    });
                }
                None => record.push(String::new()),
            }
        }
        table.write_record(&record)?;
        rows += 1;
    }
    let table = table.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&spec.out_dir.join("compare.csv"), &table)?;

    let mut buf = Vec::new();
    write_metric_csv(&mut buf, &metrics)?;
    write_atomic(&spec.out_dir.join("metrics.csv"), &buf)?;

    let mut fail_csv = csv::Writer::from_writer(Vec::new());
    fail_csv.write_record(["run_id", "error"])?;
    for (id, msg) in &failures {
        fail_csv.write_record([id, msg])?;
    }
    let fail_csv = fail_csv.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&spec.out_dir.join("failures.csv"), &fail_csv)?;

    if spec.plots {
        let (nr, nc, pos) = spec.layout();
        let mut cells: Vec<Vec<Option<image::RgbImage>>> = vec![vec![None; nc]; nr];
        for (result, &(r, c)) in results.iter().zip(&pos) {
            cells[r][c] = Some(match result {
                Ok(run) => plot::tile(&run.final_image),
                Err(_) => plot::failed_tile(),
            });
        }
        write_atomic(&spec.out_dir.join("grid.png"), &plot::png_bytes(&plot::grid(&cells))?)?;
        let logs: Vec<Option<&crate::edit::EditLog>> = results.iter().map(|r| r.as_ref().ok().map(|run| &run.log)).collect();
        write_atomic(&spec.out_dir.join("curves.png"), &plot::png_bytes(&plot::curves(&logs))?)?;
    }
    Ok(CompareReport { rows, failures })
}

pub fn cmd_compare(spec: &ExperimentSpec, exec: Exec) -> i32 {
    match run_compare(spec, exec) {
        Ok(report) => {
            println!(
                "{} of {} runs succeeded; results in {}",
                report.rows,
                spec.configs.len(),
                spec.out_dir.display()
            );
            for (id, msg) in &report.failures {
                eprintln!("failed: {id}: {msg}");
            }
            if report.failures.is_empty() {
                EXIT_OK
            } else {
                EXIT_ABORT
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ABORT
        }
    }
}

pub fn cmd_selftest(exec: Exec) -> i32 {
    let reports = selftest::run_all(exec);
    print!("{}", selftest::format_table(&reports));
    let passed = reports.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} suites passed ({})", reports.len(), exec.name());
    if passed == reports.len() {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}
