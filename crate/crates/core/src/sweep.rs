//! Multi-run plumbing: single runs written to disk, seeded sweeps over override
//! grids, and aggregation of finished runs into summary tables.
//!
//! Results live at `<root>/<cell>/<seed>/{metrics.csv, manifest.txt}`. The manifest
//! is written last, so its presence marks a finished run.
//!
//! A sweep file (TOML) names a base configuration, the seeds and any number of
//! axes; each axis entry is a labelled set of overrides:
//!
//! ```toml
//! config = "cartpole.toml"
//! out = "results"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [base]
//! experiment.iterations = 100
//!
//! [axis.mix]
//! p01 = { mode.tag = "self_data_mix", mode.p_self = 0.1 }
//! p05 = { mode.tag = "self_data_mix", mode.p_self = 0.5 }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{manifest, ConfigFile};
use crate::metrics::{read_metrics, relative_performance, write_metrics, MetricsRow, MANIFEST_FILE, METRICS_FILE};
use crate::tandem::{run_experiment, ExperimentConfig};
use crate::{Error, Result};

/// One labelled point on an axis: a set of overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisValue {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<AxisValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ConfigFile,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub axes: Vec<Axis>,
}

/// A fully resolved run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl SweepSpec {
    /// Parses a sweep file; relative `config` and `out` paths resolve against `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("syntax", e.to_string().trim_end()))?;
        let string = |table: &mut toml::Table, key: &str| -> Result<Option<String>> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(Error::config(key, "expected a string")),
            }
        };
        let config_path = string(&mut table, "config")?;
        let out = string(&mut table, "out")?.ok_or_else(|| Error::config("out", "sweep output directory is required"))?;
        let seeds = match table.remove("seeds") {
            None => vec![0],
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                    _ => Err(Error::config("seeds", "expected non-negative integers")),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(Error::config("seeds", "expected a list of integers")),
        };
        if seeds.is_empty() {
            return Err(Error::config("seeds", "empty list"));
        }
        let mut base = match config_path {
            Some(path) => ConfigFile::load(&dir.join(path))?,
            None => ConfigFile::default(),
        };
        if let Some(inline) = table.remove("base") {
            let inline = as_table(inline, "base")?;
            for (key, value) in ConfigFile::from_table(&inline)?.entries() {
                base.set(key, value);
            }
        }
        let mut axes = Vec::new();
        if let Some(axis_tables) = table.remove("axis") {
            for (name, values) in as_table(axis_tables, "axis")? {
                let section = format!("axis.{name}");
                let values = as_table(values, &section)?
                    .into_iter()
                    .map(|(label, overrides)| {
                        let overrides = as_table(overrides, &format!("{section}.{label}"))?;
                        let overrides = ConfigFile::from_table(&overrides)?
                            .entries()
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .collect();
                        Ok(AxisValue { label, overrides })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if values.is_empty() {
                    return Err(Error::config(section, "axis has no values"));
                }
                axes.push(Axis { name, values });
            }
        }
        if let Some(key) = table.keys().next() {
            return Err(Error::config(key.clone(), "unknown sweep key (expected config, out, seeds, base, axis)"));
        }
        Ok(Self {
            base,
            out: dir.join(out),
            seeds,
            axes,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Number of runs before grid modes are expanded.
    pub fn cartesian_size(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product::<usize>() * self.seeds.len()
    }

    /// Resolves and validates every run. Grid modes inside a cell expand into
    /// sub-cells named `<cell>_<label>`.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        let mut combos: Vec<(Vec<&str>, ConfigFile)> = vec![(Vec::new(), self.base.clone())];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(combos.len() * axis.values.len());
            for (labels, file) in &combos {
                for value in &axis.values {
                    let mut file = file.clone();
                    for (k, v) in &value.overrides {
                        file.set(k, v);
                    }
                    let mut labels = labels.clone();
                    labels.push(&value.label);
                    next.push((labels, file));
                }
            }
            combos = next;
        }
        let mut cells = Vec::new();
        let mut seen = HashSet::new();
        for (labels, file) in combos {
            let name = if labels.is_empty() {
                "base".to_string()
            } else {
                labels.join("_")
            };
            let config = file
                .to_config()
                .map_err(|e| Error::config(format!("cell {name}"), e.to_string()))?;
            for (label, expanded) in config.expand() {
                let cell_name = if label.is_empty() {
                    name.clone()
                } else {
                    format!("{name}_{label}")
                };
                for &seed in &self.seeds {
                    let mut config = expanded.clone();
                    config.seed = seed;
                    let dir = self.out.join(&cell_name).join(seed.to_string());
                    if !seen.insert(dir.clone()) {
                        return Err(Error::config(cell_name, "two cells map to the same directory"));
                    }
                    cells.push(SweepCell {
                        name: cell_name.clone(),
                        seed,
                        config,
                        dir,
                    });
                }
            }
        }
        Ok(cells)
    }
}

fn as_table(value: toml::Value, key: &str) -> Result<toml::Table> {
    match value {
        toml::Value::Table(table) => Ok(table),
        _ => Err(Error::config(key, "expected a table")),
    }
}

/// Runs `config` and writes its results into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows = run_experiment(config)?;
    write_metrics(&rows, &manifest(config), dir)?;
    Ok(rows)
}

/// Runs a (possibly grid-valued) config. Plain modes write into `out`; grid modes
/// write one sub-directory per expanded cell. Returns the directories written.
pub fn run_config(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let expanded = config.expand();
    let mut dirs = Vec::new();
    for (label, cfg) in expanded {
        let dir = if label.is_empty() { out.to_path_buf() } else { out.join(label) };
        run_to_dir(&cfg, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellOutcome {
    Completed,
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, Default)]
pub struct SweepSummary {
    /// Per-run outcomes, sorted by directory.
    pub outcomes: Vec<(PathBuf, CellOutcome)>,
}

impl SweepSummary {
    pub fn count(&self, pred: impl Fn(&CellOutcome) -> bool) -> usize {
        self.outcomes.iter().filter(|(_, o)| pred(o)).count()
    }

    pub fn completed(&self) -> usize {
        self.count(|o| *o == CellOutcome::Completed)
    }

    pub fn skipped(&self) -> usize {
        self.count(|o| *o == CellOutcome::Skipped)
    }

    pub fn failed(&self) -> usize {
        self.count(|o| matches!(o, CellOutcome::Failed(_)))
    }

    pub fn all_failed(&self) -> bool {
        !self.outcomes.is_empty() && self.failed() == self.outcomes.len()
    }
}

/// Runs every cell with up to `parallel` workers. With `resume`, cells whose
/// manifest already exists are skipped. Failures are recorded per cell and do not
/// stop the others.
pub fn run_sweep(cells: &[SweepCell], parallel: usize, resume: bool) -> Result<SweepSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?;
    let mut outcomes: Vec<(PathBuf, CellOutcome)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let outcome = if resume && is_complete(&cell.dir) {
                    CellOutcome::Skipped
                } else {
                    match run_to_dir(&cell.config, &cell.dir) {
                        Ok(_) => CellOutcome::Completed,
                        Err(e) => CellOutcome::Failed(e.to_string()),
                    }
                };
                (cell.dir.clone(), outcome)
            })
            .collect()
    });
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(SweepSummary { outcomes })
}

/// Mean, half population standard deviation, min and max of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub half_std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            half_std: 0.5 * var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub cell: String,
    pub iteration: usize,
    pub seeds: usize,
    pub active: Stats,
    pub passive: Stats,
    pub relative: Stats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub runs: usize,
    /// Run directories without a finished, readable result.
    pub skipped: Vec<PathBuf>,
}

fn find_runs(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            subdirs.push(entry.path());
        }
    }
    let has_files = dir.join(METRICS_FILE).exists() || dir.join(MANIFEST_FILE).exists();
    if has_files || (subdirs.is_empty() && dir != root) {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    subdirs.sort();
    for sub in subdirs {
        find_runs(&sub, root, out)?;
    }
    Ok(())
}

/// Aggregates every run under `root` per (cell, iteration). The cell of a run is
/// its parent directory relative to `root`.
pub fn collect_report(root: &Path) -> Result<Report> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "results root is not a directory"),
        ));
    }
    let mut dirs = Vec::new();
    find_runs(root, root, &mut dirs)?;
    let mut cells: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    let mut report = Report::default();
    for dir in dirs {
        let rows = if is_complete(&dir) {
            read_metrics(&dir.join(METRICS_FILE)).ok().filter(|rows| !rows.is_empty())
        } else {
            None
        };
        let Some(rows) = rows else {
            report.skipped.push(dir);
            continue;
        };
        let cell = dir
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        cells.entry(cell).or_default().push(rows);
        report.runs += 1;
    }
    if report.runs == 0 {
        return Err(Error::usage(format!("no completed runs under {}", root.display())));
    }
    for (cell, runs) in cells {
        let relatives: Vec<Vec<f64>> = runs
            .iter()
            .map(|rows| {
                let a: Vec<f64> = rows.iter().map(|r| r.active_return).collect();
                let p: Vec<f64> = rows.iter().map(|r| r.passive_return).collect();
                relative_performance(&a, &p)
            })
            .collect::<Result<_>>()?;
        let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            let present: Vec<usize> = (0..runs.len()).filter(|&r| i < runs[r].len()).collect();
            let column = |f: &dyn Fn(usize) -> f64| Stats::of(&present.iter().map(|&r| f(r)).collect::<Vec<_>>());
            report.rows.push(ReportRow {
                cell: cell.clone(),
                iteration: runs[present[0]][i].iteration,
                seeds: present.len(),
                active: column(&|r| runs[r][i].active_return),
                passive: column(&|r| runs[r][i].passive_return),
                relative: column(&|r| relatives[r][i]),
            });
        }
    }
    Ok(report)
}

/// Plot-ready CSV of a report; relative-performance columns only with `relative`.
pub fn report_csv(report: &Report, relative: bool) -> String {
    let groups: &[&str] = if relative {
        &["active", "passive", "relative"]
    } else {
        &["active", "passive"]
    };
    let mut out = String::from("cell,iteration,seeds");
    for g in groups {
        for stat in ["mean", "half_std", "min", "max"] {
            let _ = write!(out, ",{g}_{stat}");
        }
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{},{},{}", row.cell, row.iteration, row.seeds);
        let mut stats = vec![row.active, row.passive];
        if relative {
            stats.push(row.relative);
        }
        for s in stats {
            let _ = write!(out, ",{:?},{:?},{:?},{:?}", s.mean, s.half_std, s.min, s.max);
        }
        out.push('\n');
    }
    out
}
