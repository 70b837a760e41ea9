//! Per-iteration diagnostics and their on-disk form.

use std::path::Path;

use ndarray::Array2;

use crate::agent::{greedy_actions, Transition};
use crate::neural::{forward, NetworkParams};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "iteration,active_return,passive_return,relative_perf,disagreement,overestimation,active_loss,passive_loss,mc_error,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub active_return: f64,
    pub passive_return: f64,
    pub relative_perf: f64,
    pub disagreement: f64,
    pub overestimation: f64,
    /// Mean training loss over the iteration; NaN when no update happened.
    pub active_loss: f64,
    pub passive_loss: f64,
    pub mc_error: Option<f64>,
    pub wall_seconds: f64,
}

/// Passive return as a fraction of active return, per iteration.
///
/// With `m` the minimum of both series over all iterations, each entry is
/// `(R_p − m)/(R_a − m)` clipped to `[0, 1]`, and exactly 1 wherever `R_a = m`.
pub fn relative_performance(active: &[f64], passive: &[f64]) -> Result<Vec<f64>> {
    if active.len() != passive.len() || active.is_empty() {
        return Err(Error::usage("return series must be non-empty and of equal length"));
    }
    let floor = active
        .iter()
        .chain(passive)
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(active
        .iter()
        .zip(passive)
        .map(|(&ra, &rp)| {
            if ra == floor {
                1.0
            } else {
                ((rp - floor) / (ra - floor)).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// States sampled from the active replay at evaluation time, one per row.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub states: Array2<f64>,
}

impl ProbeSet {
    pub fn from_states(states: &[&[f64]]) -> Result<Self> {
        let dim = states.first().map(|s| s.len()).ok_or_else(|| Error::usage("empty probe set"))?;
        let flat: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
        Ok(Self {
            states: Array2::from_shape_vec((states.len(), dim), flat)
                .map_err(|_| Error::usage("probe states have inconsistent widths"))?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Fraction of probe states on which the two greedy policies pick different actions.
pub fn policy_disagreement(active: &NetworkParams, passive: &NetworkParams, probes: &ProbeSet) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::usage("empty probe set"));
    }
    let a = greedy_actions(&forward(active, probes.states.view())?);
    let p = greedy_actions(&forward(passive, probes.states.view())?);
    let differing = a.iter().zip(&p).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / probes.len() as f64)
}

/// How passive values are compared against active ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverestimationKind {
    /// `max_a Q_P(s,a) − max_a Q_A(s,a)`
    #[default]
    MaxVsMax,
    /// `Q_P(s, a*) − Q_A(s, a*)` with `a*` the active greedy action.
    ActiveArgmax,
}

impl OverestimationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OverestimationKind::MaxVsMax => "max_vs_max",
            OverestimationKind::ActiveArgmax => "active_argmax",
        }
    }
}

impl std::str::FromStr for OverestimationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max_vs_max" => Ok(Self::MaxVsMax),
            "active_argmax" => Ok(Self::ActiveArgmax),
            other => Err(Error::config(
                "metrics.overestimation",
                format!("unknown definition `{other}`"),
            )),
        }
    }
}

/// Mean passive-minus-active value gap over the probes.
pub fn value_overestimation(
    active: &NetworkParams,
    passive: &NetworkParams,
    probes: &ProbeSet,
    kind: OverestimationKind,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::usage("empty probe set"));
    }
    let qa = forward(active, probes.states.view())?;
    let qp = forward(passive, probes.states.view())?;
    let total: f64 = match kind {
        OverestimationKind::MaxVsMax => qa
            .rows()
            .into_iter()
            .zip(qp.rows())
            .map(|(a, p)| {
                let max = |r: ndarray::ArrayView1<f64>| r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max(p) - max(a)
            })
            .sum(),
        OverestimationKind::ActiveArgmax => greedy_actions(&qa)
            .iter()
            .enumerate()
            .map(|(r, &a)| qp[[r, a]] - qa[[r, a]])
            .sum(),
    };
    Ok(total / probes.len() as f64)
}

/// Mean absolute error `|Q(s,a) − G|` over transitions carrying a Monte-Carlo return.
pub fn mc_error(params: &NetworkParams, transitions: &[&Transition]) -> Result<f64> {
    if transitions.is_empty() {
        return Err(Error::usage("no transitions to measure"));
    }
    let states: Vec<&[f64]> = transitions.iter().map(|t| t.state.as_slice()).collect();
    let probes = ProbeSet::from_states(&states)?;
    let q = forward(params, probes.states.view())?;
    let mut total = 0.0;
    for (r, t) in transitions.iter().enumerate() {
        let g = t
            .mc_return
            .ok_or_else(|| Error::usage("transition without a Monte-Carlo return"))?;
        total += (q[[r, t.action]] - g).abs();
    }
    Ok(total / transitions.len() as f64)
}

fn format_value(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v:?}")
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer
        .write_record(CSV_HEADER.split(','))
        .expect("writing to memory");
    for row in rows {
        let mc = row.mc_error.map(format_value).unwrap_or_default();
        writer
            .write_record([
                row.iteration.to_string(),
                format_value(row.active_return),
                format_value(row.passive_return),
                format_value(row.relative_perf),
                format_value(row.disagreement),
                format_value(row.overestimation),
                format_value(row.active_loss),
                format_value(row.passive_loss),
                mc,
                format_value(row.wall_seconds),
            ])
            .expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("ASCII output")
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER.split(',')) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let fields = record.map_err(|e| bad(format!("line {line}: {e}")))?;
        if fields.len() != 10 {
            return Err(bad(format!("line {line}: expected 10 fields")));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("line {line}: bad number `{}`", &fields[i])))
        };
        rows.push(MetricsRow {
            iteration: fields[0]
                .parse()
                .map_err(|_| bad(format!("line {line}: bad iteration")))?,
            active_return: num(1)?,
            passive_return: num(2)?,
            relative_perf: num(3)?,
            disagreement: num(4)?,
            overestimation: num(5)?,
            active_loss: num(6)?,
            passive_loss: num(7)?,
            mc_error: if fields[8].is_empty() { None } else { Some(num(8)?) },
            wall_seconds: num(9)?,
        });
    }
    Ok(rows)
}

/// Writes `metrics.csv` and then `manifest.txt` into `dir`, creating it if needed.
/// The manifest goes last so its presence marks a completed run.
pub fn write_metrics(rows: &[MetricsRow], manifest: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    std::fs::write(&metrics_path, metrics_csv(rows)).map_err(|e| Error::io(&metrics_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text, path)
}
