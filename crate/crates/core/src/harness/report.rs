//! Per-round aggregation and CSV serialization.

use std::fs;
use std::path::Path;

use super::{RoundRecord, RunOutcome, RunResult};
use crate::error::{Error, Result};

pub const RUN_HEADER: &str = "round,points_total,rmse,criterion,criterion_value,zeta_min,wall_ms";
pub const AGGREGATE_HEADER: &str =
    "round,points_total,rmse_median,rmse_q1,rmse_q3,criterion_value_median";

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub round: usize,
    pub points_total: usize,
    pub rmse_median: f64,
    pub rmse_q1: f64,
    pub rmse_q3: f64,
    pub criterion_value_median: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    /// Every run in seed order, failed ones included.
    pub runs: Vec<RunOutcome>,
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

impl Aggregate {
    pub fn from_runs(runs: Vec<RunOutcome>) -> Self {
        let done: Vec<&RunResult> = runs.iter().filter_map(RunOutcome::completed).collect();
        let rounds = done.iter().map(|r| r.per_round.len()).min().unwrap_or(0);
        let rows = (0..rounds)
            .map(|t| {
                let recs: Vec<&RoundRecord> = done.iter().map(|r| &r.per_round[t]).collect();
                let rmse: Vec<f64> = recs.iter().map(|r| r.rmse).collect();
                let crit: Vec<f64> = recs.iter().map(|r| r.criterion_value).collect();
                AggregateRow {
                    round: recs[0].round,
                    points_total: recs[0].points_total,
                    rmse_median: median(&rmse),
                    rmse_q1: quantile(&rmse, 0.25),
                    rmse_q3: quantile(&rmse, 0.75),
                    criterion_value_median: median(&crit),
                }
            })
            .collect();
        Self { rows, runs }
    }

    pub fn completed(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter_map(RunOutcome::completed)
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &str)> {
        self.runs.iter().filter_map(|r| match r {
            RunOutcome::Failed { seed, reason } => Some((*seed, reason.as_str())),
            RunOutcome::Completed(_) => None,
        })
    }
}

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Run table. `wall_ms` is left empty unless `timing` is set, so the
/// default output depends only on the configuration and seed.
pub fn run_csv(result: &RunResult, timing: bool) -> String {
    let mut out = String::from(RUN_HEADER);
    out.push('\n');
    for r in &result.per_round {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.points_total,
            format_float(r.rmse),
            result.config.criterion,
            format_float(r.criterion_value),
            r.zeta_min.map(format_float).unwrap_or_default(),
            if timing {
                format_float(r.wall_ms)
            } else {
                String::new()
            },
        ));
    }
    out
}

pub fn aggregate_csv(agg: &Aggregate) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in &agg.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            r.points_total,
            format_float(r.rmse_median),
            format_float(r.rmse_q1),
            format_float(r.rmse_q3),
            format_float(r.criterion_value_median),
        ));
    }
    out
}

pub fn emit_run_csv(result: &RunResult, path: &Path, timing: bool) -> Result<()> {
    fs::write(path, run_csv(result, timing))?;
    Ok(())
}

pub fn emit_aggregate_csv(agg: &Aggregate, path: &Path) -> Result<()> {
    fs::write(path, aggregate_csv(agg))?;
    Ok(())
}

fn field<T: std::str::FromStr>(line: usize, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| Error::Parse {
        line,
        msg: format!("'{s}': {e}"),
    })
}

fn body<'a>(text: &'a str, header: &str, width: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "unexpected header".into(),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != width {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {width} columns, found {}", cols.len()),
                });
            }
            Ok((i + 1, cols))
        })
        .collect()
}

/// Parses a run table back into round records; the criterion column is dropped.
pub fn parse_run_csv(text: &str) -> Result<Vec<RoundRecord>> {
    body(text, RUN_HEADER, 7)?
        .into_iter()
        .map(|(line, c)| {
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    field(line, s).map(Some)
                }
            };
            Ok(RoundRecord {
                round: field(line, c[0])?,
                points_total: field(line, c[1])?,
                rmse: field(line, c[2])?,
                criterion_value: field(line, c[4])?,
                zeta_min: opt(c[5])?,
                wall_ms: opt(c[6])?.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
    body(text, AGGREGATE_HEADER, 6)?
        .into_iter()
        .map(|(line, c)| {
            Ok(AggregateRow {
                round: field(line, c[0])?,
                points_total: field(line, c[1])?,
                rmse_median: field(line, c[2])?,
                rmse_q1: field(line, c[3])?,
                rmse_q3: field(line, c[4])?,
                criterion_value_median: field(line, c[5])?,
            })
        })
        .collect()
}
