//! Per-round measurements and their CSV form.
//!
//! The running average column is the quantity `(1/T) Σ_t ‖∇f(x_t)‖²` that the
//! convergence bound controls, evaluated with the exact full-batch gradient.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::Objective;
use crate::server::ServerState;
use crate::sim::RoundSchedule;

pub const CSV_HEADER: &str =
    "round,train_loss,grad_norm_sq,running_avg_grad_norm_sq,participants,max_delay_used,k_mean,test_metric";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    /// Global loss `f(x_t)`.
    pub train_loss: f64,
    /// `‖∇f(x_t)‖²` with the exact gradient.
    pub grad_norm_sq: f64,
    /// Mean of `grad_norm_sq` over rounds `0..=round`.
    pub running_avg_grad_norm_sq: f64,
    pub participants: usize,
    pub max_delay_used: usize,
    /// Mean local epoch count over participants.
    pub k_mean: f64,
    pub test_metric: Option<f64>,
}

/// Accumulates rows for one run. Owned and appended to by the round loop only.
#[derive(Debug, Clone, Default)]
pub struct MetricsRecorder {
    rows: Vec<MetricsRow>,
    grad_norm_sum: f64,
}

impl MetricsRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }

    /// Evaluates the global loss and gradient at `state.x` and appends a row
    /// describing `schedule`'s round.
    pub fn record<F: Objective + ?Sized>(
        &mut self,
        state: &ServerState,
        family: &F,
        schedule: &RoundSchedule,
    ) -> Result<&MetricsRow> {
        let wrap = |source: Error| Error::Round {
            round: schedule.round,
            source: Box::new(source),
        };
        let train_loss = family.global_value(&state.x).map_err(wrap)?;
        let grad_norm_sq = linalg::norm_sq(&family.global_grad(&state.x).map_err(wrap)?);
        if !train_loss.is_finite() || !grad_norm_sq.is_finite() {
            return Err(wrap(Error::NonFinite { index: 0 }));
        }
        self.push(MetricsRow {
            round: schedule.round,
            train_loss,
            grad_norm_sq,
            running_avg_grad_norm_sq: 0.0,
            participants: schedule.participants.len(),
            max_delay_used: schedule.delays.iter().copied().max().unwrap_or(0),
            k_mean: schedule.epochs.iter().sum::<usize>() as f64 / schedule.epochs.len().max(1) as f64,
            test_metric: family.test_metric(&state.x),
        });
        Ok(self.rows.last().expect("row just pushed"))
    }

    /// Appends a row, overwriting its running average with the recomputed one.
    pub fn push(&mut self, mut row: MetricsRow) {
        self.grad_norm_sum += row.grad_norm_sq;
        row.running_avg_grad_norm_sq = self.grad_norm_sum / (self.rows.len() + 1) as f64;
        self.rows.push(row);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders rows as CSV. Each comment becomes a leading `# ` line.
pub fn to_csv_string(rows: &[MetricsRow], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        // `{}` on f64 prints the shortest decimal that parses back exactly.
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.train_loss,
            r.grad_norm_sq,
            r.running_avg_grad_norm_sq,
            r.participants,
            r.max_delay_used,
            r.k_mean,
            fmt_opt(r.test_metric)
        );
    }
    out
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_csv_with_comments(rows, &[], path)
}

pub fn write_csv_with_comments(rows: &[MetricsRow], comments: &[String], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(rows, comments)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        Some((n, h)) => return Err(err(n, format!("unexpected header {h:?}"))),
        None => return Err(err(0, "missing header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(n, format!("expected 8 fields, found {}", f.len())));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|e| err(n, format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("{s:?}: {e}")));
        rows.push(MetricsRow {
            round: int(f[0])?,
            train_loss: float(f[1])?,
            grad_norm_sq: float(f[2])?,
            running_avg_grad_norm_sq: float(f[3])?,
            participants: int(f[4])?,
            max_delay_used: int(f[5])?,
            k_mean: float(f[6])?,
            test_metric: if f[7].is_empty() { None } else { Some(float(f[7])?) },
        });
    }
    Ok(rows)
}

/// First round whose training loss is at or below `threshold`.
pub fn rounds_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter().find(|r| r.train_loss <= threshold).map(|r| r.round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Final running average of `a` divided by that of `b`.
    pub ratio: f64,
    /// `Less` when `a` ends with the smaller running average.
    pub ordering: Ordering,
    pub rounds_to_threshold_a: Option<usize>,
    pub rounds_to_threshold_b: Option<usize>,
}

/// Compares two runs of equal length on the final running average of
/// `‖∇f‖²` and on the first round reaching `loss_threshold`.
pub fn compare(a: &[MetricsRow], b: &[MetricsRow], loss_threshold: f64) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "runs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (fa, fb) = match (a.last(), b.last()) {
        (Some(x), Some(y)) => (x.running_avg_grad_norm_sq, y.running_avg_grad_norm_sq),
        _ => return Err(Error::invalid("cannot compare empty runs")),
    };
    Ok(Comparison {
        ratio: fa / fb,
        ordering: fa.total_cmp(&fb),
        rounds_to_threshold_a: rounds_to_threshold(a, loss_threshold),
        rounds_to_threshold_b: rounds_to_threshold(b, loss_threshold),
    })
}
