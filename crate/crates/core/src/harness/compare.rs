use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::read_jsonl;
use super::stats::{mean, ols_slope, SlopeFit};
use super::{HarnessError, Result};

/// One contiguous block of episodes on the same task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub task: usize,
    /// Index of the first episode of the block in the whole run.
    pub start: usize,
    pub len: usize,
    /// Mean of the last `smoothing` values of the block.
    pub terminal: f64,
    /// Mean value over the block (area under the curve per episode).
    pub auc: f64,
}

/// Splits `(task, value)` records into task blocks.
pub fn segments(records: &[(usize, f64)], smoothing: usize) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].0 != records[start].0 {
            let vals: Vec<f64> = records[start..i].iter().map(|r| r.1).collect();
            let tail = smoothing.clamp(1, vals.len());
            out.push(Segment {
                task: records[start].0,
                start,
                len: vals.len(),
                terminal: mean(&vals[vals.len() - tail..]),
                auc: mean(&vals),
            });
            start = i;
        }
    }
    out
}

/// Segment summaries of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub run: PathBuf,
    pub segments: Vec<Segment>,
    /// Least-squares trend of terminal values across segments.
    pub slope: Option<SlopeFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub runs: Vec<RunComparison>,
    /// Trend fitted on the (segment index, terminal value) points of all runs.
    pub pooled_slope: Option<SlopeFit>,
}

fn load_metric(run: &Path, metric: &str) -> Result<Vec<(usize, f64)>> {
    let file = if metric == "return" {
        "episodes.jsonl"
    } else {
        "metrics.jsonl"
    };
    let rows = read_jsonl(&run.join(file))?;
    let mut out = Vec::new();
    for row in rows {
        let task = row.get("task").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        if let Some(v) = row.get(metric).and_then(|v| v.as_f64()) {
            out.push((task, v));
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Config(format!(
            "metric '{metric}' not found in {}",
            run.join(file).display()
        )));
    }
    Ok(out)
}

fn trend(points: &[(f64, f64)]) -> Option<SlopeFit> {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    ols_slope(&xs, &ys)
}

/// Reads `metric` from each run directory and summarizes it per task block.
/// `return` reads episode returns; any other name reads update metrics.
pub fn compare_runs(runs: &[PathBuf], metric: &str, smoothing: usize) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(HarnessError::Config("no runs given".into()));
    }
    let mut out = Vec::new();
    let mut pooled = Vec::new();
    for run in runs {
        let segs = segments(&load_metric(run, metric)?, smoothing);
        let points: Vec<(f64, f64)> = segs.iter().enumerate().map(|(i, s)| ((i + 1) as f64, s.terminal)).collect();
        pooled.extend_from_slice(&points);
        out.push(RunComparison {
            run: run.clone(),
            slope: trend(&points),
            segments: segs,
        });
    }
    Ok(Comparison {
        metric: metric.to_string(),
        runs: out,
        pooled_slope: trend(&pooled),
    })
}
