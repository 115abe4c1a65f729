use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Result};

/// One step of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
    pub task_id: usize,
}

/// Writes one JSON object per line.
pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| EnvError::Trace(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EnvError::Trace(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Plays one episode with uniformly random actions, capped at `max_steps`,
/// and returns the trace with every observation.
pub fn record_episode<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    max_steps: usize,
    rng: &mut R,
) -> Result<(Vec<TraceRecord>, Vec<super::Observation>)> {
    let mut obs = vec![env.reset()];
    let mut records = Vec::new();
    for step in 0..max_steps {
        let action = rng.random_range(0..env.n_actions());
        let out = env.step(action)?;
        records.push(TraceRecord {
            step,
            action,
            reward: out.reward,
            terminal: out.terminal,
            task_id: env.task_id(),
        });
        obs.push(out.observation);
        if out.terminal {
            break;
        }
    }
    Ok((records, obs))
}
