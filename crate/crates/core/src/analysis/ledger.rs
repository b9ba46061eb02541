use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEDGER_FORMAT_VERSION: u32 = 1;

/// Lower-triangular `(checkpoint, task)` matrix: row `i` holds tasks `0..=i`.
pub type TriMatrix = Vec<Vec<Option<f64>>>;

/// Probe accuracies per tap for one tracked task across checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockwiseRecord {
    pub task: usize,
    pub taps: Vec<String>,
    /// `accuracy[i][b]`: checkpoint `i`, tap `taps[b]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl BlockwiseRecord {
    /// First-checkpoint accuracy minus last-checkpoint accuracy per tap.
    pub fn deltas(&self) -> Vec<f64> {
        match (self.accuracy.first(), self.accuracy.last()) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| x - y).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub format_version: u32,
    pub method: String,
    pub config_fingerprint: String,
    pub data_fingerprint: String,
    pub seed: u64,
    pub n_tasks: usize,
    /// Task-head accuracy; cells are `None` for methods without heads.
    pub observed: TriMatrix,
    pub probe: TriMatrix,
    #[serde(default)]
    pub nme: Option<TriMatrix>,
    /// CKA between the representation after task `j` and after checkpoint `i`, on task `j` test inputs.
    #[serde(default)]
    pub cka: Option<TriMatrix>,
    #[serde(default)]
    pub blockwise: Option<BlockwiseRecord>,
    /// All-LP accuracy at the final checkpoint.
    #[serde(default)]
    pub all_lp: Option<f64>,
    /// Set when the run stopped early; populated rows are still valid.
    #[serde(default)]
    pub partial: bool,
    #[serde(default)]
    pub error: Option<String>,
    /// Echo of the generating configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsLedger {
    pub fn new(method: impl Into<String>, n_tasks: usize, seed: u64) -> Self {
        Self {
            format_version: LEDGER_FORMAT_VERSION,
            method: method.into(),
            config_fingerprint: String::new(),
            data_fingerprint: String::new(),
            seed,
            n_tasks,
            observed: Vec::new(),
            probe: Vec::new(),
            nme: None,
            cka: None,
            blockwise: None,
            all_lp: None,
            partial: false,
            error: None,
            config: serde_json::Value::Null,
        }
    }

    pub fn checkpoints(&self) -> usize {
        self.probe.len()
    }

    pub fn is_complete(&self) -> bool {
        !self.partial
            && self.probe.len() == self.n_tasks
            && self.observed.len() == self.n_tasks
            && self.probe.iter().enumerate().all(|(i, r)| r.len() == i + 1 && r.iter().all(Option::is_some))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ledger serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let l: Self = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
        if l.format_version != LEDGER_FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported ledger version {}", l.format_version),
            });
        }
        for m in [&l.observed, &l.probe] {
            for (i, row) in m.iter().enumerate() {
                if row.len() != i + 1 {
                    return Err(Error::Parse { line: 0, msg: format!("row {i} is not lower-triangular") });
                }
                if row.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Parse { line: 0, msg: format!("accuracy outside [0, 1] in row {i}") });
                }
            }
        }
        Ok(l)
    }
}

fn cell(m: &TriMatrix, i: usize, j: usize) -> Option<f64> {
    m.get(i).and_then(|r| r.get(j)).copied().flatten()
}

fn row_mean(m: &TriMatrix, i: usize) -> Option<f64> {
    let row = m.get(i)?;
    let vals: Option<Vec<f64>> = row.iter().copied().collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    /// `A[0][0]`: task-1 accuracy right after learning it.
    pub task1_observed_initial: Option<f64>,
    /// Mean of the final observed row.
    pub avg_observed: Option<f64>,
    pub avg_probe: f64,
    pub task1_observed_final: Option<f64>,
    pub task1_probe_final: f64,
    pub all_lp: Option<f64>,
    pub avg_nme: Option<f64>,
    /// `L[j][j] − L[T−1][j]` per task.
    pub probe_forgetting: Vec<f64>,
}

/// Reads the headline numbers straight out of a complete ledger.
pub fn summarize(ledger: &MetricsLedger) -> Result<Summary> {
    if !ledger.is_complete() {
        return Err(Error::IncompleteLedger(format!(
            "{} of {} checkpoints{}",
            ledger.checkpoints(),
            ledger.n_tasks,
            if ledger.partial { " (partial run)" } else { "" }
        )));
    }
    let last = ledger.n_tasks - 1;
    let avg_probe = row_mean(&ledger.probe, last).expect("complete");
    Ok(Summary {
        method: ledger.method.clone(),
        task1_observed_initial: cell(&ledger.observed, 0, 0),
        avg_observed: row_mean(&ledger.observed, last),
        avg_probe,
        task1_observed_final: cell(&ledger.observed, last, 0),
        task1_probe_final: cell(&ledger.probe, last, 0).expect("complete"),
        all_lp: ledger.all_lp,
        avg_nme: ledger.nme.as_ref().and_then(|m| row_mean(m, last)),
        probe_forgetting: (0..ledger.n_tasks)
            .map(|j| cell(&ledger.probe, j, j).unwrap_or(0.0) - cell(&ledger.probe, last, j).unwrap_or(0.0))
            .collect(),
    })
}
