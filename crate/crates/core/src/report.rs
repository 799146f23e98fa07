//! Aggregation of evaluation traces: run-mean curves, trailing rolling means,
//! best returns and percentage enhancement over a base methodology.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::Methodology;
use crate::rl::{Algo, EvalTrace};
use crate::{Error, Result};

/// Trailing mean over `window` points; the first `window - 1` entries average
/// whatever is available.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Recomputes every window from scratch; reference for [`rolling_mean`].
pub fn rolling_mean_naive(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Checkpoint epochs shared by all traces.
pub fn common_grid(traces: &[EvalTrace]) -> Result<Vec<usize>> {
    let Some(first) = traces.first() else {
        return Err(Error::GridMismatch("no traces".into()));
    };
    let grid = first.epochs();
    for t in &traces[1..] {
        if t.epochs() != grid {
            return Err(Error::GridMismatch(format!(
                "run {} has {} checkpoints, run {} has {}",
                first.run,
                grid.len(),
                t.run,
                t.points.len()
            )));
        }
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCurve {
    pub epochs: Vec<usize>,
    /// Mean over runs at each checkpoint.
    pub mean: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Run-mean returns smoothed over a trailing window of `window_epochs`,
/// which covers `window_epochs / eval_every` checkpoints.
pub fn smoothed_curve(traces: &[EvalTrace], window_epochs: usize) -> Result<SmoothedCurve> {
    let epochs = common_grid(traces)?;
    let n_runs = traces.len() as f64;
    let mean: Vec<f64> = (0..epochs.len())
        .map(|k| traces.iter().map(|t| t.points[k].mean_return).sum::<f64>() / n_runs)
        .collect();
    let spacing = match epochs.as_slice() {
        [a, b, ..] => b - a,
        [a] => *a,
        [] => 1,
    };
    let points = (window_epochs / spacing.max(1)).max(1);
    Ok(SmoothedCurve {
        smoothed: rolling_mean(&mean, points),
        epochs,
        mean,
    })
}

/// Best return over all runs and checkpoints.
pub fn r_max(traces: &[EvalTrace]) -> Result<f64> {
    traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p.mean_return))
        .reduce(f64::max)
        .ok_or_else(|| Error::GridMismatch("no checkpoints".into()))
}

/// `100 * (value - base) / |base|`, undefined when `base` is zero.
pub fn percent_change(value: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (value - base) / base.abs())
}

/// Mean of the per-configuration percentage changes that are defined.
pub fn avg_enhancement(values: &[f64], bases: &[f64]) -> Option<f64> {
    let changes: Vec<f64> = values
        .iter()
        .zip(bases)
        .filter_map(|(v, b)| percent_change(*v, *b))
        .collect();
    (!changes.is_empty()).then(|| changes.iter().sum::<f64>() / changes.len() as f64)
}

/// Best return of one (configuration, methodology, algorithm) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub config: String,
    pub methodology: Methodology,
    pub algo: Algo,
    pub r_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub methodology: Methodology,
    pub algo: Algo,
    /// Best return per configuration, in `ResultsTable::configs` order.
    pub r_max: Vec<Option<f64>>,
    pub pct_change: Vec<Option<f64>>,
    pub avg_enh: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub base: Methodology,
    pub configs: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Rows are ordered by algorithm, then methodology. Each configuration is
    /// compared with the base methodology under the same algorithm.
    pub fn build(base: Methodology, cells: &[Cell]) -> Self {
        let mut configs: Vec<String> = Vec::new();
        for c in cells {
            if !configs.contains(&c.config) {
                configs.push(c.config.clone());
            }
        }
        let mut keys: Vec<(Algo, Methodology)> = Vec::new();
        for c in cells {
            let key = (c.algo, c.methodology);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.sort_by_key(|(a, m)| (a.name(), *m));
        let lookup = |cfg: &str, m: Methodology, a: Algo| {
            cells
                .iter()
                .find(|c| c.config == cfg && c.methodology == m && c.algo == a)
                .map(|c| c.r_max)
        };
        let rows = keys
            .into_iter()
            .map(|(algo, methodology)| {
                let r_max: Vec<Option<f64>> = configs
                    .iter()
                    .map(|c| lookup(c, methodology, algo))
                    .collect();
                let pct_change: Vec<Option<f64>> = configs
                    .iter()
                    .zip(&r_max)
                    .map(|(c, v)| percent_change((*v)?, lookup(c, base, algo)?))
                    .collect();
                let defined: Vec<f64> = pct_change.iter().flatten().copied().collect();
                let avg_enh = (!defined.is_empty())
                    .then(|| defined.iter().sum::<f64>() / defined.len() as f64);
                ResultRow {
                    methodology,
                    algo,
                    r_max,
                    pct_change,
                    avg_enh,
                }
            })
            .collect();
        ResultsTable {
            base,
            configs,
            rows,
        }
    }

    pub fn row(&self, methodology: Methodology, algo: Algo) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.methodology == methodology && r.algo == algo)
    }

    /// Plain-text rendering for terminals.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "{:<6}{:<6}", "algo", "method")?;
        for c in &self.configs {
            write!(out, "{c:>16}")?;
        }
        writeln!(out, "{:>14}", "avg_enh(%)")?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        for r in &self.rows {
            write!(out, "{:<6}{:<6}", r.algo.name(), r.methodology.name())?;
            for (v, p) in r.r_max.iter().zip(&r.pct_change) {
                let cell = match p {
                    Some(p) => format!("{} ({p:+.1}%)", fmt(*v)),
                    None => fmt(*v),
                };
                write!(out, "{cell:>16}")?;
            }
            writeln!(out, "{:>14}", fmt(r.avg_enh))?;
        }
        Ok(())
    }
}
