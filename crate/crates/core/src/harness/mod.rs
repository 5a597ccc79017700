//! Experiment harness: flat-key configuration files, seeded experiment
//! orchestration over (sweep value, seed) grids, CSV emission, and the
//! acceptance-check runner behind the `verify` CLI subcommand.

pub mod config;
pub mod experiment;
pub mod verify;

use std::time::Duration;

use crate::error::{Error, Result};

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiment::{run_experiment, ExperimentOutput};

/// One completed (seed, sweep value) cell of an experiment.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// Hash of the resolved configuration; stable under key reordering of
    /// the input file.
    pub config_hash: String,
    pub seed: u64,
    /// Swept key and its value for this record, when a sweep is active.
    pub sweep: Option<(String, String)>,
    /// Named metric columns in emission order.
    pub metrics: Vec<(String, f64)>,
    /// Wall-clock time of the run. Kept off disk: emitted files must be
    /// byte-identical across reruns.
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }
}

/// Least-squares slope of `log y` on `log x` over seed-averaged points:
/// records are grouped by their `x_field` value and `y_field` is averaged
/// within each group before the fit.
pub fn slope(records: &[RunRecord], x_field: &str, y_field: &str) -> Result<f64> {
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for record in records {
        let x = record
            .metric(x_field)
            .ok_or_else(|| Error::arg(format!("record lacks field `{x_field}`")))?;
        let y = record
            .metric(y_field)
            .ok_or_else(|| Error::arg(format!("record lacks field `{y_field}`")))?;
        if x <= 0.0 {
            return Err(Error::arg(format!(
                "x value {x} must be positive for a log-log fit"
            )));
        }
        if y <= 0.0 {
            return Err(Error::arg(format!(
                "y value {y} must be positive for a log-log fit"
            )));
        }
        match groups.iter_mut().find(|(gx, _, _)| *gx == x) {
            Some((_, sum, count)) => {
                *sum += y;
                *count += 1;
            }
            None => groups.push((x, y, 1)),
        }
    }
    if groups.len() < 2 {
        return Err(Error::arg(
            "log-log slope needs at least two distinct x values",
        ));
    }
    let points: Vec<(f64, f64)> = groups
        .iter()
        .map(|(x, sum, count)| (x.ln(), (sum / *count as f64).ln()))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in &points {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    Ok(cov / var)
}
