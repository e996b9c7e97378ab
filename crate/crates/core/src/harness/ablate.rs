//! One training run per aggregation strategy, same seed and data.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::train;
use crate::error::{Error, Result};
use crate::model::Strategy;

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub best_epoch: usize,
    /// Test metrics when a test set is configured, validation otherwise.
    pub split: &'static str,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    let out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Strategy::parse)
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::Config("strategy list is empty".into()));
    }
    Ok(out)
}

/// Trains every strategy in order; runs are written to `out_dir/<strategy>`
/// when an output directory is given, otherwise to a temporary location
/// that is removed afterwards.
pub fn ablate(cfg: &TrainConfig, strategies: &[Strategy], out_dir: Option<&Path>) -> Result<AblationTable> {
    if strategies.is_empty() {
        return Err(Error::Config("strategy list is empty".into()));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let run_cfg = TrainConfig {
            strategy,
            ..cfg.clone()
        };
        let (report, _) = match out_dir {
            Some(dir) => train::run(&run_cfg, &dir.join(strategy.as_str()))?,
            None => {
                let tmp = std::env::temp_dir().join(format!(
                    "graphcage-ablate-{}-{}",
                    std::process::id(),
                    strategy.as_str()
                ));
                let res = train::run(&run_cfg, &tmp);
                let _ = fs::remove_dir_all(&tmp);
                res?
            }
        };
        let (split, metrics) = match report.test {
            Some(t) => ("test", t),
            None => ("val", report.val),
        };
        rows.push(AblationRow {
            strategy,
            best_epoch: report.best_epoch,
            split,
            metrics,
        });
    }
    Ok(AblationTable { seed: cfg.seed, rows })
}
