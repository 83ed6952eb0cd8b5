//! Speed/accuracy sweeps and their Pareto frontier.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cte::{LabeledDataset, TrainConfig, TreeShape};
use log::{info, warn};
use serde::Deserialize;

use crate::{bench, evaluate, load, train, tree_label, TrainRequest};

pub const PARETO_SCHEMA: &str = "cte-pareto/1";

/// A sweep file: a base training config and the points that vary it.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(rename = "point")]
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub id: String,
    pub tables: Option<usize>,
    pub word_bits: Option<usize>,
    pub tree: Option<TreeShape>,
    /// Evaluate this saved model instead of training.
    pub model: Option<PathBuf>,
}

impl SweepPoint {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(m) = self.tables {
            c.tables = m;
        }
        if let Some(k) = self.word_bits {
            c.word_bits = k;
        }
        if self.tree.is_some() {
            c.tree = self.tree.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub id: String,
    pub tables: usize,
    pub word_bits: usize,
    pub tree: String,
    /// Median voting latency per image.
    pub latency_us: f64,
    pub error: f64,
    pub frontier: bool,
    /// Empty on success.
    pub failure: String,
}

/// Marks the rows not dominated by any other successful row. A point
/// dominates another when it is no worse in both latency and error and better
/// in at least one. Sorts by latency then error and scans, keeping the lowest
/// error seen so far.
pub fn mark_frontier(rows: &mut [ParetoRow]) {
    let mut order: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].failure.is_empty()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .latency_us
            .total_cmp(&rows[b].latency_us)
            .then(rows[a].error.total_cmp(&rows[b].error))
    });
    for r in rows.iter_mut() {
        r.frontier = false;
    }
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        let p = (rows[i].latency_us, rows[i].error);
        let keep = match best {
            None => true,
            // Exact duplicates of a frontier point are not dominated by it.
            Some(b) => p.1 < b.1 || p == b,
        };
        if keep {
            rows[i].frontier = true;
            best = Some(p);
        }
    }
}

/// Header comment, column names, then one line per row.
pub fn to_csv(rows: &[ParetoRow]) -> String {
    let mut out = format!("# schema: {PARETO_SCHEMA}\nconfig_id,M,K,tree_shape,latency_us,error,frontier,failure\n");
    for r in rows {
        let failure = r.failure.replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.6},{},{}",
            r.id, r.tables, r.word_bits, r.tree, r.latency_us, r.error, r.frontier as u8, failure
        );
    }
    out
}

/// Trains (or loads) every point, measures test error and median voting
/// latency, and marks the frontier. Failed points are kept as rows.
pub fn run_sweep(
    spec: &SweepSpec,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    reps: usize,
) -> Vec<ParetoRow> {
    let mut rows: Vec<ParetoRow> = spec
        .points
        .iter()
        .map(|p| {
            let config = p.config(&spec.base);
            let mut row = ParetoRow {
                id: p.id.clone(),
                tables: config.tables,
                word_bits: config.tree.as_ref().map_or(config.word_bits, |t| t.word_bits()),
                tree: tree_label(config.tree.as_ref()),
                latency_us: f64::NAN,
                error: f64::NAN,
                frontier: false,
                failure: String::new(),
            };
            let measured = (|| -> Result<(f64, f64)> {
                let ens = match &p.model {
                    Some(path) => load(path)?,
                    None => {
                        train(TrainRequest {
                            config,
                            data: train_set,
                            holdout: None,
                            teacher: None,
                        })
                        .with_context(|| format!("training point {}", p.id))?
                        .0
                    }
                };
                let error = evaluate(&ens, test_set)?.error_rate;
                let latency = bench(&ens, test_set, reps)?.vote_us.median_us;
                Ok((latency, error))
            })();
            match measured {
                Ok((latency, error)) => {
                    info!("point {}: {latency:.2} us, error {error:.4}", p.id);
                    row.latency_us = latency;
                    row.error = error;
                }
                Err(e) => {
                    warn!("point {} failed: {e:#}", p.id);
                    row.failure = format!("{e:#}");
                }
            }
            row
        })
        .collect();
    mark_frontier(&mut rows);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(id: usize, latency_us: f64, error: f64) -> ParetoRow {
        ParetoRow {
            id: id.to_string(),
            tables: 1,
            word_bits: 1,
            tree: "fern".into(),
            latency_us,
            error,
            frontier: false,
            failure: String::new(),
        }
    }

    fn dominated(rows: &[ParetoRow], i: usize) -> bool {
        rows.iter().any(|o| {
            o.failure.is_empty()
                && o.latency_us <= rows[i].latency_us
                && o.error <= rows[i].error
                && (o.latency_us < rows[i].latency_us || o.error < rows[i].error)
        })
    }

    #[test]
    fn one_dominating_point() {
        let mut rows = vec![row(0, 2.0, 0.3), row(1, 1.0, 0.2)];
        mark_frontier(&mut rows);
        assert_eq!(rows.iter().filter(|r| r.frontier).count(), 1);
        assert!(rows[1].frontier);
    }

    #[test]
    fn frontier_matches_pairwise_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..=8);
            // Coarse grids make ties common.
            let mut rows: Vec<ParetoRow> = (0..n)
                .map(|i| row(i, rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64 / 10.0))
                .collect();
            if rng.gen_bool(0.3) {
                rows[0].failure = "boom".into();
            }
            mark_frontier(&mut rows);
            for i in 0..n {
                let expect = rows[i].failure.is_empty() && !dominated(&rows, i);
                assert_eq!(rows[i].frontier, expect, "{rows:?}");
            }
        }
    }

    #[test]
    fn csv_has_versioned_header() {
        let mut r = row(0, 1.5, 0.25);
        r.failure = "bad, really\nbad".into();
        let csv = to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# schema: cte-pareto/1");
        assert_eq!(lines[1], "config_id,M,K,tree_shape,latency_us,error,frontier,failure");
        assert_eq!(lines[2], "0,1,1,fern,1.500,0.250000,0,bad; really;bad");
    }
}
