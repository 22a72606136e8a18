use serde::{Deserialize, Serialize};

use super::matrix::MetricsTable;
use super::stats::{mean, SignTest};

/// Paired comparison of one algorithm's per-seed mean delay against a
/// reference algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub other: String,
    /// `(reference, other)` mean delay for each seed both completed.
    pub pairs: Vec<(u64, f64, f64)>,
    pub test: SignTest,
    /// Mean relative reduction of the reference's delay.
    pub mean_reduction: f64,
}

/// Compares `reference` against every other algorithm in the table.
pub fn compare(table: &MetricsTable, reference: &str) -> Vec<Comparison> {
    table
        .algorithms()
        .into_iter()
        .filter(|a| a != reference)
        .map(|other| {
            let pairs: Vec<(u64, f64, f64)> = table
                .seeds()
                .into_iter()
                .filter_map(|s| Some((s, table.mean_delay(reference, s)?, table.mean_delay(&other, s)?)))
                .collect();
            let test = SignTest::new(&pairs.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>());
            let reductions: Vec<f64> = pairs.iter().map(|p| 1.0 - p.1 / p.2).collect();
            Comparison {
                reference: reference.to_string(),
                other,
                pairs,
                test,
                mean_reduction: mean(&reductions).unwrap_or(0.0),
            }
        })
        .collect()
}

/// Seed-averaged mean delay of `algorithm` at each load, in load order.
pub fn delay_by_load(table: &MetricsTable, algorithm: &str) -> Vec<(usize, f64)> {
    let mut loads: Vec<usize> = table
        .evaluation
        .iter()
        .filter(|r| r.algorithm == algorithm)
        .map(|r| r.load)
        .collect();
    loads.sort_unstable();
    loads.dedup();
    loads
        .into_iter()
        .filter_map(|l| {
            let v: Vec<f64> = table
                .evaluation
                .iter()
                .filter(|r| r.algorithm == algorithm && r.load == l)
                .map(|r| r.mean_delay_s)
                .collect();
            Some((l, mean(&v)?))
        })
        .collect()
}

/// True when the seed-averaged delay does not decrease with load.
pub fn delay_monotone(table: &MetricsTable, algorithm: &str) -> bool {
    delay_by_load(table, algorithm).windows(2).all(|w| w[1].1 >= w[0].1)
}
