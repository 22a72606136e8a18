use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::matrix::{create_file, MetricsTable};
use super::stats::{mean, sample_std};
use crate::error::{Error, Result};

pub const PLOT_FILES: [&str; 4] = [
    "reward_vs_episode.csv",
    "loss_vs_episode.csv",
    "delay_vs_load.csv",
    "hops_vs_load.csv",
];

/// One wide series file: `x` rows, per-seed columns for every algorithm,
/// then that algorithm's mean and sample std.
fn write_series(
    path: &Path,
    x_name: &str,
    algorithms: &[String],
    seeds: &[u64],
    points: &BTreeMap<(String, u64, u64), f64>,
) -> Result<()> {
    let mut xs: Vec<u64> = points.keys().map(|k| k.2).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut f = std::io::BufWriter::new(create_file(path)?);
    let io = |e| Error::io(path, e);
    let mut header = vec![x_name.to_string()];
    for a in algorithms {
        header.extend(seeds.iter().map(|s| format!("{a}/seed{s}")));
        header.push(format!("{a}/mean"));
        header.push(format!("{a}/std"));
    }
    writeln!(f, "{}", header.join(",")).map_err(io)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for x in xs {
        let mut row = vec![x.to_string()];
        for a in algorithms {
            let vals: Vec<Option<f64>> = seeds.iter().map(|&s| points.get(&(a.clone(), s, x)).copied()).collect();
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            row.extend(vals.iter().map(|&v| cell(v)));
            row.push(cell(mean(&present)));
            row.push(cell(sample_std(&present)));
        }
        writeln!(f, "{}", row.join(",")).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Writes the four figure series into `out_dir` and returns their paths.
pub fn emit_plot_data(table: &MetricsTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let algorithms = table.algorithms();
    let seeds = table.seeds();
    let mut reward = BTreeMap::new();
    let mut loss = BTreeMap::new();
    for r in &table.training {
        reward.insert((r.algorithm.clone(), r.seed, r.episode), r.cumulative_reward);
        loss.insert((r.algorithm.clone(), r.seed, r.episode), r.mean_loss);
    }
    let mut delay = BTreeMap::new();
    let mut hops = BTreeMap::new();
    for r in &table.evaluation {
        delay.insert((r.algorithm.clone(), r.seed, r.load as u64), r.mean_delay_s);
        hops.insert((r.algorithm.clone(), r.seed, r.load as u64), r.mean_hops);
    }
    let series = [
        (PLOT_FILES[0], "episode", &reward),
        (PLOT_FILES[1], "episode", &loss),
        (PLOT_FILES[2], "load", &delay),
        (PLOT_FILES[3], "load", &hops),
    ];
    let mut paths = Vec::new();
    for (name, x, points) in series {
        let path = out_dir.join(name);
        write_series(&path, x, &algorithms, &seeds, points)?;
        paths.push(path);
    }
    Ok(paths)
}
