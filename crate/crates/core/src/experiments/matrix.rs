use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{Algorithm, EvalConfig, ExperimentConfig};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::learner::{train, Greedy, TrainedPolicies};
use crate::traffic::DemandState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub algorithm: String,
    pub seed: u64,
    pub episode: u64,
    pub cumulative_reward: f64,
    pub mean_loss: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub algorithm: String,
    pub seed: u64,
    pub load: usize,
    /// Over generated demands, charging an undelivered demand its delay
    /// tolerance.
    pub mean_delay_s: f64,
    /// Over delivered demands only.
    pub delivered_delay_s: f64,
    pub mean_hops: f64,
    pub delivery_rate: f64,
    /// Dropped or expired, over generated.
    pub drop_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub algorithm: String,
    pub seed: u64,
    pub completed: bool,
    pub detail: String,
    /// Fold of the per-episode demand hashes seen in training.
    pub train_demand_hash: u64,
    pub eval_demand_hash: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub training: Vec<TrainingRow>,
    pub evaluation: Vec<EvalRow>,
    pub runs: Vec<RunStatus>,
}

impl MetricsTable {
    pub fn failed(&self) -> impl Iterator<Item = &RunStatus> {
        self.runs.iter().filter(|r| !r.completed)
    }

    /// Algorithm labels in first-appearance order.
    pub fn algorithms(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.runs
            .iter()
            .map(|r| r.algorithm.clone())
            .chain(self.training.iter().map(|r| r.algorithm.clone()))
            .chain(self.evaluation.iter().map(|r| r.algorithm.clone()))
            .filter(|a| seen.insert(a.clone()))
            .collect()
    }

    /// Seeds in first-appearance order.
    pub fn seeds(&self) -> Vec<u64> {
        let mut seen = BTreeSet::new();
        self.runs
            .iter()
            .map(|r| r.seed)
            .chain(self.training.iter().map(|r| r.seed))
            .chain(self.evaluation.iter().map(|r| r.seed))
            .filter(|s| seen.insert(*s))
            .collect()
    }

    /// Mean delay of one run averaged over its loads.
    pub fn mean_delay(&self, algorithm: &str, seed: u64) -> Option<f64> {
        let v: Vec<f64> = self
            .evaluation
            .iter()
            .filter(|r| r.algorithm == algorithm && r.seed == seed)
            .map(|r| r.mean_delay_s)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Writes `training.csv`, `evaluation.csv` and `runs.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows(&dir.join("training.csv"), &self.training)?;
        write_rows(&dir.join("evaluation.csv"), &self.evaluation)?;
        write_rows(&dir.join("runs.csv"), &self.runs)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(true)
            .from_path(&tmp)
            .map_err(|e| csv_err(&tmp, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| csv_err(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn run_dir(out: &Path, algorithm: &str, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{algorithm}_seed{seed}"))
}

fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.csv")
}

/// Completed and failed runs recorded so far.
pub fn read_manifest(out: &Path) -> Result<Vec<RunStatus>> {
    let path = manifest_path(out);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_rows(&path)
}

/// Appends one status line under an exclusive file lock.
fn append_manifest(out: &Path, status: &RunStatus) -> Result<()> {
    let path = manifest_path(out);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.lock().map_err(|e| Error::io(&path, e))?;
    let empty = f.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(empty).from_writer(Vec::new());
    w.serialize(status).map_err(|e| csv_err(&path, e))?;
    let bytes = w.into_inner().map_err(|e| Error::Decode(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    f.sync_data().map_err(|e| Error::io(&path, e))?;
    f.unlock().map_err(|e| Error::io(&path, e))
}

fn fold_hash(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
}

/// Seed of the evaluation environment for a run seed; shared by every
/// algorithm.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0xE7A1_5EED_0000_0000
}

/// Greedy evaluation of trained policies at every configured load.
pub fn evaluate_policies(
    scenario: &EnvConfig,
    eval: &EvalConfig,
    seed: u64,
    policies: &TrainedPolicies,
) -> Result<(Vec<EvalRow>, u64)> {
    let mut rows = Vec::new();
    let mut hash = 0;
    for &load in &eval.loads {
        let cfg = EnvConfig {
            load: Some(load),
            load_max: None,
            demands: Vec::new(),
            steps_per_episode: eval.steps,
            ..scenario.clone()
        };
        let mut env = Env::new(cfg, eval_seed(seed))?;
        let (mut generated, mut delivered, mut lost) = (0u64, 0u64, 0u64);
        let (mut delay, mut censored, mut hops) = (0.0, 0.0, 0.0);
        for ep in 0..eval.episodes {
            let m = env.run_episode(ep, &mut Greedy(policies))?;
            hash = fold_hash(hash, env.demand_hash());
            censored += env
                .traffic()
                .demands()
                .map(|d| match d.state {
                    DemandState::Delivered(_) => d.accumulated_delay_s,
                    _ => d.max_delay_s,
                })
                .sum::<f64>();
            generated += m.generated;
            delivered += m.delivered;
            lost += m.dropped + m.expired;
            delay += m.total_delay_s;
            hops += m.mean_hops * m.delivered as f64;
        }
        let per = |x: f64, n: u64| if n > 0 { x / n as f64 } else { 0.0 };
        rows.push(EvalRow {
            algorithm: String::new(),
            seed,
            load,
            mean_delay_s: per(censored, generated),
            delivered_delay_s: per(delay, delivered),
            mean_hops: per(hops, delivered),
            delivery_rate: per(delivered as f64, generated),
            drop_rate: per(lost as f64, generated),
        });
    }
    Ok((rows, hash))
}

/// Trains and evaluates one (algorithm, seed) cell and persists it.
fn run_one(cfg: &ExperimentConfig, alg: Algorithm, seed: u64) -> Result<RunStatus> {
    let label = alg.label();
    let dir = run_dir(&cfg.out_dir, &label, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tc = alg.apply(&cfg.train);
    let mut env = Env::new(cfg.scenario.clone(), seed)?;
    let out = match train(&mut env, &tc, seed, Some(&dir)) {
        Ok(out) => out,
        Err(e @ Error::DivergenceDetected { .. }) => {
            return Ok(RunStatus {
                algorithm: label,
                seed,
                completed: false,
                detail: e.to_string(),
                train_demand_hash: 0,
                eval_demand_hash: 0,
            })
        }
        Err(e) => return Err(e),
    };
    let training: Vec<TrainingRow> = out
        .records
        .iter()
        .map(|r| TrainingRow {
            algorithm: label.clone(),
            seed,
            episode: r.episode,
            cumulative_reward: r.cumulative_reward,
            mean_loss: r.mean_loss,
            epsilon: r.epsilon,
        })
        .collect();
    let train_hash = out.records.iter().fold(0, |h, r| fold_hash(h, r.demand_hash));
    let (rows, eval_hash) = evaluate_policies(&cfg.scenario, &cfg.eval, seed, &out.policies)?;
    let evaluation: Vec<EvalRow> = rows
        .into_iter()
        .map(|r| EvalRow {
            algorithm: label.clone(),
            ..r
        })
        .collect();
    out.policies.save(&dir.join("policies.ckpt"))?;
    write_rows(&dir.join("training.csv"), &training)?;
    write_rows(&dir.join("evaluation.csv"), &evaluation)?;
    Ok(RunStatus {
        algorithm: label,
        seed,
        completed: true,
        detail: String::new(),
        train_demand_hash: train_hash,
        eval_demand_hash: eval_hash,
    })
}

/// Every (algorithm, seed) cell in configuration order.
pub fn schedule(cfg: &ExperimentConfig) -> Vec<(Algorithm, u64)> {
    cfg.algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect()
}

/// Trains and evaluates the full matrix, skipping cells already in the
/// manifest under `cfg.out_dir`. Runs execute on up to `jobs` threads; each
/// run is persisted as soon as it finishes. A diverged run is recorded as
/// failed and the matrix continues.
pub fn run_matrix(cfg: &ExperimentConfig, jobs: usize) -> Result<MetricsTable> {
    run_matrix_with(cfg, jobs, |_| {})
}

/// [`run_matrix`] with a callback invoked after each newly finished run.
pub fn run_matrix_with<F>(cfg: &ExperimentConfig, jobs: usize, on_run: F) -> Result<MetricsTable>
where
    F: Fn(&RunStatus) + Sync,
{
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let config_path = cfg.out_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;

    let done: BTreeSet<(String, u64)> = read_manifest(&cfg.out_dir)?
        .into_iter()
        .map(|r| (r.algorithm, r.seed))
        .collect();
    let todo: Vec<(Algorithm, u64)> = schedule(cfg)
        .into_iter()
        .filter(|(a, s)| !done.contains(&(a.label(), *s)))
        .collect();
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, todo.len().max(1)) {
            scope.spawn(|| loop {
                if first_error.lock().expect("poisoned").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(alg, seed)) = todo.get(i) else { return };
                let result = run_one(cfg, alg, seed).and_then(|status| {
                    append_manifest(&cfg.out_dir, &status)?;
                    on_run(&status);
                    Ok(())
                });
                if let Err(e) = result {
                    first_error.lock().expect("poisoned").get_or_insert(e);
                    return;
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let table = load_table(cfg)?;
    table.write_csvs(&cfg.out_dir)?;
    Ok(table)
}

/// Reassembles the table from the manifest and per-run files, in
/// configuration order.
pub fn load_table(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    let manifest = read_manifest(&cfg.out_dir)?;
    let mut table = MetricsTable::default();
    for (alg, seed) in schedule(cfg) {
        let label = alg.label();
        let Some(status) = manifest.iter().find(|r| r.algorithm == label && r.seed == seed) else {
            continue;
        };
        if status.completed {
            let dir = run_dir(&cfg.out_dir, &label, seed);
            table.training.extend(read_rows::<TrainingRow>(&dir.join("training.csv"))?);
            table.evaluation.extend(read_rows::<EvalRow>(&dir.join("evaluation.csv"))?);
        }
        table.runs.push(status.clone());
    }
    Ok(table)
}

/// Policies saved by a completed run.
pub fn load_policies(cfg: &ExperimentConfig, alg: Algorithm, seed: u64) -> Result<TrainedPolicies> {
    TrainedPolicies::load(&run_dir(&cfg.out_dir, &alg.label(), seed).join("policies.ckpt"))
}

/// Creates the output directory's parent chain and opens a fresh file.
pub(crate) fn create_file(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}
