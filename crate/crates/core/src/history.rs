//! Per-step and per-episode training records and their CSV form.
//!
//! Every CSV file starts with a `# schema=1` comment line followed by a
//! header row. Timing columns come last so that determinism checks can drop
//! them by position.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "# schema=1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub seed: u64,
    pub episode: usize,
    pub step: usize,
    pub reward: f64,
    pub sum_rate: f64,
    pub sensing_sinr: f64,
    pub sensing_sinr_db: f64,
    /// Exploration level in force: noise std for DDPG, ε for DQN.
    pub exploration: f64,
    pub updated: bool,
    pub critic_loss: Option<f64>,
    pub actor_latency_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_sum_rate: f64,
    pub mean_sensing_sinr: f64,
    pub updates: usize,
    pub wall_ms: f64,
    pub actor_latency_mean_us: f64,
    pub actor_latency_total_us: f64,
}

/// Number of trailing timing columns in `episodes.csv`.
pub const EPISODE_TIMING_COLUMNS: usize = 3;

/// One frozen-policy evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub index: usize,
    /// Trajectory position of the evaluated episode.
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_sum_rate: f64,
    pub mean_sensing_sinr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.steps.extend(other.steps);
        self.episodes.extend(other.episodes);
    }

    pub fn update_count(&self) -> usize {
        self.episodes.iter().map(|e| e.updates).sum()
    }

    pub fn episode_rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.mean_reward).collect()
    }
}

/// `10·log₁₀(x)`.
pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(out);
    if rows.is_empty() {
        w.write_record(header).map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    if first.trim_end() != SCHEMA_LINE {
        return Err(Error::InvalidArgument(format!(
            "{} does not start with {SCHEMA_LINE}",
            path.display()
        )));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub const STEP_HEADER: &[&str] = &[
    "seed",
    "episode",
    "step",
    "reward",
    "sum_rate",
    "sensing_sinr",
    "sensing_sinr_db",
    "exploration",
    "updated",
    "critic_loss",
    "actor_latency_us",
];

pub const EPISODE_HEADER: &[&str] = &[
    "seed",
    "episode",
    "mean_reward",
    "mean_sum_rate",
    "mean_sensing_sinr",
    "updates",
    "wall_ms",
    "actor_latency_mean_us",
    "actor_latency_total_us",
];

pub const EVAL_HEADER: &[&str] = &[
    "seed",
    "index",
    "episode",
    "mean_reward",
    "mean_sum_rate",
    "mean_sensing_sinr",
];
