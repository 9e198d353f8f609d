//! Persists evaluation records and renders the comparison report.
//!
//! Records are stored as one JSON file per controller so independent
//! evaluation runs can drop results into the same directory. The report
//! renders a summary table (CSV and aligned text), per-bus voltage
//! magnitude time series, and per-bus deviation statistics, all plain
//! files suitable for external plotting. Output is byte-identical across
//! reruns on the same records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::metrics::{self, MetricsError, ResultSummary};
use super::EpisodeRecord;
use crate::feeder::Feeder;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// On-disk envelope for a batch of records.
#[derive(serde::Serialize, serde::Deserialize)]
struct RecordFile {
    version: u32,
    records: Vec<EpisodeRecord>,
}

/// Writes the records grouped by controller as
/// `records_<controller>.json` files under `dir`. Returns the paths.
pub fn write_records(dir: &Path, records: &[EpisodeRecord]) -> Result<Vec<PathBuf>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, group) in metrics::group_by_controller(records) {
        let path = dir.join(format!("records_{name}.json"));
        let envelope = RecordFile {
            version: RECORD_SCHEMA_VERSION,
            records: group.into_iter().cloned().collect(),
        };
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &envelope).map_err(|source| {
            ReportError::Json {
                path: path.clone(),
                source,
            }
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Loads every `records_*.json` under `dir`, in file-name order.
pub fn read_records(dir: &Path) -> Result<Vec<EpisodeRecord>, ReportError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("records_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut records = Vec::new();
    for path in paths {
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let envelope: RecordFile = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|source| ReportError::Json {
                path: path.clone(),
                source,
            })?;
        records.extend(envelope.records);
    }
    Ok(records)
}

fn write_summary_csv(path: &Path, summaries: &[ResultSummary]) -> Result<(), ReportError> {
    let mut out = String::new();
    out.push_str(
        "controller,episodes,total_steps,violation_frequency_percent,\
         mean_abs_q_kvar,mean_step_ms,mean_reward,relaxed_steps,failed_steps\n",
    );
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.controller,
            s.episodes,
            s.total_steps,
            s.violation_frequency_percent,
            s.mean_abs_q_kvar,
            s.mean_step_seconds * 1e3,
            s.mean_reward,
            s.relaxed_steps,
            s.failed_steps,
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_summary_text(path: &Path, summaries: &[ResultSummary]) -> Result<(), ReportError> {
    let mut out = String::new();
    out.push_str("Controller comparison (nonlinear voltages, band ±5% of nominal)\n\n");
    out.push_str(&format!(
        "{:<10} {:>9} {:>12} {:>14} {:>13} {:>9} {:>8}\n",
        "controller", "episodes", "violations %", "mean |q| kVAR", "mean step ms", "relaxed", "failed"
    ));
    for s in summaries {
        out.push_str(&format!(
            "{:<10} {:>9} {:>12.4} {:>14.2} {:>13.4} {:>9} {:>8}\n",
            s.controller.name(),
            s.episodes,
            s.violation_frequency_percent,
            s.mean_abs_q_kvar,
            s.mean_step_seconds * 1e3,
            s.relaxed_steps,
            s.failed_steps,
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

fn write_voltage_series(
    dir: &Path,
    feeder: &Feeder,
    records: &[EpisodeRecord],
) -> Result<(), ReportError> {
    for (name, group) in metrics::group_by_controller(records) {
        let path = dir.join(format!("voltages_{name}.csv"));
        let mut out = String::from("day,step");
        for bus in 0..feeder.bus_count() {
            out.push_str(&format!(",v_bus{bus}"));
        }
        out.push('\n');
        for record in group {
            for step in &record.steps {
                out.push_str(&format!("{},{}", record.day_index, step.step));
                for &v in &step.voltages {
                    out.push_str(&format!(",{}", v.sqrt()));
                }
                out.push('\n');
            }
        }
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_deviation_table(
    path: &Path,
    summaries: &[ResultSummary],
) -> Result<(), ReportError> {
    let mut out = String::from("controller,bus,deviation_mean,deviation_variance\n");
    for s in summaries {
        for bus in 0..s.deviation_mean.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.controller, bus, s.deviation_mean[bus], s.deviation_variance[bus]
            ));
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Renders the full report into `out_dir`: `summary.csv`, `summary.txt`,
/// `deviations.csv`, and one `voltages_<controller>.csv` per controller.
pub fn write_report(
    feeder: &Feeder,
    records: &[EpisodeRecord],
    out_dir: &Path,
) -> Result<(), ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let summaries = metrics::summarize_all(feeder, records)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_summary_csv(&out_dir.join("summary.csv"), &summaries)?;
    write_summary_text(&out_dir.join("summary.txt"), &summaries)?;
    write_deviation_table(&out_dir.join("deviations.csv"), &summaries)?;
    write_voltage_series(out_dir, feeder, records)?;
    Ok(())
}

/// Writes the per-episode training log as CSV. The wall-time column is the
/// only one expected to differ between reruns of the same seed.
pub fn write_training_log(
    path: &Path,
    logs: &[crate::rl::EpisodeLog],
) -> Result<(), ReportError> {
    let mut out = String::from(
        "episode,return,violations,relaxed_steps,max_linear_violation,\
         mean_critic_loss,mean_actor_objective,wall_time_s\n",
    );
    for log in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            log.episode,
            log.ret,
            log.violations,
            log.relaxed_steps,
            log.max_linear_violation,
            log.mean_critic_loss,
            log.mean_actor_objective,
            log.wall_time_s,
        ));
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))
}
