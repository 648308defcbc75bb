//! Trajectory CSV, `events.json` and `study.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resonance_core::tracer::{StudyResult, TracedBranch};

use crate::config::StudyConfig;
use crate::error::CliError;

pub const CSV_HEADER: [&str; 9] = [
    "branch_id",
    "point_index",
    "arclength",
    "re_k",
    "im_k",
    "lambda",
    "residual_norm",
    "det_sign",
    "state_class",
];

pub const EVENTS_FILE: &str = "events.json";
pub const STUDY_FILE: &str = "study.json";

/// One accepted continuation point.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrajectoryRecord {
    pub branch_id: String,
    pub point_index: usize,
    pub arclength: f64,
    pub re_k: f64,
    pub im_k: f64,
    pub lambda: f64,
    pub residual_norm: f64,
    pub det_sign: i8,
    pub state_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub branch_id: String,
    pub lambda_t: f64,
    pub re_k: f64,
    pub im_k: f64,
    pub tangents_out: Vec<[f64; 3]>,
    pub det_before: f64,
    pub det_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abe_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub id: String,
    pub parent: Option<String>,
    pub seed_index: usize,
    pub file: String,
    pub points: usize,
    pub events: usize,
    pub termination: String,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub seed_index: usize,
    pub lambda: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub version: String,
    pub config: StudyConfig,
    /// Polished start points `[Re k, Im k, λ]`, `null` for failed seeds.
    pub seeds: Vec<Option<[f64; 3]>>,
    pub branches: Vec<BranchSummary>,
    pub failures: Vec<FailureRecord>,
}

/// Fixed 15-significant-digit formatting used in all data files.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.14e}")
}

fn det_sign(det: f64) -> i8 {
    if det > 0.0 {
        1
    } else if det < 0.0 {
        -1
    } else {
        0
    }
}

/// Trajectory file of a seed: its own branch followed by the branches
/// leaving its bifurcation points.
pub fn branch_file_name(seed_index: usize) -> String {
    format!("branch_{seed_index}.csv")
}

fn write_branches(path: &Path, branches: &[&TracedBranch]) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for b in branches {
        for (i, (p, class)) in b.branch.points.iter().zip(&b.classes).enumerate() {
            let row = [
                b.id.clone(),
                i.to_string(),
                fmt_real(p.arclength),
                fmt_real(p.x[0]),
                fmt_real(p.x[1]),
                fmt_real(p.x[2]),
                fmt_real(p.residual_norm),
                det_sign(p.det).to_string(),
                class.as_str().to_string(),
            ];
            writer.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(CliError::io(path))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Config(format!("{}: {other:?}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Numerical(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn events(result: &StudyResult) -> Vec<EventRecord> {
    result
        .branches
        .iter()
        .flat_map(|b| {
            b.branch.events.iter().map(move |e| EventRecord {
                branch_id: b.id.clone(),
                lambda_t: e.x_t[2],
                re_k: e.x_t[0],
                im_k: e.x_t[1],
                tangents_out: e.tangents_out.iter().map(|t| [t[0], t[1], t[2]]).collect(),
                det_before: e.det_before,
                det_after: e.det_after,
                abe_error: e.abe_error.clone(),
            })
        })
        .collect()
}

/// Trajectory files written by a previous run.
pub fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("branch_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes all outputs of a study into `dir` and returns the trajectory files.
pub fn write_study(
    dir: &Path,
    config: &StudyConfig,
    result: &StudyResult,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    for stale in trajectory_files(dir)? {
        fs::remove_file(&stale).map_err(CliError::io(&stale))?;
    }

    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (seed_index, start) in result.seeds.iter().enumerate() {
        if start.is_none() {
            continue;
        }
        let branches: Vec<&TracedBranch> = result
            .branches
            .iter()
            .filter(|b| b.seed_index == seed_index)
            .collect();
        let name = branch_file_name(seed_index);
        let path = dir.join(&name);
        write_branches(&path, &branches)?;
        files.push(path);
        summaries.extend(branches.iter().map(|b| BranchSummary {
            id: b.id.clone(),
            parent: b.parent.clone(),
            seed_index,
            file: name.clone(),
            points: b.branch.points.len(),
            events: b.branch.events.len(),
            termination: b.branch.termination.as_str().to_string(),
            failure: b.branch.failure.clone(),
        }));
    }

    write_json(&dir.join(EVENTS_FILE), &events(result))?;
    let record = StudyRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seeds: result.seeds.clone(),
        branches: summaries,
        failures: result
            .failures
            .iter()
            .map(|f| FailureRecord {
                seed_index: f.seed_index,
                lambda: f.seed.lambda(),
                message: f.message.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(STUDY_FILE), &record)?;
    Ok(files)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(CliError::Config(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
