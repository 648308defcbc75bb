//! gnuplot data for the three trajectory projections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::output::{
    fmt_real, read_events, read_trajectory, trajectory_files, TrajectoryRecord, EVENTS_FILE,
};

pub const KPLANE_FILE: &str = "kplane.dat";
pub const IMK_FILE: &str = "imk_lambda.dat";
pub const REK_FILE: &str = "rek_lambda.dat";
pub const BIFURCATIONS_FILE: &str = "bifurcations.dat";
pub const SCRIPT_FILE: &str = "plot.gp";

/// Groups rows by branch id, keeping first-appearance order.
fn by_branch(rows: Vec<TrajectoryRecord>) -> Vec<(String, Vec<TrajectoryRecord>)> {
    let mut groups: Vec<(String, Vec<TrajectoryRecord>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(id, _)| *id == row.branch_id) {
            Some((_, g)) => g.push(row),
            None => groups.push((row.branch_id.clone(), vec![row])),
        }
    }
    for (_, g) in &mut groups {
        g.sort_by_key(|r| r.point_index);
    }
    groups
}

/// One gnuplot index block per branch.
fn projection<F>(branches: &[(String, Vec<TrajectoryRecord>)], columns: &str, f: F) -> String
where
    F: Fn(&TrajectoryRecord) -> (f64, f64),
{
    let mut out = format!("# {columns}\n");
    for (i, (id, rows)) in branches.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# branch {id}");
        for r in rows {
            let (a, b) = f(r);
            let _ = writeln!(out, "{} {}", fmt_real(a), fmt_real(b));
        }
    }
    out
}

fn script(branches: &[(String, Vec<TrajectoryRecord>)]) -> String {
    let panels = [
        ("kplane", KPLANE_FILE, "Re k", "Im k", "1:2", "1:2"),
        ("imk_lambda", IMK_FILE, "lambda", "Im k", "1:2", "3:2"),
        ("rek_lambda", REK_FILE, "lambda", "Re k", "1:2", "3:1"),
    ];
    let mut out = String::from("set terminal svg size 800,600\nset grid\nset key outside right\n");
    for (name, data, xlabel, ylabel, using, marks) in panels {
        let _ = write!(
            out,
            "\nset output '{name}.svg'\nset xlabel '{xlabel}'\nset ylabel '{ylabel}'\nplot "
        );
        for (i, (id, _)) in branches.iter().enumerate() {
            let _ = write!(
                out,
                "'{data}' index {i} using {using} with lines title 'branch {id}', "
            );
        }
        let _ = writeln!(
            out,
            "'{BIFURCATIONS_FILE}' using {marks} with points pt 7 ps 1.2 title 'bifurcation'"
        );
    }
    out
}

/// Writes the projections of the study in `dir` into `out_dir`.
pub fn write_plot_data(dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let files = trajectory_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no trajectory files (branch_*.csv) in {}",
            dir.display()
        )));
    }
    let events_path = dir.join(EVENTS_FILE);
    if !events_path.is_file() {
        return Err(CliError::Usage(format!(
            "missing {}",
            events_path.display()
        )));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_trajectory(f)?);
    }
    let branches = by_branch(rows);
    let events = read_events(&events_path)?;

    let mut marks = String::from("# re_k im_k lambda_t\n");
    for e in &events {
        let _ = writeln!(
            marks,
            "{} {} {}",
            fmt_real(e.re_k),
            fmt_real(e.im_k),
            fmt_real(e.lambda_t)
        );
    }
    let outputs = [
        (
            KPLANE_FILE,
            projection(&branches, "re_k im_k", |r| (r.re_k, r.im_k)),
        ),
        (
            IMK_FILE,
            projection(&branches, "lambda im_k", |r| (r.lambda, r.im_k)),
        ),
        (
            REK_FILE,
            projection(&branches, "lambda re_k", |r| (r.lambda, r.re_k)),
        ),
        (BIFURCATIONS_FILE, marks),
        (SCRIPT_FILE, script(&branches)),
    ];
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let mut written = Vec::new();
    for (name, text) in outputs {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(CliError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}
