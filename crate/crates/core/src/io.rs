//! Trajectory CSV files, columnar exports for plotting, and atomic writes.
//!
//! Trajectory files start with a `# dt = ...` comment (the time column alone
//! does not pin the step down to the last bit), then a header and rows of
//! `t, r, v, q, w, f, tau` with 17 significant digits. The last state has no
//! input and its row carries zeros.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use serde::Serialize;

use crate::dynamics::{ControlInput, State};
use crate::error::{Error, Result};
use crate::estimator::{EstimationResult, PARAMETER_NAMES};
use crate::trajectory::Trajectory;

pub const TRAJECTORY_HEADER: [&str; 20] = [
    "t", "rx", "ry", "rz", "vx", "vy", "vz", "qx", "qy", "qz", "qw", "wx", "wy", "wz", "fx", "fy",
    "fz", "taux", "tauy", "tauz",
];

/// Write `bytes` to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    write_atomic(path, text.as_bytes())
}

fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

fn row_values(t: f64, x: &State, u: &ControlInput) -> Vec<f64> {
    std::iter::once(t)
        .chain(x.r.iter().copied())
        .chain(x.v.iter().copied())
        .chain(x.q.iter().copied())
        .chain(x.w.iter().copied())
        .chain(u.f.iter().copied())
        .chain(u.tau.iter().copied())
        .collect()
}

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = format!("# dt = {:.16e}\n", traj.dt);
    out.push_str(&TRAJECTORY_HEADER.join(","));
    out.push('\n');
    for (k, x) in traj.states.iter().enumerate() {
        let u = traj.inputs.get(k).copied().unwrap_or_else(ControlInput::zero);
        push_row(&mut out, row_values(traj.time(k), x, &u));
    }
    out
}

/// Parse a trajectory written by [`trajectory_to_csv`].
///
/// Without the `# dt` comment the step is taken as the double nearest to
/// `t1 - t0` that reproduces every time entry exactly, and single-row files
/// read back with `dt = 1`.
pub fn trajectory_from_csv(text: &str) -> Result<Trajectory> {
    let mut declared_dt = None;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    while let Some((line_no, l)) = lines.next_if(|(_, l)| l.trim_start().starts_with('#')) {
        let body = l.trim_start().trim_start_matches('#').trim();
        if let Some(v) = body.strip_prefix("dt").map(str::trim_start).and_then(|v| v.strip_prefix('=')) {
            let dt: f64 = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("line {}: bad dt value {:?}", line_no + 1, v.trim()))
            })?;
            declared_dt = Some(dt);
        }
    }
    let (_, header) = lines.next().ok_or_else(|| Error::InvalidArgument("empty trajectory file".into()))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names != TRAJECTORY_HEADER {
        return Err(Error::InvalidArgument(format!(
            "unexpected trajectory header {header:?}; expected {}",
            TRAJECTORY_HEADER.join(",")
        )));
    }
    let mut rows: Vec<[f64; 20]> = Vec::new();
    for (line_no, line) in lines {
        let mut row = [0.0; 20];
        let mut n = 0;
        for (i, field) in line.split(',').enumerate() {
            if i >= 20 {
                n = i + 1;
                break;
            }
            row[i] = field.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "line {}: column {} is not a number: {field:?}",
                    line_no + 1,
                    TRAJECTORY_HEADER[i]
                ))
            })?;
            n = i + 1;
        }
        if n != 20 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 20 columns, found {n}",
                line_no + 1
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("trajectory file has no rows".into()));
    }
    let times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let dt = match declared_dt {
        Some(dt) => {
            let consistent = times
                .iter()
                .enumerate()
                .all(|(k, &t)| (t - (times[0] + dt * k as f64)).abs() <= 1e-9 * (1.0 + t.abs()));
            if !consistent {
                return Err(Error::InvalidArgument("time column disagrees with the declared dt".into()));
            }
            dt
        }
        None => recover_step(&times)?,
    };
    let states = rows
        .iter()
        .map(|r| State {
            r: Vector3::new(r[1], r[2], r[3]),
            v: Vector3::new(r[4], r[5], r[6]),
            q: Vector4::new(r[7], r[8], r[9], r[10]),
            w: Vector3::new(r[11], r[12], r[13]),
        })
        .collect();
    let inputs = rows[..rows.len() - 1]
        .iter()
        .map(|r| ControlInput {
            f: Vector3::new(r[14], r[15], r[16]),
            tau: Vector3::new(r[17], r[18], r[19]),
        })
        .collect();
    Trajectory::new(times[0], dt, states, inputs)
}

fn next_up(x: f64, n: i64) -> f64 {
    // positive finite doubles are ordered like their bit patterns
    f64::from_bits((x.to_bits() as i64 + n) as u64)
}

fn recover_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Ok(1.0);
    }
    let t0 = times[0];
    let guess = times[1] - t0;
    if !(guess > 0.0 && guess.is_finite()) {
        return Err(Error::InvalidArgument("time column must increase".into()));
    }
    let reproduces = |dt: f64| {
        times
            .iter()
            .enumerate()
            .all(|(k, &t)| (t0 + dt * k as f64).to_bits() == t.to_bits())
    };
    for offset in 0..=64i64 {
        for cand in [next_up(guess, offset), next_up(guess, -offset)] {
            if cand > 0.0 && reproduces(cand) {
                return Ok(cand);
            }
        }
    }
    Err(Error::InvalidArgument("time column is not uniformly spaced".into()))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_atomic(path, trajectory_to_csv(traj).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_csv(&fs::read_to_string(path)?)
}

fn columns(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        push_row(&mut out, r);
    }
    out
}

/// `t, rx, ry, rz, vx, vy, vz` per state.
pub fn position_history_csv(traj: &Trajectory) -> String {
    columns(
        &TRAJECTORY_HEADER[..7],
        traj.states.iter().enumerate().map(|(k, x)| {
            let mut row = vec![traj.time(k)];
            row.extend(x.r.iter().chain(x.v.iter()));
            row
        }),
    )
}

/// `t, qx, qy, qz, qw, wx, wy, wz` per state.
pub fn attitude_history_csv(traj: &Trajectory) -> String {
    let header: Vec<&str> = std::iter::once("t").chain(TRAJECTORY_HEADER[7..14].iter().copied()).collect();
    columns(
        &header,
        traj.states.iter().enumerate().map(|(k, x)| {
            let mut row = vec![traj.time(k)];
            row.extend(x.q.iter().chain(x.w.iter()));
            row
        }),
    )
}

/// `t, fx, fy, fz, taux, tauy, tauz` per input.
pub fn input_history_csv(traj: &Trajectory) -> String {
    let header: Vec<&str> = std::iter::once("t").chain(TRAJECTORY_HEADER[14..].iter().copied()).collect();
    columns(
        &header,
        traj.inputs.iter().enumerate().map(|(k, u)| {
            let mut row = vec![traj.time(k)];
            row.extend(u.f.iter().chain(u.tau.iter()));
            row
        }),
    )
}

/// Estimates and variances per Gauss-Newton iterate.
pub fn estimate_history_csv(est: &EstimationResult) -> String {
    let mut header = vec!["iteration".to_string(), "cost".to_string()];
    header.extend(PARAMETER_NAMES.iter().map(|n| n.to_string()));
    header.extend(PARAMETER_NAMES.iter().map(|n| format!("var_{n}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    columns(
        &header,
        est.iteration_costs
            .iter()
            .zip(&est.theta_history)
            .zip(&est.variance_history)
            .enumerate()
            .map(|(i, ((c, th), var))| {
                let mut row = vec![i as f64, *c, th.mass];
                row.extend(th.inertia.iter().chain(var.iter()));
                row
            }),
    )
}
