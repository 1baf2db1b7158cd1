//! File formats: trajectory CSV with a JSON metadata sidecar, readout JSON,
//! VPT tables and experiment results. Every file is written to a temporary
//! sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{NvarError, Result};
use crate::experiments::{CellOutcome, GridResult};
use crate::integrate::{Trajectory, TrajectoryMeta};
use crate::metrics::Vpt;
use crate::readout::Readout;

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path.file_name().ok_or_else(|| {
        NvarError::InvalidParameter(format!("not a file path: {}", path.display()))
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// `foo.csv` -> `foo.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `t,x0,x1,...`, one row per stored time.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t");
    for i in 0..traj.dim() {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for k in 0..traj.len() {
        out.push_str(&fmt_value(traj.time(k)));
        for v in traj.column(k) {
            out.push(',');
            out.push_str(&fmt_value(*v));
        }
        out.push('\n');
    }
    out
}

/// Writes the CSV and its metadata sidecar.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    atomic_write(path, trajectory_csv(traj).as_bytes())?;
    write_json(&sidecar_path(path), &traj.meta)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let meta_path = sidecar_path(path);
    let meta: TrajectoryMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| {
        NvarError::Parse(format!("cannot read metadata {}: {e}", meta_path.display()))
    })?)?;
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| NvarError::Parse(format!("{}: empty file", path.display())))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim != meta.system.dimension() {
        return Err(NvarError::DimensionMismatch {
            expected: meta.system.dimension(),
            got: dim,
        });
    }
    let mut data = Vec::new();
    let mut cols = 0;
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        fields.next();
        let before = data.len();
        for f in fields {
            data.push(f.trim().parse::<f64>().map_err(|e| {
                NvarError::Parse(format!("{} line {}: {e}", path.display(), n + 2))
            })?);
        }
        if data.len() - before != dim {
            return Err(NvarError::Parse(format!(
                "{} line {}: expected {dim} values",
                path.display(),
                n + 2
            )));
        }
        cols += 1;
    }
    Ok(Trajectory {
        values: DMatrix::from_vec(dim, cols, data),
        meta,
    })
}

pub fn segment_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("segment-{i:04}.csv"))
}

/// Writes test segments as `segment-NNNN.csv` files in `dir`.
pub fn write_segments(dir: &Path, segments: &[Trajectory]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = segment_path(dir, i);
            write_trajectory(&p, s)?;
            Ok(p)
        })
        .collect()
}

/// Reads every `segment-*.csv` in `dir`, in name order.
pub fn read_segments(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("segment-") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_trajectory(p)).collect()
}

pub fn write_readout(path: &Path, readout: &Readout) -> Result<()> {
    write_json(path, readout)
}

pub fn read_readout(path: &Path) -> Result<Readout> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// VPT table with the threshold in a leading comment line.
pub fn vpt_csv(samples: &[Vpt], epsilon: f64) -> String {
    let mut out = format!("# epsilon={epsilon}\nsegment,vpt,censored\n");
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", s.vpt, s.censored));
    }
    out
}

/// Flat table with one row per (cell, sample); failed cells get one row
/// with empty sample fields.
pub fn results_csv(result: &GridResult) -> String {
    let mut out = String::from(
        "experiment,system,variant,features,degree,lags,bias,feature_count,skip,scheme_train,scheme_test,\
         noise,divisor,preconditioned,train_columns,best,status,rank,sample,vpt,censored\n",
    );
    for cell in &result.cells {
        let k = &cell.key;
        let prefix = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            result.experiment,
            k.system,
            serde_json::to_value(k.variant)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            k.features,
            k.degree,
            k.lags,
            k.bias,
            k.feature_count,
            k.skip,
            k.scheme_train,
            k.scheme_test,
            k.noise,
            k.divisor,
            k.preconditioned,
            k.train_columns,
            cell.best,
        );
        match &cell.outcome {
            CellOutcome::Evaluated { distribution, rank } => {
                let rank = rank.map(|r| r.to_string()).unwrap_or_default();
                for (i, s) in distribution.samples.iter().enumerate() {
                    out.push_str(&format!(
                        "{prefix},ok,{rank},{i},{},{}\n",
                        s.vpt, s.censored
                    ));
                }
            }
            CellOutcome::FitFailure { .. } => {
                out.push_str(&format!("{prefix},fit_failure,,,,\n"));
            }
        }
    }
    out
}

/// Writes `<id>-<hash>.json`, `<id>-<hash>.csv` and any attractor dumps
/// into `dir`; returns the written paths.
pub fn write_results(dir: &Path, result: &GridResult) -> Result<Vec<PathBuf>> {
    let stem = format!("{}-{}", result.experiment, result.config_hash);
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    write_json(&json, result)?;
    atomic_write(&csv, results_csv(result).as_bytes())?;
    let mut paths = vec![json, csv];
    for dump in &result.attractors {
        for (suffix, traj) in [("truth", &dump.truth), ("prediction", &dump.prediction)] {
            let p = dir.join(format!("{stem}-attractor-{}-{suffix}.csv", dump.name));
            write_trajectory(&p, traj)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
