//! CSV tables and the run manifest.

use std::path::Path;

use serde::Serialize;

use super::{AblationRow, CellStatus, ContourPoint, CycleRow, ExperimentConfig, SpectrumRow, StrategyRow};
use crate::error::{Error, Result};

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SpectrumCsv {
    hours: f64,
    n_paired: usize,
    wer: Option<f64>,
    seed: u64,
    status: String,
}

pub fn write_spectrum_csv(path: &Path, rows: &[SpectrumRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| SpectrumCsv {
            hours: r.hours,
            n_paired: r.n_paired,
            wer: r.wer,
            seed: r.seed,
            status: r.status.label().to_owned(),
        }),
    )
}

#[derive(Serialize)]
struct AblationCsv {
    dropped_term: String,
    n_paired: usize,
    wer: Option<f64>,
    seed: u64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| AblationCsv {
            dropped_term: r.dropped_term.map_or("none".to_owned(), |t| t.name().to_owned()),
            n_paired: r.n_paired,
            wer: r.wer,
            seed: r.seed,
        }),
    )
}

#[derive(Serialize)]
struct CycleCsv {
    cycle_enabled: bool,
    n_paired: usize,
    wer: Option<f64>,
    seed: u64,
}

pub fn write_cycle_csv(path: &Path, rows: &[CycleRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| CycleCsv { cycle_enabled: r.cycle_enabled, n_paired: r.n_paired, wer: r.wer, seed: r.seed }),
    )
}

#[derive(Serialize)]
struct StrategyCsv {
    strategy: &'static str,
    n_paired: usize,
    wer: Option<f64>,
    seed: u64,
}

pub fn write_strategy_csv(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    write_csv(
        path,
        rows.iter().map(|r| StrategyCsv {
            strategy: match r.strategy {
                super::Strategy::Joint => "joint",
                super::Strategy::Separate => "separate",
            },
            n_paired: r.n_paired,
            wer: r.wer,
            seed: r.seed,
        }),
    )
}

#[derive(Serialize)]
struct ContourCsv {
    hours: f64,
    n_paired: f64,
    wer_interp: Option<f64>,
}

pub fn write_contour_csv(path: &Path, points: &[ContourPoint]) -> Result<()> {
    write_csv(
        path,
        points.iter().map(|p| ContourCsv { hours: p.hours, n_paired: p.n_paired, wer_interp: p.wer_interp }),
    )
}

/// Full configuration plus every result row, for reproducing any row.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, R: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a ExperimentConfig,
    pub rows: &'a [R],
}

pub fn write_manifest<R: Serialize>(path: &Path, manifest: &RunManifest<'_, R>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Serde(e.to_string()))?;
    crate::container::write_atomic(path, text.as_bytes())
}

/// True if any row failed (infeasible cells are not failures).
pub fn any_failed<'a>(statuses: impl IntoIterator<Item = &'a CellStatus>) -> bool {
    statuses.into_iter().any(|s| matches!(s, CellStatus::Failed(_)))
}
