//! CSV emission and the FSC-matrix reader used by `evaluate --history`.

use std::path::Path;

use fsld_core::error::{FsldError, Result};
use fsld_core::metrics::FscCurve;
use fsld_core::optim::RunTrace;

/// Locale-free number text; undefined values print as `nan`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), num)
}

fn csv_err(path: &Path, e: csv::Error) -> FsldError {
    FsldError::Data(format!("{}: {e}", path.display()))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn write_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    let rows = trace
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.loss),
                num(e.eta),
                e.backtracks.to_string(),
                opt(e.precond_rel_err),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &header(&["epoch", "loss", "eta", "backtracks", "precond_rel_err"]), &rows)
}

pub fn write_steps(path: &Path, trace: &RunTrace) -> Result<()> {
    let rows = trace
        .steps
        .iter()
        .map(|s| {
            vec![
                s.epoch.to_string(),
                s.iteration.to_string(),
                s.batch_len.to_string(),
                num(s.step.eta),
                s.step.backtracks.to_string(),
                num(s.step.f_before),
                num(s.step.f_after),
                num(s.step.required_decrease),
                u8::from(s.step.satisfied()).to_string(),
            ]
        })
        .collect::<Vec<_>>();
    let cols = [
        "epoch",
        "iteration",
        "batch_len",
        "eta",
        "backtracks",
        "f_before",
        "f_after",
        "required_decrease",
        "armijo_ok",
    ];
    write_csv(path, &header(&cols), &rows)
}

/// Epoch rows by shell columns.
pub fn write_fsc_matrix(path: &Path, history: &[FscCurve]) -> Result<()> {
    let shells = history.first().map_or(0, FscCurve::len);
    let mut cols = vec!["epoch".to_string()];
    cols.extend((0..shells).map(|s| format!("shell_{s}")));
    let rows = history
        .iter()
        .enumerate()
        .map(|(e, c)| std::iter::once(e.to_string()).chain(c.values.iter().map(|v| opt(*v))).collect())
        .collect::<Vec<_>>();
    write_csv(path, &cols, &rows)
}

/// Reads a matrix written by [`write_fsc_matrix`] back into per-epoch curves.
pub fn read_fsc_matrix(path: &Path) -> Result<Vec<FscCurve>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let shells = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| match f {
                "nan" => Ok(None),
                _ => f
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| FsldError::Data(format!("{}: bad FSC value '{f}'", path.display()))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FscCurve {
            radii: (0..shells).collect(),
            counts: vec![0; shells],
            complex: vec![None; shells],
            values,
        });
    }
    Ok(out)
}
