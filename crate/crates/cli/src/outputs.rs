//! Deterministic run artifacts.  Every writer emits floats through the
//! shortest-roundtrip formatter and never includes timestamps or durations,
//! so identical configurations produce byte-identical files.

use std::io::{BufWriter, Write};
use std::path::Path;

use vpsphere_core::diagnostics::{write_report_csv, ConservationReport};
use vpsphere_core::{Ensemble, GlobalSolution, Sample, ReducedCoord};

use crate::CliError;

type CliResult<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("cannot write {}: {e}", path.display()))
}

/// Sorted `key = value` lines.
pub fn write_metadata(path: &Path, entries: &[(String, String)]) -> CliResult<()> {
    let mut out = create(path)?;
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort();
    for (key, value) in sorted {
        writeln!(out, "{key} = {value}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Per-slab fixed-point iteration history: `slab,iteration,distance`.
pub fn write_convergence(path: &Path, sol: &GlobalSolution) -> CliResult<()> {
    let mut out = create(path)?;
    writeln!(out, "slab,iteration,distance").map_err(|e| io_err(path, e))?;
    for (si, slab) in sol.slabs.iter().enumerate() {
        for (it, d) in slab.iteration_history.iter().enumerate() {
            writeln!(out, "{si},{},{d}", it + 1).map_err(|e| io_err(path, e))?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// The conservation report as CSV (header from the diagnostics module).
pub fn write_conservation(path: &Path, report: &ConservationReport) -> CliResult<()> {
    let mut out = create(path)?;
    write_report_csv(report, &mut out)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// The solved field tables: `t,r,m,g` at every stride-th stored row of every
/// slab (the slab's final row always included).
pub fn write_field_csv(path: &Path, sol: &GlobalSolution, stride: usize) -> CliResult<()> {
    let stride = stride.max(1);
    let mut out = create(path)?;
    writeln!(out, "t,r,m,g").map_err(|e| io_err(path, e))?;
    for slab in &sol.slabs {
        let last = slab.table.n_rows() - 1;
        for row in 0..=last {
            if row % stride != 0 && row != last {
                continue;
            }
            let t = slab.table.row_time(row);
            let m = slab.table.m_row(row);
            let g = slab.table.g_row(row);
            for i in 0..slab.table.grid.nodes {
                writeln!(out, "{t},{},{},{}", slab.table.grid.node(i), m[i], g[i])
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// A sample list: `r,w,l,weight,f0` (one row per quadrature sample).
pub fn write_snapshot(path: &Path, ens: &Ensemble) -> CliResult<()> {
    let mut out = create(path)?;
    writeln!(out, "r,w,l,weight,f0").map_err(|e| io_err(path, e))?;
    for s in &ens.samples {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.coord.r, s.coord.w, s.coord.l, s.weight, s.f0
        )
        .map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Read a snapshot written by [`write_snapshot`].
pub fn read_snapshot(path: &Path) -> CliResult<Vec<Sample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read snapshot {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
            Some((_, l)) => break l.trim(),
            None => {
                return Err(CliError::Config(format!(
                    "snapshot {}: empty file",
                    path.display()
                )))
            }
        }
    };
    if header != "r,w,l,weight,f0" {
        return Err(CliError::Config(format!(
            "snapshot {}: expected header `r,w,l,weight,f0`, got `{header}`",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Config(format!(
                "snapshot {}:{}: expected 5 comma-separated values",
                path.display(),
                idx + 1
            )));
        }
        let mut v = [0.0_f64; 5];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field.trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!(
                    "snapshot {}:{}: `{field}` is not a number",
                    path.display(),
                    idx + 1
                ))
            })?;
        }
        samples.push(Sample {
            coord: ReducedCoord::new(v[0], v[1], v[2]),
            weight: v[3],
            f0: v[4],
        });
    }
    Ok(samples)
}
