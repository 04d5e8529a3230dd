//! On-disk formats for sample batches.
//!
//! The binary form is a flat dump of little-endian `f64` values in row-major
//! order (`<stem>.bin`) with a JSON sidecar (`<stem>.json`) carrying the
//! shape and provenance. Small batches can also be written as CSV with a
//! `x0,x1,...` header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::{Provenance, SampleBatch};

const FORMAT: &str = "fastdpm-samples/1";

/// JSON sidecar of a binary sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub format: String,
    pub dim: usize,
    pub n: usize,
    pub provenance: Provenance,
    pub model_evals: u64,
    pub normals_drawn: u64,
}

pub fn write_binary(batch: &SampleBatch, stem: &Path) -> Result<()> {
    let bytes: Vec<u8> = batch.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(stem.with_extension("bin"), bytes)?;
    let sidecar = SampleSidecar {
        format: FORMAT.into(),
        dim: batch.dim,
        n: batch.len(),
        provenance: batch.provenance.clone(),
        model_evals: batch.model_evals,
        normals_drawn: batch.normals_drawn,
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_binary(stem: &Path) -> Result<SampleBatch> {
    let sidecar: SampleSidecar =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    if sidecar.format != FORMAT {
        return Err(Error::Validation(format!(
            "unknown sample format {}",
            sidecar.format
        )));
    }
    let bytes = fs::read(stem.with_extension("bin"))?;
    if bytes.len() != 8 * sidecar.n * sidecar.dim {
        return Err(Error::Validation(format!(
            "binary dump holds {} bytes, sidecar promises {} x {} values",
            bytes.len(),
            sidecar.n,
            sidecar.dim
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SampleBatch {
        dim: sidecar.dim,
        samples,
        provenance: sidecar.provenance,
        traces: None,
        model_evals: sidecar.model_evals,
        normals_drawn: sidecar.normals_drawn,
    })
}

/// Renders row-major samples as CSV. Values use Rust's shortest round-trip
/// formatting, so reading back is exact.
pub fn samples_to_csv(samples: &[f64], dim: usize) -> String {
    let header: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in samples.chunks_exact(dim.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses CSV written by [`samples_to_csv`]; returns `(samples, dim)`.
pub fn samples_from_csv(text: &str) -> Result<(Vec<f64>, usize)> {
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty sample CSV".into()))?;
    let dim = header.split(',').count();
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != dim {
            return Err(Error::Validation(format!(
                "CSV row {} has {} cells, expected {dim}",
                i + 1,
                row.len()
            )));
        }
        for cell in row {
            samples.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("CSV row {}: {e}", i + 1)))?,
            );
        }
    }
    Ok((samples, dim))
}

pub fn write_csv(batch: &SampleBatch, path: &Path) -> Result<()> {
    fs::write(path, samples_to_csv(&batch.samples, batch.dim))?;
    Ok(())
}

/// Loads raw samples from a `.csv` file or a binary dump (by stem or `.bin`/`.json` path).
pub fn read_samples(path: &Path) -> Result<(Vec<f64>, usize)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => samples_from_csv(&fs::read_to_string(path)?),
        _ => {
            let b = read_binary(path)?;
            Ok((b.samples, b.dim))
        }
    }
}
