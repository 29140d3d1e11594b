//! Numeric CSV: no header, no quoting, optional integer label in the last column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{OodTag, TaggedSample};
use crate::error::{Error, Result};
use crate::linalg::Vector;

pub fn read_csv(path: impl AsRef<Path>, has_label: bool) -> Result<Vec<TaggedSample>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path.as_ref()).map_err(csv_error)?;
    let mut out = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(Error::Malformed(format!("row {} has {} cells, expected {}", row + 1, record.len(), width.unwrap())));
        }
        let mut cells: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Malformed(format!("row {} column {}: {:?} is not numeric", row + 1, col + 1, cell)))
            })
            .collect::<Result<_>>()?;
        let label = if has_label {
            let raw = cells.pop().ok_or_else(|| Error::Malformed(format!("row {} is empty", row + 1)))?;
            if raw < 0.0 || raw.fract() != 0.0 {
                return Err(Error::Malformed(format!("row {}: label {raw} is not a class index", row + 1)));
            }
            Some(raw as usize)
        } else {
            None
        };
        out.push(TaggedSample { features: Vector(cells), class_label: label, ood_tag: OodTag::Idd });
    }
    Ok(out)
}

/// Write features (and the class label when present) using shortest
/// round-trip decimal formatting.
pub fn write_csv(path: impl AsRef<Path>, samples: &[TaggedSample], with_label: bool) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let mut line = s.features.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
        if with_label {
            let label = s.class_label.ok_or_else(|| Error::InvalidConfig("sample without a class label".into()))?;
            line.push_str(&format!(",{label}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Malformed(format!("{other:?}")),
        }
    } else {
        Error::Malformed(e.to_string())
    }
}
