//! Plain-text file formats: data CSV, label CSV and the clustering sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{Clustering, Method};
use crate::error::{Error, Result};
use crate::meanshift::ModeSet;

/// Reads numeric rows. A first row that does not parse as numbers is taken
/// as a header and skipped.
pub fn read_data<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse(format!("line {}: {e}", i + 1)));
            }
        };
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {}: non-finite value", i + 1)));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!(
                    "line {}: expected {w} columns, found {}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        n += 1;
    }
    let d = width.ok_or_else(|| Error::Parse("no data rows".into()))?;
    Ok(DMatrix::from_row_slice(n, d, &values))
}

pub fn read_data_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_data(BufReader::new(File::open(path)?))
}

/// Writes rows with no header, values in shortest round-trip decimal form.
pub fn write_data<W: Write>(writer: W, data: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for row in data.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_data_csv(path: impl AsRef<Path>, data: &DMatrix<f64>) -> Result<()> {
    write_data(File::create(path)?, data)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    point_index: usize,
    label: usize,
}

/// `point_index,label` with 0-based point indices and 1-based labels.
pub fn write_labels<W: Write>(writer: W, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (point_index, &label) in labels.iter().enumerate() {
        w.serialize(LabelRow { point_index, label })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    write_labels(File::create(path)?, labels)
}

/// Reads a label CSV back, ordered by point index. Indices must cover
/// `0..n` exactly once.
pub fn read_labels<R: Read>(reader: R) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<LabelRow> = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r.map_err(|e| Error::Parse(e.to_string()))?);
    }
    let mut labels = vec![0usize; rows.len()];
    let mut seen = vec![false; rows.len()];
    for r in rows {
        if r.point_index >= labels.len() || seen[r.point_index] {
            return Err(Error::Parse(format!(
                "point index {} duplicated or out of range",
                r.point_index
            )));
        }
        if r.label == 0 {
            return Err(Error::Parse("labels are 1-based".into()));
        }
        seen[r.point_index] = true;
        labels[r.point_index] = r.label;
    }
    Ok(labels)
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    read_labels(BufReader::new(File::open(path)?))
}

/// JSON written next to a label file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterSidecar {
    pub k: usize,
    pub method: Method,
    pub modes: Vec<Vec<f64>>,
    pub mode_densities: Vec<f64>,
    /// Cluster label per mode, `null` for modes no point was assigned to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_labels: Option<Vec<Option<usize>>>,
    /// Cluster label per component (component order), for merged clusterings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_map: Option<Vec<usize>>,
    pub data_scale: Option<f64>,
    pub empty_clusters: Vec<usize>,
    /// 1-based component numbers (merge) or 0-based point indices (modal)
    /// whose ascent did not resolve.
    pub unresolved: Vec<usize>,
}

impl ClusterSidecar {
    pub fn new(clustering: &Clustering, modes: Option<&ModeSet>) -> Self {
        Self {
            k: clustering.k,
            method: clustering.method,
            modes: modes
                .map(|m| {
                    m.modes
                        .iter()
                        .map(|v| v.iter().copied().collect())
                        .collect()
                })
                .unwrap_or_default(),
            mode_densities: modes.map(|m| m.densities.clone()).unwrap_or_default(),
            mode_labels: None,
            merge_map: None,
            data_scale: modes.map(|m| m.data_scale),
            empty_clusters: clustering.empty_clusters(),
            unresolved: Vec::new(),
        }
    }
}
