//! Long-format CSV ingestion and export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EventTable, LongView};
use crate::error::{Error, Result};

/// What to do with an empty or non-finite feature cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    DropRow,
}

/// Column mapping for a long-format file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id_column: String,
    pub time_column: String,
    /// Feature columns to read; `None` takes every other column in file order.
    pub features: Option<Vec<String>>,
    pub missing: MissingPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            time_column: "time".into(),
            features: None,
            missing: MissingPolicy::Reject,
        }
    }
}

pub fn read_long_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LongView> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_long_csv_from(file, schema)
}

pub fn read_long_csv_from<R: Read>(reader: R, schema: &CsvSchema) -> Result<LongView> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = position(&schema.id_column)?;
    let time_col = position(&schema.time_column)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| position(n)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&c| c != id_col && c != time_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::InvalidView("no feature columns".into()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();

    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    let mut dropped = 0usize;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = idx + 2;
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::BadCell {
                row,
                column: schema.id_column.clone(),
                reason: "empty subject id".into(),
            });
        }
        let time = parse_number(record.get(time_col).unwrap_or(""))
            .filter(|t| t.is_finite())
            .ok_or_else(|| Error::BadCell {
                row,
                column: schema.time_column.clone(),
                reason: "time is not a finite number".into(),
            })?;

        let mut row_vals = Vec::with_capacity(feature_cols.len());
        let mut missing_at = None;
        for (&c, name) in feature_cols.iter().zip(&feature_names) {
            let cell = record.get(c).unwrap_or("");
            if is_missing(cell) {
                missing_at.get_or_insert(name);
                row_vals.push(f64::NAN);
                continue;
            }
            match parse_number(cell) {
                Some(v) if v.is_finite() => row_vals.push(v),
                Some(_) => {
                    missing_at.get_or_insert(name);
                    row_vals.push(f64::NAN);
                }
                None => {
                    return Err(Error::BadCell {
                        row,
                        column: name.clone(),
                        reason: format!("non-numeric value `{cell}`"),
                    })
                }
            }
        }
        if let Some(name) = missing_at {
            match schema.missing {
                MissingPolicy::Reject => {
                    return Err(Error::BadCell {
                        row,
                        column: name.clone(),
                        reason: "missing value".into(),
                    })
                }
                MissingPolicy::DropRow => {
                    dropped += 1;
                    continue;
                }
            }
        }
        ids.push(id);
        times.push(time);
        flat.extend(row_vals);
    }
    if dropped > 0 {
        warn!("dropped {dropped} row(s) with missing feature values");
    }
    let n = ids.len();
    let values = Array2::from_shape_vec((n, feature_names.len()), flat)
        .map_err(|e| Error::InvalidView(e.to_string()))?;
    LongView::from_unsorted(values, ids, times, feature_names)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok()
}

/// Writes `id,time,<features>` with shortest round-trip float formatting.
pub fn write_long_csv_to<W: Write>(view: &LongView, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".to_string()];
    header.extend(view.feature_names().iter().cloned());
    wtr.write_record(&header)?;
    let values = view.values();
    for (r, (id, t)) in view.subject_ids().iter().zip(view.times()).enumerate() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(id.clone());
        rec.push(t.to_string());
        rec.extend(values.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_long_csv(view: &LongView, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_long_csv_to(view, file)
}

/// Reads `id,event_time`; an empty event time means the subject has no event.
pub fn read_event_csv(path: impl AsRef<Path>) -> Result<EventTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let id_col = header
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| Error::MissingColumn("id".into()))?;
    let ev_col = header
        .iter()
        .position(|h| h == "event_time")
        .ok_or_else(|| Error::MissingColumn("event_time".into()))?;
    let mut events = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 2;
        let id = record.get(id_col).unwrap_or("").to_string();
        let cell = record.get(ev_col).unwrap_or("");
        let value = if is_missing(cell) {
            None
        } else {
            Some(parse_number(cell).filter(|v| v.is_finite()).ok_or_else(|| Error::BadCell {
                row,
                column: "event_time".into(),
                reason: format!("invalid event time `{cell}`"),
            })?)
        };
        if events.insert(id.clone(), value).is_some() {
            return Err(Error::BadCell {
                row,
                column: "id".into(),
                reason: format!("more than one event row for subject `{id}`"),
            });
        }
    }
    Ok(EventTable::new(events))
}
