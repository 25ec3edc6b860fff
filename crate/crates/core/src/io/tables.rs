//! CSV schemas: `traces.csv` and `calib.csv`.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! and writing it back reproduces it byte for byte.

use std::io::{Read, Write};

use crate::assay::CalibrationPoint;
use crate::error::{Error, Result};
use crate::noise::AmountUnit;
use crate::sequence::{Trace, TraceRow};

pub const TRACE_COLUMNS: [&str; 5] = ["tau_s", "sig1_counts", "sig2_counts", "signal", "signal_err"];
pub const CALIB_COLUMNS: [&str; 5] = ["amount", "unit", "t1_ms", "t1_err_ms", "location_id"];

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_err(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize);
    Error::Schema {
        column: "*".into(),
        row,
        message: e.to_string(),
    }
}

fn io_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: "<stream>".into(),
            source,
        },
        other => Error::Schema {
            column: "*".into(),
            row: None,
            message: format!("{other:?}"),
        },
    }
}

/// Column positions located by header name; order in the file is free.
struct Columns {
    index: Vec<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let mut index = Vec::with_capacity(required.len());
        for name in required {
            let found = headers.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Schema {
                column: (*name).into(),
                row: None,
                message: format!("missing column (header is `{}`)", headers.iter().collect::<Vec<_>>().join(",")),
            })?;
            index.push(found);
        }
        Ok(Self { index })
    }

    fn field<'r>(&self, record: &'r csv::StringRecord, k: usize) -> &'r str {
        record.get(self.index[k]).unwrap_or("").trim()
    }
}

fn parse_f64(text: &str, column: &str, row: usize) -> Result<f64> {
    text.parse::<f64>().map_err(|e| Error::Schema {
        column: column.into(),
        row: Some(row),
        message: format!("`{text}` is not a number ({e})"),
    })
}

fn parse_opt_f64(text: &str, column: &str, row: usize) -> Result<Option<f64>> {
    if text.is_empty() {
        Ok(None)
    } else {
        parse_f64(text, column, row).map(Some)
    }
}

pub fn write_trace<W: Write>(writer: W, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_COLUMNS).map_err(io_err)?;
    for r in trace.rows() {
        w.write_record([
            fmt_f64(r.tau_s),
            fmt_f64(r.sig1),
            fmt_f64(r.sig2),
            fmt_f64(r.signal),
            r.signal_err.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<stream>".into(),
        source,
    })
}

pub fn read_trace<R: Read>(reader: R) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::locate(&headers, &TRACE_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 2;
        rows.push(TraceRow {
            tau_s: parse_f64(cols.field(&rec, 0), TRACE_COLUMNS[0], row)?,
            sig1: parse_f64(cols.field(&rec, 1), TRACE_COLUMNS[1], row)?,
            sig2: parse_f64(cols.field(&rec, 2), TRACE_COLUMNS[2], row)?,
            signal: parse_f64(cols.field(&rec, 3), TRACE_COLUMNS[3], row)?,
            signal_err: parse_opt_f64(cols.field(&rec, 4), TRACE_COLUMNS[4], row)?,
        });
    }
    Trace::new(rows).map_err(|e| Error::Schema {
        column: "*".into(),
        row: None,
        message: e.to_string(),
    })
}

pub fn write_calibration<W: Write>(writer: W, points: &[CalibrationPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CALIB_COLUMNS).map_err(io_err)?;
    for p in points {
        w.write_record([
            fmt_f64(p.amount),
            p.unit.to_string(),
            fmt_f64(p.t1_ms),
            p.t1_err_ms.map(fmt_f64).unwrap_or_default(),
            p.location_id.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<stream>".into(),
        source,
    })
}

pub fn read_calibration<R: Read>(reader: R) -> Result<Vec<CalibrationPoint>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::locate(&headers, &CALIB_COLUMNS)?;
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 2;
        let unit: AmountUnit = cols.field(&rec, 1).parse().map_err(|e: Error| Error::Schema {
            column: "unit".into(),
            row: Some(row),
            message: e.to_string(),
        })?;
        let location = cols.field(&rec, 4);
        let p = CalibrationPoint {
            amount: parse_f64(cols.field(&rec, 0), "amount", row)?,
            unit,
            t1_ms: parse_f64(cols.field(&rec, 2), "t1_ms", row)?,
            t1_err_ms: parse_opt_f64(cols.field(&rec, 3), "t1_err_ms", row)?,
            location_id: (!location.is_empty()).then(|| location.to_string()),
        };
        p.validate().map_err(|e| Error::Schema {
            column: match &e {
                Error::ParameterDomain { name, .. } => (*name).to_string(),
                _ => "*".into(),
            },
            row: Some(row),
            message: e.to_string(),
        })?;
        points.push(p);
    }
    Ok(points)
}
