//! Report emission as JSON or CSV.

use std::fs::File;
use std::io::{self, Write};

use macd_core::eval::report::validate_report;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Format, OutputConfig};
use crate::CliError;

fn sink(out: &OutputConfig) -> Result<Box<dyn Write>, CliError> {
    Ok(match &out.path {
        Some(path) => {
            Box::new(File::create(path).map_err(|e| CliError::Input(format!("cannot create {}: {e}", path.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_err(e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("writing report: {e}"))
}

/// Validates `report`, then writes it as pretty JSON or as `rows` in CSV.
pub fn emit<R: Serialize>(report: &Value, rows: &[R], out: &OutputConfig) -> Result<(), CliError> {
    validate_report(report).map_err(|e| CliError::Other(e.to_string()))?;
    let mut w = sink(out)?;
    match out.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, report).map_err(write_err)?;
            writeln!(w).map_err(write_err)?;
        }
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for row in rows {
                csv.serialize(row).map_err(write_err)?;
            }
            csv.flush().map_err(write_err)?;
            return Ok(());
        }
    }
    w.flush().map_err(write_err)
}
