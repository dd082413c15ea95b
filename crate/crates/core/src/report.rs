//! Machine-readable result output: one CSV row per checked quantity and
//! a versioned JSON summary. The CSV contract is bit-exact for CI:
//! '.' decimal separator, 17 significant digits, LF line endings.

use serde::Serialize;

use crate::error::Result;

// wall_ms is reported in the JSON summary only: the CSV contract is
// byte-identical output for a fixed (seed, worker count).
pub const CSV_HEADER: &str =
    "experiment,model,channel,quantity,value,stderr,tolerance,pass,n_paths,dt,seed";

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub channel: String,
    pub quantity: String,
    pub value: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

impl ResultRow {
    pub fn new(experiment: &str, model: &str, quantity: &str) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            model: model.to_string(),
            channel: String::new(),
            quantity: quantity.to_string(),
            value: 0.0,
            stderr: 0.0,
            tolerance: 0.0,
            pass: false,
            n_paths: 0,
            dt: 0.0,
            seed: 0,
            wall_ms: 0,
        }
    }
}

/// 17 significant digits, '.' decimal, locale-independent.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn csv_line(row: &ResultRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        row.experiment,
        row.model,
        row.channel,
        row.quantity,
        format_float(row.value),
        format_float(row.stderr),
        format_float(row.tolerance),
        row.pass,
        row.n_paths,
        format_float(row.dt),
        row.seed
    )
}

pub fn write_csv<W: std::io::Write>(w: &mut W, rows: &[ResultRow]) -> Result<()> {
    w.write_all(CSV_HEADER.as_bytes())?;
    w.write_all(b"\n")?;
    for row in rows {
        w.write_all(csv_line(row).as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct JsonSummary<'a> {
    schema_version: u32,
    all_pass: bool,
    rows: &'a [ResultRow],
}

pub fn write_json<W: std::io::Write>(w: &mut W, rows: &[ResultRow]) -> Result<()> {
    let summary = JsonSummary {
        schema_version: crate::config::SCHEMA_VERSION,
        all_pass: rows.iter().all(|r| r.pass),
        rows,
    };
    serde_json::to_writer_pretty(&mut *w, &summary)
        .map_err(|e| crate::error::Error::Config(format!("json write: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}
