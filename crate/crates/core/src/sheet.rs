//! CSV sheets exchanged with human reviewers: UTF-8, a header row, comma
//! delimited, every field quoted.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub fn write_sheet<R, F>(header: &[&str], rows: R) -> Result<String>
where
    R: IntoIterator<Item = Vec<F>>,
    F: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::validation(e.to_string()))
}

/// One data row keyed by column name, with its 1-based line number in the
/// file (the header is line 1).
#[derive(Debug, Clone)]
pub struct SheetRow {
    pub line: usize,
    fields: HashMap<String, String>,
}

impl SheetRow {
    pub fn get(&self, column: &str) -> &str {
        self.fields.get(column).map(String::as_str).unwrap_or("")
    }
}

/// Parse a sheet, requiring `columns` in the header.
pub fn read_sheet(text: &str, columns: &[&str]) -> Result<Vec<SheetRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let missing: Vec<&str> = columns
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Sheet(vec![format!(
            "line 1: header is missing column(s) {}",
            missing.join(", ")
        )]));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields = headers
            .iter()
            .zip(rec.iter())
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        rows.push(SheetRow { line, fields });
    }
    Ok(rows)
}
