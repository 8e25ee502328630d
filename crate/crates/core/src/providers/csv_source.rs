//! Offline provider backed by an exported csv file.
//!
//! Format: header `code,date,<provider-field>...`, dates as `YYYY-MM-DD`,
//! empty cells are null.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use super::{parse_number_cell, DataQuery, FieldMap, ProviderError, RawRow};

#[derive(Debug)]
pub(super) struct CsvTable {
    columns: Vec<String>,
    rows: Vec<RawRow>,
}

impl CsvTable {
    pub(super) fn load(path: &Path) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| e.to_string())?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers.len() < 2 || headers[0] != "code" || headers[1] != "date" {
            return Err("header must start with `code,date`".to_owned());
        }
        let columns = headers[2..].to_vec();

        let mut rows = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| format!("line {line}: {e}"))?;
            let code = record.get(0).unwrap_or_default().to_owned();
            let date = NaiveDate::parse_from_str(record.get(1).unwrap_or_default(), "%Y-%m-%d")
                .map_err(|e| format!("line {line}: bad date: {e}"))?;
            let mut values = BTreeMap::new();
            for (col, name) in columns.iter().enumerate() {
                let cell = record.get(col + 2).unwrap_or_default();
                let v = parse_number_cell(cell).map_err(|e| format!("line {line}, column {name}: {e}"))?;
                values.insert(name.clone(), v);
            }
            rows.push(RawRow { code, date, values });
        }
        Ok(Self { columns, rows })
    }

    pub(super) fn fetch(&self, query: &DataQuery, field_map: &FieldMap) -> Result<Vec<RawRow>, ProviderError> {
        let wanted: Vec<&str> = query.fields.iter().map(|f| field_map.provider_name(*f)).collect();
        if let Some(missing) = wanted.iter().find(|w| !self.columns.iter().any(|c| c == *w)) {
            return Err(ProviderError::Schema {
                detail: format!("csv file has no column {missing:?}"),
            });
        }
        Ok(self
            .rows
            .iter()
            .filter(|r| query.contains_date(r.date) && query.codes.contains(&r.code))
            .map(|r| RawRow {
                code: r.code.clone(),
                date: r.date,
                values: wanted
                    .iter()
                    .map(|w| ((*w).to_owned(), r.values.get(*w).copied().flatten()))
                    .collect(),
            })
            .collect())
    }
}
