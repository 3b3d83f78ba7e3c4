//! Versioned CSV tables. The first line is `# gdr <schema> v<version>`,
//! followed by an ordinary header row.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{GdrError, Result};

pub const CSV_VERSION: u32 = 1;

fn csv_error(path: &Path, e: csv::Error) -> GdrError {
    GdrError::io(path, std::io::Error::other(e.to_string()))
}

pub fn version_line(schema: &str) -> String {
    format!("# gdr {schema} v{CSV_VERSION}")
}

pub fn to_csv_string<T: Serialize>(schema: &str, rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(Path::new(schema), e))?;
    }
    let body = w.into_inner().map_err(|e| GdrError::io(schema, e.into_error()))?;
    Ok(format!("{}\n{}", version_line(schema), String::from_utf8_lossy(&body)))
}

pub fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    fs::write(path, to_csv_string(schema, rows)?).map_err(|e| GdrError::io(path, e))
}

/// Reads a table, insisting on the expected schema and version.
pub fn read_csv<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| GdrError::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    if first.trim() != version_line(schema) {
        return Err(GdrError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected {:?}, found {first:?}", version_line(schema)),
        });
    }
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        name: String,
        value: f64,
    }

    #[test]
    fn round_trip_with_version_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![Row { name: "a".into(), value: 0.1 }, Row { name: "b,c".into(), value: -2e-9 }];
        write_csv(&p, "demo", &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# gdr demo v1\nname,value\n"));
        assert_eq!(read_csv::<Row>(&p, "demo").unwrap(), rows);
        assert!(read_csv::<Row>(&p, "other").is_err());
    }
}
