//! Line-delimited JSON input and output.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Record {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let bytes = to_jsonl(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, serde::Deserialize, serde::Serialize)]
    struct Row {
        a: u32,
    }

    #[test]
    fn blank_lines_skipped_and_errors_located() {
        let rows: Vec<Row> = parse_jsonl("{\"a\":1}\n\n{\"a\":2}\n", "f").unwrap();
        assert_eq!(rows, vec![Row { a: 1 }, Row { a: 2 }]);
        let err = parse_jsonl::<Row>("{\"a\":1}\n{\"a\":\"x\"}\n", "f").unwrap_err();
        assert!(err.to_string().starts_with("f:2:"), "{err}");
    }

    #[test]
    fn encode_decode() {
        let rows = vec![Row { a: 3 }, Row { a: 4 }];
        let bytes = to_jsonl(&rows).unwrap();
        assert_eq!(bytes, b"{\"a\":3}\n{\"a\":4}\n");
        let back: Vec<Row> = parse_jsonl(std::str::from_utf8(&bytes).unwrap(), "f").unwrap();
        assert_eq!(back, rows);
    }
}
