//! Line-oriented JSON input shared by the fleet, test bank and oracle files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Parses one record per non-blank line. Line numbers in errors are 1-based.
pub fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>, JsonlError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|source| JsonlError::Parse { line: idx + 1, source })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, JsonlError> {
    let text = read_to_string(path)?;
    parse_lines(&text)
}

pub fn read_to_string(path: &Path) -> Result<String, JsonlError> {
    fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_blank_lines_and_reports_real_line_numbers() {
        let text = "1\n\n2\nnope\n";
        let err = parse_lines::<u32>(text).unwrap_err();
        match err {
            JsonlError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
        let ok = parse_lines::<u32>("1\n\n2\n").unwrap();
        assert_eq!(ok, vec![(1, 1), (3, 2)]);
    }
}
