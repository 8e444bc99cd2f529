use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub asm_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("corpus line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read one JSON object per line. Blank lines are skipped; ids must be unique.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Json {
                line: idx + 1,
                source,
            }
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: idx + 1,
                id: record.id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    for record in records {
        let line = serde_json::to_string(record).map_err(|source| CorpusError::Json {
            line: 0,
            source,
        })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_round_trip() {
        let records = vec![
            CorpusRecord {
                id: "a".into(),
                name: "f".into(),
                asm_text: "0x0: ret".into(),
                explanation: Some("returns".into()),
                labels: Some(vec!["trivial".into()]),
                group: Some("g0".into()),
            },
            CorpusRecord {
                id: "b".into(),
                name: String::new(),
                asm_text: "0x0: nop".into(),
                explanation: None,
                labels: None,
                group: None,
            },
        ];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.lines().nth(1).unwrap().contains("explanation"));
        assert_eq!(read_corpus(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn bad_json_and_duplicates() {
        let err = read_corpus("{\"id\":\"a\",\"asm_text\":\"x\"}\nnot json".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::Json { line: 2, .. }));
        let err = read_corpus(
            "{\"id\":\"a\",\"asm_text\":\"x\"}\n\n{\"id\":\"a\",\"asm_text\":\"y\"}".as_bytes(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 3, .. }));
    }
}
