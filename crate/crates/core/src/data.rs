//! JSONL corpora and prediction records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

/// Corpus line: `{"id": str, "text": str, "path": [level-1 name, ..., level-D name]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub path: Vec<String>,
}

/// Prediction line: `{"id": str, "pred": [names], "gold": [names]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: Vec<String>,
    pub gold: Vec<String>,
}

/// A corpus record with its gold path resolved to label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub path: Vec<LabelId>,
}

impl Example {
    pub fn resolve(record: &CorpusRecord, tax: &Taxonomy) -> Result<Self> {
        let path = tax.resolve_path(&record.path).map_err(|e| {
            Error::Validation(format!("example {:?}: {e}", record.id))
        })?;
        Ok(Example {
            id: record.id.clone(),
            text: record.text.clone(),
            path,
        })
    }

    pub fn to_record(&self, tax: &Taxonomy) -> CorpusRecord {
        CorpusRecord {
            id: self.id.clone(),
            text: self.text.clone(),
            path: tax.path_names(&self.path),
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_examples(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Vec<Example>> {
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    let examples = records
        .iter()
        .map(|r| Example::resolve(r, tax))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = examples.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(Error::Validation(format!("duplicate example id {:?}", dup.id)));
    }
    Ok(examples)
}

pub fn save_examples(path: impl AsRef<Path>, examples: &[Example], tax: &Taxonomy) -> Result<()> {
    let records: Vec<CorpusRecord> = examples.iter().map(|e| e.to_record(tax)).collect();
    write_jsonl(path, &records)
}
