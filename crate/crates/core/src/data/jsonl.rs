//! One dialogue per line: `{"persona": [..], "context": [..], "response": ".."}`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::synthetic::records_to_dataset;
use super::{Dataset, Split, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub persona: Vec<String>,
    pub context: Vec<String>,
    pub response: String,
}

fn string_array(obj: &serde_json::Map<String, Value>, key: &str, line: usize) -> Result<Vec<String>> {
    let schema = |msg: String| Error::Schema { line, msg };
    let v = obj.get(key).ok_or_else(|| schema(format!("missing field `{key}`")))?;
    let arr = v.as_array().ok_or_else(|| schema(format!("`{key}` must be an array of strings")))?;
    if arr.is_empty() {
        return Err(schema(format!("`{key}` must not be empty")));
    }
    arr.iter()
        .map(|s| s.as_str().map(str::to_string).ok_or_else(|| schema(format!("`{key}` must be an array of strings"))))
        .collect()
}

fn parse_line(text: &str, line: usize) -> Result<DialogueRecord> {
    let schema = |msg: String| Error::Schema { line, msg };
    let value: Value = serde_json::from_str(text).map_err(|e| schema(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| schema("expected a JSON object".into()))?;
    let persona = string_array(obj, "persona", line)?;
    let context = string_array(obj, "context", line)?;
    let response = obj
        .get("response")
        .ok_or_else(|| schema("missing field `response`".into()))?
        .as_str()
        .ok_or_else(|| schema("`response` must be a string".into()))?;
    if response.trim().is_empty() {
        return Err(schema("`response` must not be empty".into()));
    }
    if let Some(extra) = obj.keys().find(|k| !["persona", "context", "response"].contains(&k.as_str())) {
        return Err(schema(format!("unknown field `{extra}`")));
    }
    Ok(DialogueRecord {
        persona,
        context,
        response: response.to_string(),
    })
}

/// Reads text-level records; blank lines are skipped but still counted.
pub fn read_records(path: &Path) -> Result<Vec<DialogueRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn write_records(records: &[DialogueRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path, vocab: &Vocabulary, split: Split) -> Result<Dataset> {
    records_to_dataset(&read_records(path)?, vocab, split)
}

/// Writes normalized text (tokens joined by single spaces).
pub fn save_jsonl(dataset: &Dataset, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let records: Vec<DialogueRecord> = dataset
        .samples
        .iter()
        .map(|s| DialogueRecord {
            persona: s.persona.sentences().iter().map(|p| vocab.decode_text(p)).collect(),
            context: s.context.iter().map(|u| vocab.decode_text(u)).collect(),
            response: vocab.decode_text(&s.response),
        })
        .collect();
    write_records(&records, path)
}
