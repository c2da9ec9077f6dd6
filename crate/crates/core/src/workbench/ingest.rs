use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{input_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// One `{"text": ...}` or `{"tokens": [...]}` object per line.
    Jsonl,
    /// One document per non-empty line.
    PlainText,
}

/// How text becomes token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// UTF-8 bytes, ids 0..256.
    Byte,
    /// Whitespace-separated words, ids assigned in order of first appearance.
    Whitespace { vocab: BTreeMap<String, u32> },
}

impl Tokenizer {
    pub fn whitespace() -> Self {
        Tokenizer::Whitespace { vocab: BTreeMap::new() }
    }

    fn encode(&mut self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
            Tokenizer::Whitespace { vocab } => text
                .split_whitespace()
                .map(|w| {
                    let next = vocab.len() as u32;
                    *vocab.entry(w.to_string()).or_insert(next)
                })
                .collect(),
        }
    }

    /// Inverse of byte tokenization; words joined by single spaces otherwise.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Byte => {
                let bytes = ids
                    .iter()
                    .map(|&i| u8::try_from(i).map_err(|_| input_err!("byte id {i} out of range")))
                    .collect::<Result<Vec<u8>>>()?;
                String::from_utf8(bytes).map_err(|e| input_err!("invalid UTF-8: {e}"))
            }
            Tokenizer::Whitespace { vocab } => {
                let inverse: BTreeMap<u32, &str> = vocab.iter().map(|(w, &i)| (i, w.as_str())).collect();
                let words = ids
                    .iter()
                    .map(|i| inverse.get(i).copied().ok_or_else(|| input_err!("unknown word id {i}")))
                    .collect::<Result<Vec<&str>>>()?;
                Ok(words.join(" "))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: Option<String>,
    tokens: Option<Vec<u32>>,
}

/// Reads documents from `r`. Fails if any id reaches `vocab_size`.
pub fn ingest_reader<R: BufRead>(
    r: R,
    format: InputFormat,
    tokenizer: &mut Tokenizer,
    task_label: &str,
    vocab_size: usize,
) -> Result<Corpus> {
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| input_err!("line {n}: {e}"))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            InputFormat::PlainText => tokenizer.encode(&line),
            InputFormat::Jsonl => {
                let rec: Record = serde_json::from_str(&line).map_err(|e| input_err!("line {n}: {e}"))?;
                match (rec.text, rec.tokens) {
                    (Some(t), None) => tokenizer.encode(&t),
                    (None, Some(ids)) => ids,
                    _ => return Err(input_err!("line {n}: expected exactly one of `text` or `tokens`")),
                }
            }
        };
        if doc.is_empty() {
            return Err(input_err!("line {n}: document has no tokens"));
        }
        if let Some(&bad) = doc.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(input_err!("line {n}: token id {bad} exceeds vocab_size {vocab_size}"));
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(input_err!("no documents in input"));
    }
    Corpus::new(task_label, vocab_size, docs)
}

pub fn ingest(
    path: impl AsRef<Path>,
    format: InputFormat,
    tokenizer: &mut Tokenizer,
    task_label: &str,
    vocab_size: usize,
) -> Result<Corpus> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f), format, tokenizer, task_label, vocab_size)
        .map_err(|e| input_err!("{}: {e}", path.display()))
}
