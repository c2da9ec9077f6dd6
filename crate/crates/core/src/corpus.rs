use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// Tokenized documents of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub task_label: String,
    pub vocab_size: usize,
    documents: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn new(task_label: impl Into<String>, vocab_size: usize, documents: Vec<Vec<u32>>) -> Result<Self> {
        let task_label = task_label.into();
        if documents.is_empty() {
            return Err(input_err!("corpus `{task_label}` has no documents"));
        }
        for (i, d) in documents.iter().enumerate() {
            if d.is_empty() {
                return Err(input_err!("corpus `{task_label}` document {i} is empty"));
            }
            if let Some(&bad) = d.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(input_err!(
                    "corpus `{task_label}` document {i}: token {bad} >= vocab_size {vocab_size}"
                ));
            }
        }
        Ok(Corpus {
            task_label,
            vocab_size,
            documents,
        })
    }

    pub fn documents(&self) -> &[Vec<u32>] {
        &self.documents
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.documents.iter().flatten().copied()
    }

    /// Concatenates the documents and cuts non-overlapping windows of `len`
    /// tokens; a trailing partial window is dropped.
    pub fn windows(&self, len: usize) -> Vec<Vec<usize>> {
        let all: Vec<usize> = self.tokens().map(|t| t as usize).collect();
        all.chunks_exact(len.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Splits documents alternately into two corpora (even / odd index).
    pub fn split_half(&self) -> Result<(Corpus, Corpus)> {
        let (a, b): (Vec<_>, Vec<_>) = self
            .documents
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % 2 == 0);
        let strip = |v: Vec<(usize, Vec<u32>)>| v.into_iter().map(|(_, d)| d).collect();
        Ok((
            Corpus::new(self.task_label.clone(), self.vocab_size, strip(a))?,
            Corpus::new(self.task_label.clone(), self.vocab_size, strip(b))?,
        ))
    }

    /// One `{"tokens": [...]}` object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut w, &TokenLine { tokens: d.clone() })?;
            w.write_all(b"\n").map_err(|e| Error::io("corpus", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    /// Reads token-id documents. Text records are handled by the ingest path.
    pub fn read_jsonl<R: BufRead>(r: R, task_label: &str, vocab_size: usize) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(task_label, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TokenLine =
                serde_json::from_str(&line).map_err(|e| input_err!("line {}: {e}", i + 1))?;
            docs.push(rec.tokens);
        }
        Corpus::new(task_label, vocab_size, docs)
    }

    pub fn load(path: impl AsRef<Path>, task_label: &str, vocab_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f), task_label, vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_ids_and_emptiness() {
        assert!(Corpus::new("t", 4, vec![]).is_err());
        assert!(Corpus::new("t", 4, vec![vec![]]).is_err());
        assert!(Corpus::new("t", 4, vec![vec![4]]).is_err());
        assert!(Corpus::new("t", 4, vec![vec![3, 0]]).is_ok());
    }

    #[test]
    fn windows_drop_remainder() {
        let c = Corpus::new("t", 10, vec![vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert_eq!(c.windows(2), vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = Corpus::new("t", 10, vec![vec![1, 2, 3], vec![9]]).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        assert_eq!(Corpus::read_jsonl(buf.as_slice(), "t", 10).unwrap(), c);
    }
}
