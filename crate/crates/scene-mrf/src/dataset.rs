//! Dataset files: one JSON record per line, plus a vocabulary sidecar.
//!
//! Records serialize with fixed field order, so writing the same items
//! always produces byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::graph::Vocabulary;
use crate::world::GroundingItem;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("malformed vocabulary file: {0}")]
    BadVocab(serde_json::Error),
}

type Result<T> = std::result::Result<T, DatasetError>;

/// Sidecar path convention: `items.jsonl` -> `items.vocab.json`.
pub fn vocab_path_for(data_path: &Path) -> PathBuf {
    data_path.with_extension("vocab.json")
}

pub fn write_items(path: &Path, items: &[GroundingItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).expect("items always serialize");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_items(path: &Path) -> Result<Vec<GroundingItem>> {
    let r = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| DatasetError::BadRecord {
            line: i + 1,
            source,
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let text = serde_json::to_string_pretty(vocab).expect("vocab always serializes");
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(DatasetError::BadVocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, make_item, WorldConfig};

    fn sample_items(n: usize) -> Vec<GroundingItem> {
        let cfg = WorldConfig::default();
        let mut out = Vec::new();
        let mut seed = 0u64;
        while out.len() < n {
            let s = generate_scene(&cfg, seed).unwrap();
            if let Ok(item) = make_item(&s, &cfg, 2, 1, false, seed) {
                out.push(item);
            }
            seed += 1;
        }
        out
    }

    #[test]
    fn items_round_trip_and_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let items = sample_items(5);
        write_items(&path, &items).unwrap();
        let back = read_items(&path).unwrap();
        assert_eq!(items, back);

        let bytes1 = std::fs::read(&path).unwrap();
        write_items(&path, &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(bytes1.iter().filter(|&&b| b == b'\n').count(), 5);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let items = sample_items(2);
        write_items(&path, &items).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        match read_items(&path) {
            Err(DatasetError::BadRecord { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected BadRecord, got {other:?}"),
        }
    }

    #[test]
    fn vocab_round_trip_and_sidecar_path() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("train.jsonl");
        let vpath = vocab_path_for(&data);
        assert_eq!(vpath.file_name().unwrap(), "train.vocab.json");
        let vocab = WorldConfig::default().vocabulary();
        write_vocab(&vpath, &vocab).unwrap();
        let back = read_vocab(&vpath).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn empty_file_reads_as_no_items() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_items(&path).unwrap().is_empty());
    }
}
