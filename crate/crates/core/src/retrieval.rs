//! Similarity search over the memory bank.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ufl_autodiff::Real;

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::knn::top_k;

/// A retrieved bank instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id: u64,
    pub similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chip_path: Option<PathBuf>,
}

/// The `k` bank instances most similar to `v` by cosine, best first; ties
/// go to the smaller row index.
pub fn nearest_instances(bank: &MemoryBank, v: &[Real], k: usize) -> Result<Vec<Match>> {
    Ok(top_k(bank, v, k)?
        .into_iter()
        .map(|nb| Match {
            id: bank.ids()[nb.index],
            similarity: nb.similarity,
            chip_path: None,
        })
        .collect())
}

/// One line of a retrieval manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub query_path: Option<PathBuf>,
    pub matches: Vec<Match>,
}

/// Writes one JSON object per line.
pub fn write_manifest(path: &Path, records: &[RetrievalRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
