//! Exact nearest-neighbour search over pre-embedded utterances.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingVector;

pub type UtteranceId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub utterance_id: UtteranceId,
    pub service_name: String,
    pub procedure_name: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate utterance id {0}")]
    DuplicateId(UtteranceId),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceIndex {
    dimension: usize,
    entries: Vec<IndexEntry>,
}

impl UtteranceIndex {
    pub fn new(dimension: usize) -> Self {
        UtteranceIndex {
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        if entry.vector.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                actual: entry.vector.dimension(),
            });
        }
        if self.entries.iter().any(|e| e.utterance_id == entry.utterance_id) {
            return Err(IndexError::DuplicateId(entry.utterance_id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, id: UtteranceId) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.utterance_id == id)
    }

    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(UtteranceId, f64)>, IndexError> {
        self.knn_filtered(query, k, |_| true)
    }

    /// Brute-force cosine scan over the entries accepted by `keep`.
    /// Descending score, ties broken by ascending utterance id.
    pub fn knn_filtered<F>(&self, query: &EmbeddingVector, k: usize, keep: F) -> Result<Vec<(UtteranceId, f64)>, IndexError>
    where
        F: Fn(&IndexEntry) -> bool,
    {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                actual: query.dimension(),
            });
        }
        let mut scored: Vec<(UtteranceId, f64)> = self
            .entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| (e.utterance_id, query.cosine(&e.vector)))
            .collect();
        scored.sort_by(rank_order);
        scored.truncate(k);
        Ok(scored)
    }
}

/// Descending by score, then ascending by id.
pub fn rank_order(a: &(UtteranceId, f64), b: &(UtteranceId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Embedder;
    use alloc::format;
    use alloc::vec;

    fn entry(id: UtteranceId, v: EmbeddingVector) -> IndexEntry {
        IndexEntry {
            utterance_id: id,
            service_name: format!("s{id}"),
            procedure_name: "p".into(),
            vector: v,
        }
    }

    #[test]
    fn singleton_index_returns_its_entry() {
        let e = Embedder::new(8);
        let mut idx = UtteranceIndex::new(8);
        idx.insert(entry(7, e.embed("hello world"))).unwrap();
        let hits = idx.knn(&e.embed("something else entirely"), 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 7);
    }

    #[test]
    fn truncates_to_index_size() {
        let e = Embedder::default();
        let mut idx = UtteranceIndex::new(256);
        for (i, t) in ["a b", "c d", "e f"].iter().enumerate() {
            idx.insert(entry(i as u32, e.embed(t))).unwrap();
        }
        assert_eq!(idx.knn(&e.embed("a"), 10).unwrap().len(), 3);
    }

    #[test]
    fn exact_match_ranks_first_with_unit_score() {
        let e = Embedder::default();
        let texts = ["add numbers together", "multiply numbers", "weather in paris", "subtract numbers"];
        let mut idx = UtteranceIndex::new(256);
        for (i, t) in texts.iter().enumerate() {
            idx.insert(entry(i as u32, e.embed(t))).unwrap();
        }
        let hits = idx.knn(&e.embed("weather in paris"), 4).unwrap();
        assert_eq!(hits[0].0, 2);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!(hits[1..].iter().all(|h| h.1 < 1.0 - 1e-9));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let e = Embedder::default();
        let mut idx = UtteranceIndex::new(256);
        idx.insert(entry(5, e.embed("same text"))).unwrap();
        idx.insert(entry(2, e.embed("same text"))).unwrap();
        let hits = idx.knn(&e.embed("same text"), 2).unwrap();
        assert_eq!(vec![hits[0].0, hits[1].0], vec![2, 5]);
    }

    #[test]
    fn errors() {
        let mut idx = UtteranceIndex::new(4);
        assert!(idx.knn(&EmbeddingVector::zero(4), 1).unwrap().is_empty());
        assert_eq!(
            idx.knn(&EmbeddingVector::zero(3), 1),
            Err(IndexError::DimensionMismatch { expected: 4, actual: 3 })
        );
        assert_eq!(idx.knn(&EmbeddingVector::zero(4), 0), Err(IndexError::ZeroK));
        idx.insert(entry(1, EmbeddingVector::zero(4))).unwrap();
        assert_eq!(idx.insert(entry(1, EmbeddingVector::zero(4))), Err(IndexError::DuplicateId(1)));
    }
}
