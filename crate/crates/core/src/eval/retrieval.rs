//! Memory bank and exact nearest-neighbor retrieval.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{check_unit_rows, UNIT_NORM_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    embeddings: Array2<f64>,
    ids: Vec<String>,
}

impl MemoryBank {
    pub fn new(embeddings: Array2<f64>, ids: Vec<String>) -> Result<Self> {
        if embeddings.nrows() != ids.len() {
            return Err(Error::Dimension(format!(
                "{} embeddings but {} ids",
                embeddings.nrows(),
                ids.len()
            )));
        }
        check_unit_rows(embeddings.view())?;
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Parameter(format!("duplicate bank id {dup}")));
        }
        Ok(Self { embeddings, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// One query and its neighbors, as written to the retrieval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub neighbors: Vec<String>,
    pub distances: Vec<f64>,
}

/// The `k` bank entries closest to `query` in Euclidean distance, nearest
/// first; equal distances are ordered by id.
pub fn knn_retrieve(bank: &MemoryBank, query: ArrayView1<f64>, k: usize) -> Result<Vec<Neighbor>> {
    if k > bank.len() {
        return Err(Error::Capacity(format!(
            "requested {k} neighbors from a bank of {}",
            bank.len()
        )));
    }
    if query.len() != bank.embeddings.ncols() {
        return Err(Error::Dimension(format!(
            "query has dimension {}, bank has {}",
            query.len(),
            bank.embeddings.ncols()
        )));
    }
    let norm = query.dot(&query).sqrt();
    if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
        return Err(Error::Parameter(format!("query has norm {norm}, expected unit norm")));
    }
    let mut all: Vec<(f64, &str)> = bank
        .embeddings
        .outer_iter()
        .zip(&bank.ids)
        .map(|(row, id)| {
            let d = row
                .iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (d, id.as_str())
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(all
        .into_iter()
        .take(k)
        .map(|(distance, id)| Neighbor {
            id: id.to_string(),
            distance,
        })
        .collect())
}

/// Retrieves `k` neighbors for every row of `queries`.
pub fn retrieve_all(
    bank: &MemoryBank,
    queries: &Array2<f64>,
    query_ids: &[String],
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    queries
        .outer_iter()
        .zip(query_ids)
        .map(|(q, id)| {
            let hits = knn_retrieve(bank, q, k)?;
            Ok(RetrievalResult {
                query_id: id.clone(),
                distances: hits.iter().map(|h| h.distance).collect(),
                neighbors: hits.into_iter().map(|h| h.id).collect(),
            })
        })
        .collect()
}
