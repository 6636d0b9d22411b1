//! Two-stage retrieval (exhaustive global search, then RANSAC re-ranking of a
//! shortlist), recognition by score aggregation, and evaluation metrics.

pub mod io;
pub mod metrics;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use thiserror::Error;

use crate::extractor::LocalFeatures;
use crate::matcher::{match_features, MatchConfig, MatchError};
use crate::trainer::synth::derive_seed;

pub use metrics::{
    average_precision, average_precision_at, map_at_k, mean_ap, micro_ap_at_1,
    pair_average_precision, Prediction, QueryResult, ScoredPair,
};

/// Number of global-search candidates re-ranked by local matching.
pub const SHORTLIST: usize = 100;
/// Inlier count at which the local part of the recognition score saturates.
pub const INLIER_CAP: usize = 70;
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("the index is empty")]
    EmptyIndex,
    #[error("duplicate index id `{0}`")]
    DuplicateId(String),
    #[error("descriptor dimension {got} does not match the index ({expected})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("descriptor of `{0}` is not unit-norm")]
    NotUnitNorm(String),
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub global: Vec<f32>,
    /// Feature file holding the entry's local features, when stored on disk.
    pub features: Option<PathBuf>,
    pub label: Option<usize>,
}

/// Immutable database of unit-norm global descriptors with unique ids.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self, RetrievalError> {
        let dim = entries.first().ok_or(RetrievalError::EmptyIndex)?.global.len();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
            if e.global.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: e.global.len(),
                });
            }
            if (norm(&e.global) - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(RetrievalError::NotUnitNorm(e.id.clone()));
            }
        }
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &IndexEntry {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// A database entry (by position in the index) with its global similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub index: usize,
    pub similarity: f64,
}

/// Exhaustive cosine search returning the top `k` entries, ties broken by id.
pub fn global_search(
    query: &[f32],
    index: &RetrievalIndex,
    k: usize,
) -> Result<Vec<SearchHit>, RetrievalError> {
    if query.len() != index.dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim,
            got: query.len(),
        });
    }
    let mut hits: Vec<SearchHit> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| SearchHit {
            index: i,
            similarity: cosine(query, &e.global),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| index.entries[a.index].id.cmp(&index.entries[b.index].id))
    });
    hits.truncate(k);
    Ok(hits)
}

/// One row of a final ranking; `inliers` is `None` for entries that were not
/// geometrically verified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub index: usize,
    pub similarity: f64,
    pub inliers: Option<usize>,
}

impl From<SearchHit> for RankedEntry {
    fn from(h: SearchHit) -> Self {
        Self {
            index: h.index,
            similarity: h.similarity,
            inliers: None,
        }
    }
}

/// Re-ranks the first `shortlist` entries of a global ranking by inlier count
/// (then global similarity). Entries whose local features are unavailable keep
/// their global order at the end of the shortlist block; entries past the
/// shortlist keep their global order after it.
pub fn rerank<'a, F>(
    query: &LocalFeatures,
    ranking: &[SearchHit],
    shortlist: usize,
    config: &MatchConfig,
    mut features_of: F,
) -> Result<Vec<RankedEntry>, RetrievalError>
where
    F: FnMut(usize) -> Option<Cow<'a, LocalFeatures>>,
{
    let cut = shortlist.min(ranking.len());
    let mut verified = Vec::with_capacity(cut);
    let mut skipped = Vec::new();
    for hit in &ranking[..cut] {
        let Some(candidate) = features_of(hit.index) else {
            log::warn!("no local features for index entry {}; keeping its global rank", hit.index);
            skipped.push(RankedEntry::from(*hit));
            continue;
        };
        let pair_config = MatchConfig {
            rng_seed: derive_seed(config.rng_seed, hit.index as u64, 0),
            ..config.clone()
        };
        let result = match_features(query, &candidate, &pair_config)?;
        verified.push(RankedEntry {
            index: hit.index,
            similarity: hit.similarity,
            inliers: Some(result.inliers),
        });
    }
    verified.sort_by(|a, b| {
        b.inliers
            .cmp(&a.inliers)
            .then(b.similarity.total_cmp(&a.similarity))
    });
    verified.extend(skipped);
    verified.extend(ranking[cut..].iter().map(|&h| RankedEntry::from(h)));
    Ok(verified)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionConfig {
    pub alpha: f64,
    /// Number of top-ranked database images whose scores are aggregated.
    pub top_k: usize,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            top_k: 10,
        }
    }
}

/// `min(i, 70)/70 + alpha * c`.
pub fn image_score(inliers: usize, similarity: f64, alpha: f64) -> f64 {
    inliers.min(INLIER_CAP) as f64 / INLIER_CAP as f64 + alpha * similarity
}

/// Sums per-image scores of the top `top_k` labelled entries by class and
/// returns the winning class with its summed score (ties go to the lower class).
pub fn recognize(
    ranked: &[RankedEntry],
    index: &RetrievalIndex,
    config: &RecognitionConfig,
) -> Result<Option<(usize, f64)>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let mut per_class: BTreeMap<usize, f64> = BTreeMap::new();
    for r in ranked.iter().take(config.top_k) {
        if let Some(label) = index.entry(r.index).label {
            *per_class.entry(label).or_default() +=
                image_score(r.inliers.unwrap_or(0), r.similarity, config.alpha);
        }
    }
    Ok(per_class
        .into_iter()
        .fold(None, |best: Option<(usize, f64)>, (class, score)| match best {
            Some((_, s)) if s >= score => best,
            _ => Some((class, score)),
        }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recognition_score_examples() {
        assert!((image_score(70, 1.0, 0.25) - 1.25).abs() < 1e-15);
        assert_eq!(image_score(140, 1.0, 0.25), image_score(70, 1.0, 0.25));
        assert!((image_score(35, 0.8, 0.25) - 0.7).abs() < 1e-15);
    }
}
