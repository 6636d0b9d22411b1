use std::collections::HashSet;
use std::hash::Hash;

use super::RetrievalError;

/// `(1/R) * sum of precision@r over the ranks r of relevant items`; relevant
/// items missing from the ranking contribute zero.
pub fn average_precision<T: Eq + Hash>(
    ranking: &[T],
    relevant: &HashSet<T>,
) -> Result<f64, RetrievalError> {
    truncated_ap(ranking, relevant, usize::MAX)
}

/// AP over the first `k` ranks, normalized by `min(R, k)`.
pub fn average_precision_at<T: Eq + Hash>(
    ranking: &[T],
    relevant: &HashSet<T>,
    k: usize,
) -> Result<f64, RetrievalError> {
    truncated_ap(ranking, relevant, k)
}

fn truncated_ap<T: Eq + Hash>(
    ranking: &[T],
    relevant: &HashSet<T>,
    k: usize,
) -> Result<f64, RetrievalError> {
    if relevant.is_empty() || k == 0 {
        return Err(RetrievalError::EmptyRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

/// One query's ranking and its relevant set.
#[derive(Debug, Clone)]
pub struct QueryResult<T> {
    pub ranking: Vec<T>,
    pub relevant: HashSet<T>,
}

pub fn mean_ap<T: Eq + Hash>(queries: &[QueryResult<T>]) -> Result<f64, RetrievalError> {
    map_at_k(queries, usize::MAX)
}

pub fn map_at_k<T: Eq + Hash>(queries: &[QueryResult<T>], k: usize) -> Result<f64, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::NoQueries);
    }
    let mut sum = 0.0;
    for q in queries {
        sum += truncated_ap(&q.ranking, &q.relevant, k)?;
    }
    Ok(sum / queries.len() as f64)
}

/// Top-1 prediction of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub confidence: f64,
    pub correct: bool,
    /// Whether the query has a ground-truth class at all.
    pub has_label: bool,
}

/// Global average precision over all queries' top-1 predictions: rank by
/// confidence (descending, stable), sum precision at each correct prediction,
/// divide by the number of labelled queries.
pub fn micro_ap_at_1(predictions: &[Prediction]) -> Result<f64, RetrievalError> {
    let labelled = predictions.iter().filter(|p| p.has_label).count();
    if labelled == 0 {
        return Err(RetrievalError::EmptyRelevant);
    }
    let mut order: Vec<&Prediction> = predictions.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut correct = 0usize;
    let mut sum = 0.0;
    for (i, p) in order.iter().enumerate() {
        if p.correct && p.has_label {
            correct += 1;
            sum += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / labelled as f64)
}

/// An image pair scored by geometric verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub inliers: usize,
    pub positive: bool,
}

/// AP of positive pairs when all pairs are ranked by inlier count. Ties are
/// ordered pessimistically (negatives first), so tied scores never help.
pub fn pair_average_precision(pairs: &[ScoredPair]) -> Result<f64, RetrievalError> {
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.inliers.cmp(&a.inliers).then(a.positive.cmp(&b.positive)));
    let ranking: Vec<usize> = (0..order.len()).collect();
    let relevant: HashSet<usize> = order
        .iter()
        .enumerate()
        .filter(|(_, p)| p.positive)
        .map(|(i, _)| i)
        .collect();
    average_precision(&ranking, &relevant)
}
