//! Held-out synthetic retrieval benchmark: glyph classes unseen in training,
//! a few query views per class and a database of further views. Views shift
//! further than in training, so many show only part of their pattern.

use std::borrow::Cow;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::extractor::{self, ExtractError, ExtractionConfig, ImageFeatures};
use crate::matcher::{match_features, MatchConfig, MatchError, MatchMode};
use crate::model::Model;
use crate::retrieval::{
    self, global_search, mean_ap, pair_average_precision, IndexEntry, QueryResult,
    RankedEntry, RetrievalError, RetrievalIndex, ScoredPair, SHORTLIST,
};
use crate::trainer::synth::{derive_seed, generate_dataset, Sample, SynthError, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    /// Per-class views; `images_per_class` covers queries and database.
    pub synth: SynthSpec,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            synth: SynthSpec {
                num_classes: 16,
                images_per_class: 8,
                translation: 0.2,
                ..SynthSpec::default()
            },
            queries_per_class: 2,
            seed: 0xBE7C_4A11,
        }
    }
}

/// Attention percentile of the training sample used as extraction threshold.
pub const TAU_PERCENTILE: f64 = 75.0;
/// RANSAC residual threshold in pixels for 64-pixel benchmark images.
pub const RESIDUAL_THRESHOLD: f64 = 4.0;
/// Hamming-path distance threshold; with 16-bit codes it admits one differing bit.
pub const BINARY_DISTANCE_THRESHOLD: f64 = 0.6;

/// Float re-ranking: ratio test with the benchmark residual threshold.
pub fn float_match_config() -> MatchConfig {
    MatchConfig {
        residual_threshold: RESIDUAL_THRESHOLD,
        ..MatchConfig::default()
    }
}

/// Binarized re-ranking: Hamming distance threshold.
pub fn binary_match_config() -> MatchConfig {
    MatchConfig {
        mode: MatchMode::Distance,
        distance_threshold: BINARY_DISTANCE_THRESHOLD,
        residual_threshold: RESIDUAL_THRESHOLD,
        ..MatchConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub queries: Vec<Sample>,
    pub database: Vec<Sample>,
}

pub fn build(spec: &BenchmarkSpec) -> Result<Benchmark, SynthError> {
    if spec.queries_per_class == 0 || spec.queries_per_class >= spec.synth.images_per_class {
        return Err(SynthError::Degenerate(
            "need at least one query and one database image per class".into(),
        ));
    }
    let data = generate_dataset(&spec.synth, spec.seed)?;
    let mut per_class: Vec<Vec<Sample>> = vec![Vec::new(); data.num_classes];
    for s in data.all() {
        per_class[s.label].push(s.clone());
    }
    let mut bench = Benchmark {
        queries: Vec::new(),
        database: Vec::new(),
    };
    for class in per_class {
        let (q, d) = class.split_at(spec.queries_per_class);
        bench.queries.extend_from_slice(q);
        bench.database.extend_from_slice(d);
    }
    Ok(bench)
}

impl Benchmark {
    pub fn relevant(&self, query: usize) -> HashSet<usize> {
        let label = self.queries[query].label;
        (0..self.database.len())
            .filter(|&i| self.database[i].label == label)
            .collect()
    }
}

/// Features of every benchmark image under one model and extraction config.
#[derive(Debug, Clone)]
pub struct ExtractedBenchmark {
    pub queries: Vec<ImageFeatures>,
    pub database: Vec<ImageFeatures>,
}

pub fn extract(
    bench: &Benchmark,
    model: &Model,
    config: &ExtractionConfig,
) -> Result<ExtractedBenchmark, ExtractError> {
    let run = |samples: &[Sample]| {
        samples
            .iter()
            .map(|s| extractor::extract(&s.image, model, config))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(ExtractedBenchmark {
        queries: run(&bench.queries)?,
        database: run(&bench.database)?,
    })
}

impl ExtractedBenchmark {
    pub fn index(&self, bench: &Benchmark) -> Result<RetrievalIndex, RetrievalError> {
        RetrievalIndex::new(
            self.database
                .iter()
                .zip(&bench.database)
                .enumerate()
                .map(|(i, (f, s))| IndexEntry {
                    id: format!("db{i:05}"),
                    global: f.global.clone(),
                    features: None,
                    label: Some(s.label),
                })
                .collect(),
        )
    }

    /// Sign-binarized local descriptors, identical global descriptors.
    pub fn binarized(&self) -> Self {
        let bin = |v: &[ImageFeatures]| {
            v.iter()
                .map(|f| ImageFeatures {
                    global: f.global.clone(),
                    local: f.local.binarized(),
                })
                .collect()
        };
        Self {
            queries: bin(&self.queries),
            database: bin(&self.database),
        }
    }

    /// Per-query final rankings: global search over the whole database,
    /// optionally re-ranking the shortlist with `rerank`.
    pub fn rankings(
        &self,
        bench: &Benchmark,
        rerank: Option<&MatchConfig>,
    ) -> Result<Vec<Vec<RankedEntry>>, RetrievalError> {
        let index = self.index(bench)?;
        self.queries
            .iter()
            .map(|q| {
                let hits = global_search(&q.global, &index, index.len())?;
                match rerank {
                    None => Ok(hits.into_iter().map(RankedEntry::from).collect()),
                    Some(config) => retrieval::rerank(&q.local, &hits, SHORTLIST, config, |i| {
                        Some(Cow::Borrowed(&self.database[i].local))
                    }),
                }
            })
            .collect()
    }

    /// mAP over all queries with same-class database images as relevant.
    pub fn mean_ap(
        &self,
        bench: &Benchmark,
        rerank: Option<&MatchConfig>,
    ) -> Result<f64, RetrievalError> {
        let queries: Vec<QueryResult<usize>> = self
            .rankings(bench, rerank)?
            .into_iter()
            .enumerate()
            .map(|(q, ranked)| QueryResult {
                ranking: ranked.iter().map(|r| r.index).collect(),
                relevant: bench.relevant(q),
            })
            .collect();
        mean_ap(&queries)
    }
}

/// `(i, j, positive)` image pairs over the concatenation queries ++ database:
/// `positives` same-class pairs and `positives * negatives_per_positive`
/// different-class pairs, drawn without replacement.
pub fn sample_pairs(
    bench: &Benchmark,
    positives: usize,
    negatives_per_positive: usize,
    seed: u64,
) -> Vec<(usize, usize, bool)> {
    let labels: Vec<usize> = bench
        .queries
        .iter()
        .chain(&bench.database)
        .map(|s| s.label)
        .collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                pos.push((i, j, true));
            } else {
                neg.push((i, j, false));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9A12, 0));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(positives);
    neg.truncate(positives * negatives_per_positive);
    pos.extend(neg);
    pos.shuffle(&mut rng);
    pos
}

impl ExtractedBenchmark {
    fn image(&self, i: usize) -> &ImageFeatures {
        if i < self.queries.len() {
            &self.queries[i]
        } else {
            &self.database[i - self.queries.len()]
        }
    }

    /// Geometric verification of every pair, scored by inlier count.
    pub fn score_pairs(
        &self,
        pairs: &[(usize, usize, bool)],
        config: &MatchConfig,
    ) -> Result<Vec<ScoredPair>, MatchError> {
        pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j, positive))| {
                let pair_config = MatchConfig {
                    rng_seed: derive_seed(config.rng_seed, n as u64, 1),
                    ..config.clone()
                };
                let result = match_features(&self.image(i).local, &self.image(j).local, &pair_config)?;
                Ok(ScoredPair {
                    inliers: result.inliers,
                    positive,
                })
            })
            .collect()
    }

    pub fn pair_ap(
        &self,
        pairs: &[(usize, usize, bool)],
        config: &MatchConfig,
    ) -> Result<f64, RetrievalError> {
        pair_average_precision(&self.score_pairs(pairs, config)?)
    }
}
