use std::borrow::Cow;
use std::collections::HashSet;

use delg::extractor::{Descriptors, Keypoint, LocalFeatures};
use delg::matcher::MatchConfig;
use delg::retrieval::io::{
    read_groundtruth, read_manifest, read_pairs, read_predictions, read_results, read_rows,
    write_groundtruth, write_manifest, write_pairs, write_predictions, write_results,
    ManifestEntry, PairRow, PredictionRow, ResultRow, MANIFEST_HEADER,
};
use delg::retrieval::{
    average_precision, average_precision_at, cosine, global_search, image_score, map_at_k,
    mean_ap, micro_ap_at_1, pair_average_precision, recognize, rerank, IndexEntry, Prediction,
    QueryResult, RankedEntry, RecognitionConfig, RetrievalError, RetrievalIndex, ScoredPair,
    SearchHit, INLIER_CAP, SHORTLIST,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

fn entry(id: &str, global: Vec<f32>, label: Option<usize>) -> IndexEntry {
    IndexEntry {
        id: id.into(),
        global,
        features: None,
        label,
    }
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> RetrievalIndex {
    RetrievalIndex::new(
        (0..n)
            .map(|i| entry(&format!("db{i:04}"), unit(rng, dim), Some(i % 5)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn search_examples() {
    let index = RetrievalIndex::new(vec![
        entry("b", vec![1.0, 0.0], None),
        entry("a", vec![0.0, 1.0], None),
        entry("c", vec![0.6, 0.8], None),
    ])
    .unwrap();
    let hits = global_search(&[1.0, 0.0], &index, 10).unwrap();
    let order: Vec<usize> = hits.iter().map(|h| h.index).collect();
    assert_eq!(order, [0, 2, 1]);
    assert!((hits[1].similarity - 0.6).abs() < 1e-7);

    // "a" and "b" tie for the diagonal query; the smaller id wins.
    let d = std::f32::consts::FRAC_1_SQRT_2;
    let hits = global_search(&[d, d], &index, 3).unwrap();
    assert_eq!(hits[0].index, 2);
    assert_eq!((hits[1].index, hits[2].index), (1, 0));
    assert_eq!(global_search(&[1.0, 0.0], &index, 1).unwrap().len(), 1);
    assert!(global_search(&[1.0, 0.0], &index, 0).unwrap().is_empty());
}

#[test]
fn search_agrees_with_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 32;
    let mut entries: Vec<IndexEntry> = (0..1000)
        .map(|i| entry(&format!("{:04}", (i * 7919) % 1000), unit(&mut rng, dim), None))
        .collect();
    // Duplicated descriptors exercise the id tie-break.
    for i in 0..50 {
        entries[i + 500].global = entries[i].global.clone();
    }
    let index = RetrievalIndex::new(entries).unwrap();
    for _ in 0..10 {
        let query = unit(&mut rng, dim);
        let hits = global_search(&query, &index, 1000).unwrap();
        let mut expected: Vec<(f64, &str, usize)> = index
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let dot: f64 = query.iter().zip(&e.global).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                (dot, e.id.as_str(), i)
            })
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let got: Vec<usize> = hits.iter().map(|h| h.index).collect();
        let want: Vec<usize> = expected.iter().map(|e| e.2).collect();
        assert_eq!(got, want);
        let top = global_search(&query, &index, 25).unwrap();
        assert_eq!(top[..], hits[..25]);
    }
}

#[test]
fn index_rejects_malformed_databases() {
    assert!(matches!(RetrievalIndex::new(vec![]), Err(RetrievalError::EmptyIndex)));
    let dup = vec![entry("x", vec![1.0, 0.0], None), entry("x", vec![0.0, 1.0], None)];
    assert!(matches!(RetrievalIndex::new(dup), Err(RetrievalError::DuplicateId(id)) if id == "x"));
    let dims = vec![entry("x", vec![1.0, 0.0], None), entry("y", vec![0.0, 0.0, 1.0], None)];
    assert!(matches!(
        RetrievalIndex::new(dims),
        Err(RetrievalError::DimensionMismatch { expected: 2, got: 3 })
    ));
    let scaled = vec![entry("x", vec![2.0, 0.0], None)];
    assert!(matches!(RetrievalIndex::new(scaled), Err(RetrievalError::NotUnitNorm(_))));
    let index = RetrievalIndex::new(vec![entry("x", vec![1.0, 0.0], None)]).unwrap();
    assert!(matches!(
        global_search(&[1.0, 0.0, 0.0], &index, 1),
        Err(RetrievalError::DimensionMismatch { expected: 2, got: 3 })
    ));
}

fn features(points: &[[f32; 2]], rows: Vec<f32>, dim: usize) -> LocalFeatures {
    LocalFeatures {
        keypoints: points
            .iter()
            .map(|p| Keypoint { x: p[0], y: p[1], scale: 1.0, score: 1.0 })
            .collect(),
        descriptors: Descriptors::Float { dim, data: rows },
    }
}

/// A query with 40 local features and one candidate per entry in `shared`,
/// holding that many of the query's features shifted by (5, 3) plus random
/// filler features.
fn scene(rng: &mut ChaCha8Rng, shared: &[usize]) -> (LocalFeatures, Vec<LocalFeatures>) {
    let dim = 16;
    let n = 40;
    let points: Vec<[f32; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
    let rows: Vec<f32> = (0..n).flat_map(|_| unit(rng, dim)).collect();
    let query = features(&points, rows.clone(), dim);
    let candidates = shared
        .iter()
        .map(|&s| {
            let mut pts: Vec<[f32; 2]> = points[..s].iter().map(|p| [p[0] + 5.0, p[1] + 3.0]).collect();
            let mut data = rows[..s * dim].to_vec();
            for _ in s..n {
                pts.push([rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]);
                data.extend(unit(rng, dim));
            }
            features(&pts, data, dim)
        })
        .collect();
    (query, candidates)
}

fn hits(similarities: &[f64]) -> Vec<SearchHit> {
    similarities
        .iter()
        .enumerate()
        .map(|(index, &similarity)| SearchHit { index, similarity })
        .collect()
}

#[test]
fn rerank_orders_shortlist_by_inliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (query, candidates) = scene(&mut rng, &[4, 30, 0, 15, 22]);
    let ranking = hits(&[0.9, 0.8, 0.7, 0.6, 0.5]);
    let config = MatchConfig { residual_threshold: 1.0, ..MatchConfig::default() };
    let ranked = rerank(&query, &ranking, SHORTLIST, &config, |i| Some(Cow::Borrowed(&candidates[i]))).unwrap();
    let order: Vec<usize> = ranked.iter().map(|r| r.index).collect();
    assert_eq!(order[..3], [1, 4, 3]);
    for pair in ranked.windows(2) {
        let (a, b) = (pair[0].inliers.unwrap(), pair[1].inliers.unwrap());
        assert!(a > b || (a == b && pair[0].similarity >= pair[1].similarity));
    }
    assert!(ranked[0].inliers.unwrap() >= 30);
    for r in &ranked {
        assert_eq!(r.similarity, ranking[r.index].similarity);
    }
}

#[test]
fn rerank_leaves_entries_past_the_shortlist_and_skips_missing_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (query, candidates) = scene(&mut rng, &[0, 5, 25, 10, 30, 20]);
    let ranking = hits(&[0.95, 0.9, 0.85, 0.8, 0.75, 0.7]);
    let config = MatchConfig { residual_threshold: 1.0, ..MatchConfig::default() };
    let ranked = rerank(&query, &ranking, 4, &config, |i| {
        (i != 2).then(|| Cow::Borrowed(&candidates[i]))
    })
    .unwrap();
    let order: Vec<usize> = ranked.iter().map(|r| r.index).collect();
    assert_eq!(order, [3, 1, 0, 2, 4, 5]);
    assert!(ranked[..3].iter().all(|r| r.inliers.is_some()));
    assert!(ranked[3..].iter().all(|r| r.inliers.is_none()));

    let same = rerank(&query, &ranking, 4, &config, |i| (i != 2).then(|| Cow::Borrowed(&candidates[i]))).unwrap();
    assert_eq!(ranked, same);
    let empty = rerank(&query, &[], 4, &config, |_| None).unwrap();
    assert!(empty.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rerank_is_a_permutation_that_fixes_the_tail(
        seed in any::<u64>(), n in 1usize..12, shortlist in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared: Vec<usize> = (0..n).map(|_| rng.random_range(0..25)).collect();
        let (query, candidates) = scene(&mut rng, &shared);
        let mut sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        let mut ranking = hits(&sims);
        ranking.shuffle(&mut rng);
        ranking.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        let ranked = rerank(&query, &ranking, shortlist, &MatchConfig::default(), |i| {
            Some(Cow::Borrowed(&candidates[i]))
        }).unwrap();
        let cut = shortlist.min(n);
        let head: HashSet<usize> = ranked[..cut].iter().map(|r| r.index).collect();
        let expected: HashSet<usize> = ranking[..cut].iter().map(|h| h.index).collect();
        prop_assert_eq!(head, expected);
        let tail: Vec<usize> = ranked[cut..].iter().map(|r| r.index).collect();
        let expected_tail: Vec<usize> = ranking[cut..].iter().map(|h| h.index).collect();
        prop_assert_eq!(tail, expected_tail);
    }
}

fn labelled_index(labels: &[Option<usize>]) -> RetrievalIndex {
    let dim = labels.len();
    RetrievalIndex::new(
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut g = vec![0.0; dim];
                g[i] = 1.0;
                entry(&format!("e{i}"), g, l)
            })
            .collect(),
    )
    .unwrap()
}

fn ranked(rows: &[(usize, f64, Option<usize>)]) -> Vec<RankedEntry> {
    rows.iter()
        .map(|&(index, similarity, inliers)| RankedEntry { index, similarity, inliers })
        .collect()
}

#[test]
fn recognition_examples() {
    assert_eq!(INLIER_CAP, 70);
    assert!((image_score(70, 1.0, 0.25) - 1.25).abs() < 1e-15);
    assert!((image_score(7, 0.4, 0.25) - 0.2).abs() < 1e-15);
    assert_eq!(image_score(1000, 0.5, 0.25), image_score(70, 0.5, 0.25));

    let index = labelled_index(&[Some(0), Some(1), Some(1), None, Some(2)]);
    let config = RecognitionConfig::default();
    // One strongly verified image of class 0 beats two weak images of class 1.
    let r = ranked(&[(0, 0.5, Some(70)), (1, 0.9, Some(7)), (2, 0.8, Some(0)), (3, 0.99, Some(70))]);
    let (class, score) = recognize(&r, &index, &config).unwrap().unwrap();
    assert_eq!(class, 0);
    assert!((score - 1.125).abs() < 1e-12);

    // Unverified entries score by similarity alone; scores sum per class.
    let r = ranked(&[(4, 0.9, None), (1, 0.5, None), (2, 0.5, None)]);
    let (class, score) = recognize(&r, &index, &config).unwrap().unwrap();
    assert_eq!(class, 1);
    assert!((score - 0.25).abs() < 1e-12);

    // Ties go to the lower class; unlabelled-only rankings give nothing.
    let r = ranked(&[(4, 0.5, None), (0, 0.5, None)]);
    assert_eq!(recognize(&r, &index, &config).unwrap().unwrap().0, 0);
    assert_eq!(recognize(&ranked(&[(3, 1.0, Some(70))]), &index, &config).unwrap(), None);
    assert_eq!(recognize(&[], &index, &config).unwrap(), None);

    // Only the top_k entries count.
    let r = ranked(&[(0, 0.1, None), (1, 0.9, Some(70)), (2, 0.9, Some(70))]);
    let one = RecognitionConfig { top_k: 1, ..config };
    assert_eq!(recognize(&r, &index, &one).unwrap().unwrap().0, 0);
    assert_eq!(recognize(&r, &index, &config).unwrap().unwrap().0, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_score_is_monotone(i in 0usize..200, extra in 1usize..50, c in -1.0f64..1.0, dc in 0.0f64..1.0) {
        prop_assert!(image_score(i + extra, c, 0.25) >= image_score(i, c, 0.25));
        if i < INLIER_CAP {
            prop_assert!(image_score(i + 1, c, 0.25) > image_score(i, c, 0.25));
        }
        prop_assert!(image_score(i, c + dc, 0.25) >= image_score(i, c, 0.25));
    }

    #[test]
    fn more_inliers_never_lose_recognition(seed in any::<u64>(), bump in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Option<usize>> = (0..8).map(|_| Some(rng.random_range(0..3))).collect();
        let index = labelled_index(&labels);
        let mut rows: Vec<RankedEntry> = (0..8)
            .map(|i| RankedEntry { index: i, similarity: rng.random_range(0.0..1.0), inliers: Some(rng.random_range(0..50)) })
            .collect();
        let config = RecognitionConfig::default();
        let (winner, score) = recognize(&rows, &index, &config).unwrap().unwrap();
        for r in rows.iter_mut().filter(|r| labels[r.index] == Some(winner)) {
            *r.inliers.as_mut().unwrap() += bump;
        }
        let (after, after_score) = recognize(&rows, &index, &config).unwrap().unwrap();
        prop_assert_eq!(after, winner);
        prop_assert!(after_score >= score);
    }
}

/// AP by explicit precision-recall sums.
fn ap_oracle(ranking: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate().take(k) {
        if relevant.contains(id) {
            let hits = ranking[..=r].iter().filter(|x| relevant.contains(x)).count();
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

#[test]
fn ap_examples() {
    let rel: HashSet<u32> = [2, 4].into();
    let ap = average_precision(&[1, 2, 3, 4], &rel).unwrap();
    assert!((ap - (0.5 + 0.5) / 2.0).abs() < 1e-15);
    assert_eq!(average_precision(&[2, 4, 1], &rel).unwrap(), 1.0);
    assert_eq!(average_precision(&[1, 3], &rel).unwrap(), 0.0);
    // A relevant item missing from the ranking counts as zero.
    assert_eq!(average_precision(&[2, 1], &rel).unwrap(), 0.5);
    assert_eq!(average_precision_at(&[1, 2, 4], &rel, 1).unwrap(), 0.0);
    assert_eq!(average_precision_at(&[2, 1, 4], &rel, 1).unwrap(), 1.0);
    assert!(matches!(average_precision(&[1], &HashSet::new()), Err(RetrievalError::EmptyRelevant)));
    assert!(matches!(mean_ap::<u32>(&[]), Err(RetrievalError::NoQueries)));

    let queries = vec![
        QueryResult { ranking: vec![1, 2], relevant: [1].into() },
        QueryResult { ranking: vec![1, 2], relevant: [2].into() },
    ];
    assert_eq!(mean_ap(&queries).unwrap(), 0.75);
    assert_eq!(map_at_k(&queries, 1).unwrap(), 0.5);
}

#[test]
fn mean_ap_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let queries: Vec<QueryResult<u32>> = (0..50)
        .map(|_| {
            let mut ranking: Vec<u32> = (0..60).collect();
            ranking.shuffle(&mut rng);
            ranking.truncate(rng.random_range(1..60));
            let relevant: HashSet<u32> = (0..rng.random_range(1..15)).map(|_| rng.random_range(0..60)).collect();
            QueryResult { ranking, relevant }
        })
        .collect();
    for k in [1, 5, 10, 100, usize::MAX] {
        let expected = queries.iter().map(|q| ap_oracle(&q.ranking, &q.relevant, k)).sum::<f64>() / 50.0;
        assert!((map_at_k(&queries, k).unwrap() - expected).abs() < 1e-12);
    }
    let expected = queries.iter().map(|q| ap_oracle(&q.ranking, &q.relevant, usize::MAX)).sum::<f64>() / 50.0;
    assert!((mean_ap(&queries).unwrap() - expected).abs() < 1e-12);
}

fn pred(confidence: f64, correct: bool, has_label: bool) -> Prediction {
    Prediction { confidence, correct, has_label }
}

#[test]
fn micro_ap_examples() {
    // Correct at ranks 1 and 3 of 4 labelled queries: (1 + 2/3) / 4.
    let p = [pred(0.9, true, true), pred(0.8, false, true), pred(0.7, true, true), pred(0.1, false, true)];
    assert!((micro_ap_at_1(&p).unwrap() - (1.0 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
    // A confident prediction on an unlabelled query still costs precision.
    let p = [pred(0.9, false, false), pred(0.5, true, true)];
    assert_eq!(micro_ap_at_1(&p).unwrap(), 0.5);
    let p = [pred(0.5, true, true), pred(0.9, false, false)];
    assert_eq!(micro_ap_at_1(&p).unwrap(), 0.5);
    assert_eq!(micro_ap_at_1(&[pred(0.2, true, true), pred(0.9, true, true)]).unwrap(), 1.0);
    assert!(micro_ap_at_1(&[pred(0.2, false, false)]).is_err());
    assert!(micro_ap_at_1(&[]).is_err());
}

/// Pessimistic pair AP: within a tie, every negative precedes every positive.
fn pair_ap_oracle(pairs: &[ScoredPair]) -> f64 {
    let positives = pairs.iter().filter(|p| p.positive).count();
    let mut sum = 0.0;
    for p in pairs.iter().filter(|p| p.positive) {
        let above = pairs.iter().filter(|q| q.inliers > p.inliers).count();
        let above_pos = pairs.iter().filter(|q| q.inliers > p.inliers && q.positive).count();
        let tied_neg = pairs.iter().filter(|q| q.inliers == p.inliers && !q.positive).count();
        let tied_pos = pairs.iter().filter(|q| q.inliers == p.inliers && q.positive).count();
        // The tied positives occupy ranks above + tied_neg + 1 ..= + tied_pos.
        for k in 1..=tied_pos {
            sum += (above_pos + k) as f64 / (above + tied_neg + k) as f64 / tied_pos as f64;
        }
    }
    sum / positives as f64
}

#[test]
fn pair_ap_examples_and_oracle() {
    let sp = |inliers, positive| ScoredPair { inliers, positive };
    assert_eq!(pair_average_precision(&[sp(10, true), sp(3, false)]).unwrap(), 1.0);
    assert_eq!(pair_average_precision(&[sp(5, true), sp(5, false)]).unwrap(), 0.5);
    assert_eq!(pair_average_precision(&[sp(5, false), sp(5, true), sp(9, true)]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    assert!(pair_average_precision(&[sp(5, false)]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let pairs: Vec<ScoredPair> = (0..200)
            .map(|i| {
                let positive = i < 40;
                let inliers = if positive { rng.random_range(0..30) } else { rng.random_range(0..15) };
                sp(inliers, positive)
            })
            .collect();
        let got = pair_average_precision(&pairs).unwrap();
        assert!((got - pair_ap_oracle(&pairs)).abs() < 1e-12);
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(pair_average_precision(&shuffled).unwrap(), got);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_lies_in_unit_interval(ranking in proptest::collection::vec(0u32..30, 0..40), relevant in proptest::collection::hash_set(0u32..30, 1..10)) {
        let ap = average_precision(&ranking, &relevant).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn global_search_is_invariant_to_query_scale(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = random_index(&mut rng, 40, 8);
        let query = unit(&mut rng, 8);
        let scaled: Vec<f32> = query.iter().map(|x| x * scale).collect();
        let a: Vec<usize> = global_search(&query, &index, 40).unwrap().iter().map(|h| h.index).collect();
        let b: Vec<usize> = global_search(&scaled, &index, 40).unwrap().iter().map(|h| h.index).collect();
        // Rounding can swap near-ties; the top hit is clear of them here.
        prop_assert_eq!(a[0], b[0]);
        let sims: Vec<f64> = a.iter().map(|&i| cosine(&query, &index.entry(i).global)).collect();
        prop_assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let manifest = vec![
        ManifestEntry { id: "q0".into(), path: p.join("img/q0.ppm"), label: Some(3) },
        ManifestEntry { id: "q1".into(), path: p.join("q1.ppm"), label: None },
    ];
    write_manifest(&p.join("m.tsv"), &manifest).unwrap();
    assert_eq!(read_manifest(&p.join("m.tsv")).unwrap(), manifest);

    std::fs::write(p.join("rel.tsv"), format!("# comment\n{MANIFEST_HEADER}\n\nx\tsub/x.ppm\t1\ny\ty.ppm\n")).unwrap();
    let rel = read_manifest(&p.join("rel.tsv")).unwrap();
    assert_eq!(rel[0].path, p.join("sub/x.ppm"));
    assert_eq!(rel[1].label, None);

    let results = vec![
        ResultRow { rank: 1, id: "a".into(), similarity: 0.8125, inliers: Some(12) },
        ResultRow { rank: 2, id: "b".into(), similarity: -0.1, inliers: None },
    ];
    write_results(&p.join("r.tsv"), &results).unwrap();
    assert_eq!(read_results(&p.join("r.tsv")).unwrap(), results);
    assert!(std::fs::read_to_string(p.join("r.tsv")).unwrap().contains("\t-\n"));

    let preds = vec![PredictionRow { query: "q".into(), class: 4, confidence: 1.0 / 3.0 }];
    write_predictions(&p.join("p.tsv"), &preds).unwrap();
    assert_eq!(read_predictions(&p.join("p.tsv")).unwrap(), preds);

    let pairs = vec![PairRow { a: "x".into(), b: "y".into(), inliers: 17 }];
    write_pairs(&p.join("pairs.tsv"), &pairs).unwrap();
    assert_eq!(read_pairs(&p.join("pairs.tsv")).unwrap(), pairs);

    write_groundtruth(&p.join("gt.tsv"), [("q0", 3), ("q1", 5)]).unwrap();
    let gt = read_groundtruth(&p.join("gt.tsv")).unwrap();
    assert_eq!(gt, [("q0".to_string(), "3".to_string()), ("q1".into(), "5".into())]);
}

#[test]
fn malformed_tables_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.tsv");
    let parse_line = |text: &str| {
        std::fs::write(&p, text).unwrap();
        match read_results(&p) {
            Err(RetrievalError::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    };
    assert_eq!(parse_line("wrong\theader\n"), 1);
    assert_eq!(parse_line(""), 0);
    assert_eq!(parse_line("rank\tid\tsimilarity\tinliers\n1\ta\t0.5\n"), 2);
    assert_eq!(parse_line("rank\tid\tsimilarity\tinliers\n1\ta\t0.5\t3\nx\tb\t0.1\t2\n"), 3);
    assert_eq!(parse_line("rank\tid\tsimilarity\tinliers\n1\ta\tnan?\t3\n"), 2);
    assert_eq!(parse_line("rank\tid\tsimilarity\tinliers\n1\ta\t0.5\t3\textra\n"), 2);
    assert!(matches!(read_rows(&dir.path().join("missing.tsv"), MANIFEST_HEADER, 2), Err(RetrievalError::Io { .. })));
}
