use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use delg::checkpoint::{self, Checkpoint};
use delg::extractor::{self, load_features, save_features, ExtractError, ImageFeatures, LocalFeatures};
use delg::matcher::{dump_correspondences, dump_svg, match_features, MatchConfig, MatchError};
use delg::retrieval::io::{
    read_groundtruth, read_manifest, read_pairs, read_predictions, read_rows, read_results,
    write_manifest, write_pairs, write_predictions, write_results, ManifestEntry, PairRow,
    PredictionRow, ResultRow, MANIFEST_HEADER, PAIRS_HEADER,
};
use delg::retrieval::{
    self, global_search, map_at_k, mean_ap, micro_ap_at_1, pair_average_precision, IndexEntry,
    Prediction, QueryResult, RankedEntry, RetrievalError, RetrievalIndex, ScoredPair,
};
use delg::trainer::synth::{self, derive_seed, load_image, read_labels, SynthError};
use delg::trainer::{self, SynthSpec, TrainConfig, TrainError, ATTENTION_SAMPLE};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Exit};
use crate::{EvaluateArgs, ExtractArgs, MatchArgs, Metric, SearchArgs, Switch, SynthArgs, Tau, TrainArgs};

const FEATURE_EXT: &str = "delgfeat";
const IMAGE_EXTS: [&str; 4] = ["ppm", "pgm", "pbm", "pnm"];

/// Every command logs the configuration it actually runs with.
fn echo(config: &RunConfig, extra: &[(&str, String)]) {
    eprintln!("# resolved configuration");
    eprint!("{}", config.to_toml());
    for (k, v) in extra {
        eprintln!("# {k} = {v}");
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::failure(format!("{}: {e}", path.display()))
}

fn retrieval_err(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::Match(m) => match_err(m),
        RetrievalError::Parse { .. } => CliError::usage(e.to_string()),
        other => CliError::failure(other),
    }
}

fn match_err(e: MatchError) -> CliError {
    match e {
        MatchError::RatioOnBinary => {
            CliError::usage("binary descriptors need `mode = \"distance\"` in [match]")
        }
        MatchError::InvalidConfig(_) => CliError::usage(e.to_string()),
        other => CliError::failure(other),
    }
}

pub fn synth(mut config: RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let s = &mut config.synth;
    if let Some(v) = args.classes {
        s.classes = v;
    }
    if let Some(v) = args.images_per_class {
        s.images_per_class = v;
    }
    if let Some(v) = args.image_size {
        s.image_size = v;
    }
    let mut spec: SynthSpec = s.clone().into();
    if args.no_augment {
        spec = spec.without_augmentation();
        config.synth = spec.clone().into();
    }
    let seed = args.seed.unwrap_or(config.train.seed);
    echo(&config, &[("seed", seed.to_string())]);
    let data = trainer::generate_dataset(&spec, seed).map_err(|e| match e {
        SynthError::Degenerate(_) => CliError::usage(e.to_string()),
        other => CliError::failure(other),
    })?;
    synth::write_dataset(&data, &args.out).map_err(CliError::failure)?;
    eprintln!(
        "wrote {} train + {} val images of {} classes to {}",
        data.train.len(),
        data.val.len(),
        data.num_classes,
        args.out.display()
    );
    Ok(())
}

pub fn train(mut config: RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(c) = args.control {
        config.train.control = c;
    }
    if let Some(v) = args.steps {
        config.train.steps = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    echo(&config, &[("data", format!("{:?}", args.data))]);
    let data = match &args.data {
        Some(dir) => synth::read_dataset(dir).map_err(|e| match e {
            SynthError::Image { .. } => CliError::new(Exit::UnreadableImage, e.to_string()),
            other => CliError::failure(other),
        })?,
        None => trainer::generate_dataset(&config.synth.clone().into(), config.train.seed)
            .map_err(|e| CliError::usage(e.to_string()))?,
    };
    let model_config = config.model_config(data.num_classes)?;
    let train_config: TrainConfig = config.train.clone().into();
    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    fs::write(args.out.join("config.toml"), config.to_toml()).map_err(|e| io_failure(&args.out, e))?;

    let outcome = match trainer::train(&train_config, &model_config, &data) {
        Ok(o) => o,
        Err(TrainError::Diverged { step, last_good }) => {
            let path = args.out.join("last_good.ckpt");
            checkpoint::save(&path, &Checkpoint::new(*last_good)).map_err(|e| io_failure(&path, e))?;
            return Err(CliError::new(
                Exit::NonFinite,
                format!("training produced non-finite values at step {step}; last finite model in {}", path.display()),
            ));
        }
        Err(e @ TrainError::InvalidConfig(_)) => return Err(CliError::usage(e.to_string())),
        Err(e) => return Err(CliError::failure(e)),
    };
    let mut ckpt = Checkpoint::new(outcome.model);
    ckpt.extras.insert(
        ATTENTION_SAMPLE.into(),
        delg::numgraph::Tensor::vector(outcome.attention_sample),
    );
    let ckpt_path = args.out.join("model.ckpt");
    checkpoint::save(&ckpt_path, &ckpt).map_err(|e| io_failure(&ckpt_path, e))?;
    let trace_path = args.out.join("trace.csv");
    trainer::save_trace(&trace_path, &outcome.trace).map_err(|e| io_failure(&trace_path, e))?;
    if let Some(last) = outcome.trace.last() {
        eprintln!(
            "step {}: loss_g {:.4} loss_r {:.4} loss_a {:.4} sparsity S {:.3} D {:.3}",
            last.step, last.loss_g, last.loss_r, last.loss_a, last.sparsity_s, last.sparsity_d
        );
    }
    eprintln!("wrote {} and {}", ckpt_path.display(), trace_path.display());
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn strip_ext(rel: &Path) -> String {
    rel.with_extension("").to_string_lossy().replace('\\', "/")
}

/// Resolves `--images` to `(id, image path, label)` entries.
fn image_list(images: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    if images.is_dir() {
        let labels = images.join("labels.tsv");
        if labels.is_file() {
            return labelled_list(&labels);
        }
        let mut out = Vec::new();
        for entry in walkdir::WalkDir::new(images).sort_by_file_name() {
            let entry = entry.map_err(|e| io_failure(images, e))?;
            if entry.file_type().is_file() && is_image(entry.path()) {
                let rel = entry.path().strip_prefix(images).expect("walk stays under root");
                out.push(ManifestEntry {
                    id: strip_ext(rel),
                    path: entry.path().to_path_buf(),
                    label: None,
                });
            }
        }
        return Ok(out);
    }
    if is_image(images) || !images.exists() {
        let id = images.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![ManifestEntry {
            id,
            path: images.to_path_buf(),
            label: None,
        }]);
    }
    let first = fs::read_to_string(images)
        .map_err(|e| io_failure(images, e))?
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::to_string);
    if first.as_deref().map(str::trim_end) == Some(MANIFEST_HEADER) {
        read_manifest(images).map_err(retrieval_err)
    } else {
        labelled_list(images)
    }
}

/// A `path<TAB>class` list as written by `synth`; paths are relative to it.
fn labelled_list(list: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let base = list.parent().unwrap_or(Path::new(""));
    Ok(read_labels(list)
        .map_err(|e| CliError::usage(e.to_string()))?
        .into_iter()
        .map(|(name, label)| ManifestEntry {
            id: strip_ext(Path::new(&name)),
            path: base.join(&name),
            label: Some(label),
        })
        .collect())
}

pub fn extract(mut config: RunConfig, args: &ExtractArgs) -> Result<(), CliError> {
    if args.binarize {
        config.extract.binarize = true;
    }
    if let Some(v) = args.max_local {
        config.extract.max_local = v;
    }
    let ckpt = checkpoint::load(&args.checkpoint).map_err(|e| io_failure(&args.checkpoint, e))?;
    let tau = match args.tau {
        Tau::Value(v) => v,
        Tau::Auto => {
            let sample = ckpt.extras.get(ATTENTION_SAMPLE).ok_or_else(|| {
                CliError::usage("checkpoint has no attention sample; pass --tau <value>")
            })?;
            trainer::compute_tau(sample.data(), config.extract.tau_percentile)
                .map_err(|e| CliError::usage(e.to_string()))?
        }
    };
    echo(&config, &[("tau", tau.to_string())]);
    let extraction = config.extract.extraction_config(tau);
    extraction.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let images = image_list(&args.images)?;
    let mut manifest = Vec::with_capacity(images.len());
    for entry in &images {
        let image = load_image(&entry.path)
            .map_err(|e| CliError::new(Exit::UnreadableImage, e.to_string()))?;
        let features = extractor::extract(&image, &ckpt.model, &extraction).map_err(|e| match e {
            ExtractError::InvalidConfig(_) => CliError::usage(e.to_string()),
            other => CliError::failure(format!("{}: {other}", entry.path.display())),
        })?;
        let rel = PathBuf::from(format!("{}.{FEATURE_EXT}", entry.id));
        let path = args.out.join(&rel);
        save_features(&path, &features).map_err(|e| io_failure(&path, e))?;
        manifest.push(ManifestEntry {
            id: entry.id.clone(),
            path: rel,
            label: entry.label,
        });
    }
    let manifest_path = args.out.join("manifest.tsv");
    write_manifest(&manifest_path, &manifest).map_err(retrieval_err)?;
    eprintln!("wrote {} feature files and {}", manifest.len(), manifest_path.display());
    Ok(())
}

/// Loads every feature file of a manifest; a missing or unreadable file is a
/// missing index entry.
fn load_indexed(manifest: &Path) -> Result<Vec<(ManifestEntry, ImageFeatures)>, CliError> {
    read_manifest(manifest)
        .map_err(retrieval_err)?
        .into_iter()
        .map(|entry| {
            let features = load_features(&entry.path).map_err(|e| {
                CliError::new(
                    Exit::MissingIndexEntry,
                    format!("index entry `{}` ({}): {e}", entry.id, entry.path.display()),
                )
            })?;
            Ok((entry, features))
        })
        .collect()
}

fn query_list(path: &Path) -> Result<Vec<(String, ImageFeatures)>, CliError> {
    let is_manifest = path.extension().is_some_and(|e| e == "tsv");
    if is_manifest {
        return read_manifest(path)
            .map_err(retrieval_err)?
            .into_iter()
            .map(|e| {
                let f = load_features(&e.path).map_err(|err| io_failure(&e.path, err))?;
                Ok((e.id, f))
            })
            .collect();
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let f = load_features(path).map_err(|e| io_failure(path, e))?;
    Ok(vec![(id, f)])
}

pub fn search(config: RunConfig, args: &SearchArgs) -> Result<(), CliError> {
    echo(&config, &[("rerank", format!("{:?}", args.rerank)), ("topk", args.topk.to_string())]);
    let match_config: MatchConfig = config.matching.clone().into();
    match_config.validate().map_err(match_err)?;
    let entries = load_indexed(&args.index)?;
    let (index_entries, locals): (Vec<IndexEntry>, Vec<LocalFeatures>) = entries
        .into_iter()
        .map(|(m, f)| {
            (
                IndexEntry {
                    id: m.id,
                    global: f.global,
                    features: Some(m.path),
                    label: m.label,
                },
                f.local,
            )
        })
        .unzip();
    let index = RetrievalIndex::new(index_entries).map_err(retrieval_err)?;
    let queries = query_list(&args.query_features)?;
    let recognition = config.retrieval.recognition();

    let mut predictions = Vec::new();
    for (id, query) in &queries {
        let hits = global_search(&query.global, &index, index.len()).map_err(retrieval_err)?;
        let ranked: Vec<RankedEntry> = match args.rerank {
            Switch::Off => hits.into_iter().map(RankedEntry::from).collect(),
            Switch::On => retrieval::rerank(&query.local, &hits, config.retrieval.shortlist, &match_config, |i| {
                Some(Cow::Borrowed(&locals[i]))
            })
            .map_err(retrieval_err)?,
        };
        let rows: Vec<ResultRow> = ranked
            .iter()
            .take(args.topk)
            .enumerate()
            .map(|(r, e)| ResultRow {
                rank: r + 1,
                id: index.entry(e.index).id.clone(),
                similarity: e.similarity,
                inliers: e.inliers,
            })
            .collect();
        write_results(&args.out.join(format!("{id}.tsv")), &rows).map_err(retrieval_err)?;
        if let Some((class, confidence)) = retrieval::recognize(&ranked, &index, &recognition).map_err(retrieval_err)? {
            predictions.push(PredictionRow {
                query: id.clone(),
                class,
                confidence,
            });
        }
    }
    write_predictions(&args.out.join("predictions.tsv"), &predictions).map_err(retrieval_err)?;
    eprintln!("ranked {} entries for {} queries into {}", index.len(), queries.len(), args.out.display());
    Ok(())
}

pub fn matching(config: RunConfig, args: &MatchArgs) -> Result<(), CliError> {
    let match_config: MatchConfig = config.matching.clone().into();
    echo(&config, &[]);
    match_config.validate().map_err(match_err)?;
    if let Some(pairs) = &args.pairs {
        return match_pairs(&match_config, pairs, args);
    }
    let (Some(a), Some(b)) = (&args.a, &args.b) else {
        return Err(CliError::usage("need --a and --b, or --pairs with --index and --out"));
    };
    let fa = load_features(a).map_err(|e| io_failure(a, e))?;
    let fb = load_features(b).map_err(|e| io_failure(b, e))?;
    let result = match_features(&fa.local, &fb.local, &match_config).map_err(match_err)?;
    if let Some(path) = &args.dump {
        let mut buf = Vec::new();
        dump_correspondences(&result, &mut buf).map_err(|e| io_failure(path, e))?;
        fs::write(path, buf).map_err(|e| io_failure(path, e))?;
    }
    if let (Some(path), Some(ia), Some(ib)) = (&args.svg, &args.image_a, &args.image_b) {
        let size = |p: &Path| {
            load_image(p)
                .map(|t| (t.shape()[1], t.shape()[0]))
                .map_err(|e| CliError::new(Exit::UnreadableImage, e.to_string()))
        };
        let ((wa, ha), (wb, hb)) = (size(ia)?, size(ib)?);
        let (sa, sb) = (ia.to_string_lossy(), ib.to_string_lossy());
        let mut buf = Vec::new();
        dump_svg(&result, (&sa, wa, ha), (&sb, wb, hb), &mut buf).map_err(|e| io_failure(path, e))?;
        fs::write(path, buf).map_err(|e| io_failure(path, e))?;
    }
    let report = json!({
        "putative_matches": result.matches.len(),
        "inliers": result.inliers,
        "affine": result.model.map(|m| m.params().to_vec()),
    });
    println!("{report}");
    Ok(())
}

fn match_pairs(config: &MatchConfig, pairs: &Path, args: &MatchArgs) -> Result<(), CliError> {
    let (Some(index), Some(out)) = (&args.index, &args.out) else {
        return Err(CliError::usage("--pairs needs --index and --out"));
    };
    let features: HashMap<String, ImageFeatures> = load_indexed(index)?
        .into_iter()
        .map(|(m, f)| (m.id, f))
        .collect();
    let lookup = |id: &str| {
        features.get(id).ok_or_else(|| {
            CliError::new(Exit::MissingIndexEntry, format!("pair references `{id}`, which is not in the index"))
        })
    };
    let mut rows = Vec::new();
    for (n, (_, fields)) in read_rows(pairs, PAIRS_HEADER, 2).map_err(retrieval_err)?.into_iter().enumerate() {
        let (a, b) = (lookup(&fields[0])?, lookup(&fields[1])?);
        let pair_config = MatchConfig {
            rng_seed: derive_seed(config.rng_seed, n as u64, 1),
            ..config.clone()
        };
        let result = match_features(&a.local, &b.local, &pair_config).map_err(match_err)?;
        rows.push(PairRow {
            a: fields[0].clone(),
            b: fields[1].clone(),
            inliers: result.inliers,
        });
    }
    write_pairs(out, &rows).map_err(retrieval_err)?;
    eprintln!("verified {} pairs into {}", rows.len(), out.display());
    Ok(())
}

fn mismatch(message: String) -> CliError {
    CliError::new(Exit::GroundTruthMismatch, message)
}

/// Query ids of a ranking directory: every `*.tsv` except `predictions.tsv`.
fn ranking_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("{} is not a ranking directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| io_failure(dir, e))?;
        let path = entry.path();
        if entry.file_type().is_file() && path.extension().is_some_and(|e| e == "tsv") && path != dir.join("predictions.tsv") {
            let rel = path.strip_prefix(dir).expect("walk stays under root");
            out.insert(strip_ext(rel), path.to_path_buf());
        }
    }
    Ok(out)
}

fn ranking_queries(results: &Path, groundtruth: &Path) -> Result<Vec<QueryResult<String>>, CliError> {
    let mut relevant: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for (query, id) in read_groundtruth(groundtruth).map_err(retrieval_err)? {
        let set = relevant.entry(query).or_default();
        if id != "-" {
            set.insert(id);
        }
    }
    let files = ranking_files(results)?;
    if let Some(q) = files.keys().find(|q| !relevant.contains_key(*q)) {
        return Err(mismatch(format!("ranking for `{q}` has no ground truth")));
    }
    relevant
        .into_iter()
        .map(|(query, relevant)| {
            let path = files.get(&query).ok_or_else(|| mismatch(format!("no ranking for query `{query}`")))?;
            if relevant.is_empty() {
                return Err(mismatch(format!("query `{query}` has an empty relevant set")));
            }
            let ranking = read_results(path).map_err(retrieval_err)?.into_iter().map(|r| r.id).collect();
            Ok(QueryResult { ranking, relevant })
        })
        .collect()
}

fn predictions(results: &Path, groundtruth: &Path) -> Result<Vec<Prediction>, CliError> {
    let path = if results.is_dir() { results.join("predictions.tsv") } else { results.to_path_buf() };
    let mut truth: BTreeMap<String, Option<usize>> = BTreeMap::new();
    for (query, class) in read_groundtruth(groundtruth).map_err(retrieval_err)? {
        let label = match class.as_str() {
            "-" | "" => None,
            v => Some(v.parse().map_err(|_| CliError::usage(format!("bad class `{v}` for `{query}`")))?),
        };
        truth.insert(query, label);
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in read_predictions(&path).map_err(retrieval_err)? {
        let label = truth
            .get(&row.query)
            .ok_or_else(|| mismatch(format!("prediction for `{}` has no ground truth", row.query)))?;
        if !seen.insert(row.query.clone()) {
            return Err(mismatch(format!("duplicate prediction for `{}`", row.query)));
        }
        out.push(Prediction {
            confidence: row.confidence,
            correct: *label == Some(row.class),
            has_label: label.is_some(),
        });
    }
    // Labelled queries without a prediction still count in the denominator.
    for (query, label) in &truth {
        if label.is_some() && !seen.contains(query) {
            out.push(Prediction {
                confidence: f64::NEG_INFINITY,
                correct: false,
                has_label: true,
            });
        }
    }
    Ok(out)
}

fn scored_pairs(results: &Path, groundtruth: &Path) -> Result<Vec<ScoredPair>, CliError> {
    let key = |a: &str, b: &str| if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
    let positives: HashSet<(String, String)> = read_groundtruth(groundtruth)
        .map_err(retrieval_err)?
        .iter()
        .map(|(a, b)| key(a, b))
        .collect();
    let rows = read_pairs(results).map_err(retrieval_err)?;
    let scored: HashSet<(String, String)> = rows.iter().map(|r| key(&r.a, &r.b)).collect();
    if let Some((a, b)) = positives.iter().find(|p| !scored.contains(*p)) {
        return Err(mismatch(format!("positive pair `{a}`/`{b}` was not scored")));
    }
    Ok(rows
        .iter()
        .map(|r| ScoredPair {
            inliers: r.inliers,
            positive: positives.contains(&key(&r.a, &r.b)),
        })
        .collect())
}

pub fn evaluate(config: RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    echo(&config, &[("metric", format!("{:?}", args.metric))]);
    let metric_err = |e: RetrievalError| match e {
        RetrievalError::EmptyRelevant | RetrievalError::NoQueries => mismatch(e.to_string()),
        other => retrieval_err(other),
    };
    let (name, value, count) = match args.metric {
        Metric::Map | Metric::Map100 => {
            let queries = ranking_queries(&args.results, &args.groundtruth)?;
            let value = if args.metric == Metric::Map {
                mean_ap(&queries)
            } else {
                map_at_k(&queries, 100)
            };
            let name = if args.metric == Metric::Map { "map" } else { "map@100" };
            (name, value.map_err(metric_err)?, queries.len())
        }
        Metric::Uap1 => {
            let preds = predictions(&args.results, &args.groundtruth)?;
            ("uap@1", micro_ap_at_1(&preds).map_err(metric_err)?, preds.len())
        }
        Metric::PairAp => {
            let pairs = scored_pairs(&args.results, &args.groundtruth)?;
            ("pair-ap", pair_average_precision(&pairs).map_err(metric_err)?, pairs.len())
        }
    };
    let report = json!({ "metric": name, "value": value, "count": count });
    println!("{report}");
    if let Some(path) = &args.out {
        let mut file = fs::File::create(path).map_err(|e| io_failure(path, e))?;
        writeln!(file, "{report:#}").map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}
