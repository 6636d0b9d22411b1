use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
classes = 4
images_per_class = 5

[train]
steps = 20
batch_size = 4
eval_every = 10
"#;

fn delg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A trained tiny model plus extracted features for its dataset.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        fs::write(f.config(), SMALL).unwrap();
        ok(delg(&["--config", p(&f.config()), "synth", "--out", p(&f.data()), "--seed", "3"]));
        ok(delg(&["--config", p(&f.config()), "train", "--data", p(&f.data()), "--out", p(&f.run())]));
        ok(delg(&[
            "--config",
            p(&f.config()),
            "extract",
            "--checkpoint",
            p(&f.run().join("model.ckpt")),
            "--images",
            p(&f.data()),
            "--out",
            p(&f.features()),
        ]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.toml")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn run(&self) -> PathBuf {
        self.path("run")
    }

    fn features(&self) -> PathBuf {
        self.path("features")
    }

    fn manifest(&self) -> PathBuf {
        self.features().join("manifest.tsv")
    }

    fn ids(&self) -> Vec<String> {
        fs::read_to_string(self.manifest())
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect()
    }

    fn search(&self, out: &Path, rerank: &str) -> Output {
        delg(&[
            "--config",
            p(&self.config()),
            "search",
            "--index",
            p(&self.manifest()),
            "--query-features",
            p(&self.manifest()),
            "--rerank",
            rerank,
            "--out",
            p(out),
        ])
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walk(root)
        .into_iter()
        .map(|path| (path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(delg(&["synth", "--out", p(&out), "--seed", seed, "--classes", "3", "--images-per-class", "4"]));
        tree(&out)
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
    let labels = fs::read_to_string(dir.path().join("a/labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 12);
    let classes: std::collections::BTreeSet<&str> = labels.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(classes.len(), 3);
}

#[test]
fn bad_flags_and_config_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&delg(&["synth"])), 2);
    assert_eq!(code(&delg(&["frobnicate"])), 2);
    assert_eq!(code(&delg(&["extract", "--checkpoint", "x", "--images", "y", "--out", "z", "--tau", "high"])), 2);

    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train]\nstepz = 3\n").unwrap();
    let out = delg(&["--config", p(&config), "synth", "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&delg(&["--config", p(&missing), "synth", "--out", p(&dir.path().join("d"))])), 2);

    assert_eq!(code(&delg(&["synth", "--out", p(&dir.path().join("d")), "--classes", "0"])), 2);
}

#[test]
fn commands_echo_the_resolved_configuration() {
    let dir = TempDir::new().unwrap();
    let out = ok(delg(&["synth", "--out", p(&dir.path().join("d")), "--classes", "2", "--images-per-class", "2"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for section in ["[synth]", "[backbone]", "[heads]", "[train]", "[extract]", "[match]", "[retrieval]"] {
        assert!(stderr.contains(section), "missing {section} in:\n{stderr}");
    }
    assert!(stderr.contains("classes = 2"));
}

#[test]
fn zero_step_training_writes_initial_model_and_trace() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, SMALL).unwrap();
    let run = dir.path().join("run");
    ok(delg(&["--config", p(&config), "train", "--steps", "0", "--out", p(&run)]));
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("config.toml").is_file());
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "header plus the step-0 row:\n{trace}");
}

#[test]
fn trace_has_one_row_per_evaluation() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, SMALL).unwrap();
    let run = dir.path().join("run");
    ok(delg(&["--config", p(&config), "train", "--steps", "30", "--control", "naive", "--out", p(&run)]));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 30 / 10 + 1);
    let saved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("control = \"naive\""));
}

#[test]
fn huge_learning_rate_exits_non_finite() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, format!("{SMALL}lr_init = 1e300\nclip_norm = 0.0\n")).unwrap();
    let run = dir.path().join("run");
    let out = delg(&["--config", p(&config), "train", "--out", p(&run)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("last_good.ckpt").is_file());
}

#[test]
fn extraction_binarizes_and_caps_features() {
    let f = Fixture::new();
    let ids = f.ids();
    assert_eq!(ids.len(), 20);
    assert!(ids.iter().all(|id| f.features().join(format!("{id}.delgfeat")).is_file()));

    let binary = f.path("binary");
    let capped = f.path("capped");
    let config = f.config();
    let data = f.data();
    let checkpoint = f.run().join("model.ckpt");
    let extract = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "--config",
            p(&config),
            "extract",
            "--checkpoint",
            p(&checkpoint),
            "--images",
            p(&data),
            "--out",
            p(out),
        ];
        args.extend_from_slice(extra);
        ok(delg(&args));
    };
    extract(&binary, &["--binarize", "--tau=-1e9"]);
    extract(&capped, &["--max-local", "3", "--tau=-1e9"]);
    let float_full = f.path("float_full");
    extract(&float_full, &["--tau=-1e9"]);

    for id in &ids {
        let name = format!("{id}.delgfeat");
        let float = fs::metadata(float_full.join(&name)).unwrap().len();
        let bin = fs::metadata(binary.join(&name)).unwrap().len();
        assert!(2 * bin <= float, "{id}: binary {bin} vs float {float}");
    }

    // Capping at three keeps at most three features: self-matching finds at most three pairs.
    for id in ids.iter().take(4) {
        let a = capped.join(format!("{id}.delgfeat"));
        let out = ok(delg(&["--config", p(&f.config()), "match", "--a", p(&a), "--b", p(&a)]));
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(report["putative_matches"].as_u64().unwrap() <= 3, "{report}");
    }
}

#[test]
fn extraction_is_reproducible() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(delg(&[
        "--config",
        p(&f.config()),
        "extract",
        "--checkpoint",
        p(&f.run().join("model.ckpt")),
        "--images",
        p(&f.data()),
        "--out",
        p(&again),
    ]));
    assert_eq!(tree(&f.features()), tree(&again));
}

#[test]
fn unreadable_image_exits_four() {
    let f = Fixture::new();
    let broken = f.path("broken.ppm");
    fs::write(&broken, b"P6\n4 4\n255\nshort").unwrap();
    let out = delg(&[
        "--config",
        p(&f.config()),
        "extract",
        "--checkpoint",
        p(&f.run().join("model.ckpt")),
        "--images",
        p(&broken),
        "--out",
        p(&f.path("x")),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn search_writes_rankings_and_is_stable() {
    let f = Fixture::new();
    let (a, b) = (f.path("s1"), f.path("s2"));
    ok(f.search(&a, "on"));
    ok(f.search(&b, "on"));
    assert_eq!(tree(&a), tree(&b));

    let ids = f.ids();
    for id in &ids {
        let ranking = fs::read_to_string(a.join(format!("{id}.tsv"))).unwrap();
        let rows: Vec<Vec<&str>> = ranking.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        assert_eq!(rows.len(), ids.len());
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[0], (i + 1).to_string());
            assert_ne!(row[3], "-", "every entry is within the shortlist");
        }
        let inliers: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
        assert!(inliers.windows(2).all(|w| w[0] >= w[1]), "{id}: {inliers:?}");
    }
    let predictions = fs::read_to_string(a.join("predictions.tsv")).unwrap();
    assert_eq!(predictions.lines().count(), ids.len() + 1);
}

#[test]
fn search_without_rerank_is_sorted_by_similarity() {
    let f = Fixture::new();
    let out = f.path("plain");
    ok(f.search(&out, "off"));
    for id in f.ids() {
        let ranking = fs::read_to_string(out.join(format!("{id}.tsv"))).unwrap();
        let rows: Vec<(f64, String)> = ranking
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                assert_eq!(c[3], "-", "no inliers without rerank: {l}");
                (c[2].parse().unwrap(), c[1].to_string())
            })
            .collect();
        assert_eq!(rows[0].1, id, "an image is its own nearest neighbour");
        for w in rows.windows(2) {
            assert!(w[0].0 > w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1), "{w:?}");
        }
    }
}

#[test]
fn missing_index_entry_exits_five() {
    let f = Fixture::new();
    let victim = f.features().join(format!("{}.delgfeat", f.ids()[0]));
    fs::remove_file(victim).unwrap();
    let out = f.search(&f.path("s"), "on");
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn self_match_keeps_every_correspondence() {
    let f = Fixture::new();
    let id = &f.ids()[0];
    let a = f.features().join(format!("{id}.delgfeat"));
    let dump = f.path("dump.txt");
    let out = ok(delg(&["--config", p(&f.config()), "match", "--a", p(&a), "--b", p(&a), "--dump", p(&dump)]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let matches = report["putative_matches"].as_u64().unwrap();
    let inliers = report["inliers"].as_u64().unwrap();
    let lines = fs::read_to_string(&dump).unwrap();
    assert_eq!(lines.lines().skip(1).count() as u64, matches);
    if matches >= 3 {
        assert_eq!(inliers, matches);
    }
}

#[test]
fn match_svg_and_pair_list() {
    let f = Fixture::new();
    let ids = f.ids();
    let (a, b) = (&ids[0], &ids[1]);
    let svg = f.path("pair.svg");
    let image = |id: &str| f.data().join(format!("{id}.ppm"));
    ok(delg(&[
        "--config",
        p(&f.config()),
        "match",
        "--a",
        p(&f.features().join(format!("{a}.delgfeat"))),
        "--b",
        p(&f.features().join(format!("{b}.delgfeat"))),
        "--svg",
        p(&svg),
        "--image-a",
        p(&image(a)),
        "--image-b",
        p(&image(b)),
    ]));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let pairs = f.path("pairs.tsv");
    fs::write(&pairs, format!("a\tb\tinliers\n{a}\t{b}\n{a}\t{a}\n")).unwrap();
    let scored = f.path("scored.tsv");
    ok(delg(&[
        "--config",
        p(&f.config()),
        "match",
        "--pairs",
        p(&pairs),
        "--index",
        p(&f.manifest()),
        "--out",
        p(&scored),
    ]));
    let text = fs::read_to_string(&scored).unwrap();
    assert_eq!(text.lines().count(), 3);

    fs::write(&pairs, format!("a\tb\tinliers\n{a}\tghost\n")).unwrap();
    let out = delg(&["match", "--pairs", p(&pairs), "--index", p(&f.manifest()), "--out", p(&scored)]);
    assert_eq!(code(&out), 5);
}

fn evaluate(results: &Path, gt: &Path, metric: &str) -> Output {
    delg(&["evaluate", "--results", p(results), "--groundtruth", p(gt), "--metric", metric])
}

fn value(out: &Output) -> f64 {
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    report["value"].as_f64().unwrap()
}

#[test]
fn evaluate_perfect_rankings_and_mismatches() {
    let dir = TempDir::new().unwrap();
    let results = dir.path().join("results");
    fs::create_dir(&results).unwrap();
    let rows = "rank\tid\tsimilarity\tinliers\n1\tx\t0.9\t-\n2\ty\t0.5\t-\n3\tz\t0.1\t-\n";
    fs::write(results.join("q1.tsv"), rows).unwrap();
    fs::write(results.join("q2.tsv"), rows).unwrap();
    let gt = dir.path().join("gt.tsv");
    fs::write(&gt, "query\trelevant\nq1\tx\nq2\tx\nq2\ty\n").unwrap();
    for metric in ["map", "map100"] {
        let out = ok(evaluate(&results, &gt, metric));
        assert_eq!(value(&out), 1.0);
    }

    fs::write(&gt, "query\trelevant\nq1\tz\nq2\tx\n").unwrap();
    let out = ok(evaluate(&results, &gt, "map"));
    assert!((value(&out) - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);

    fs::write(&gt, "query\trelevant\nq1\t-\nq2\tx\n").unwrap();
    assert_eq!(code(&evaluate(&results, &gt, "map")), 6);

    fs::write(&gt, "query\trelevant\nq1\tx\n").unwrap();
    assert_eq!(code(&evaluate(&results, &gt, "map")), 6);

    fs::write(&gt, "query\trelevant\nq1\tx\nq2\tx\nq3\tx\n").unwrap();
    assert_eq!(code(&evaluate(&results, &gt, "map")), 6);

    fs::write(&gt, "nonsense\n").unwrap();
    assert_eq!(code(&evaluate(&results, &gt, "map")), 2);
}

#[test]
fn evaluate_predictions_and_pairs() {
    let dir = TempDir::new().unwrap();
    let preds = dir.path().join("predictions.tsv");
    fs::write(&preds, "query\tclass\tconfidence\nq1\t0\t2.0\nq2\t1\t1.0\nq3\t1\t0.5\n").unwrap();
    let gt = dir.path().join("gt.tsv");
    fs::write(&gt, "query\trelevant\nq1\t0\nq2\t1\nq3\t-\n").unwrap();
    let out = ok(evaluate(&preds, &gt, "uap1"));
    assert_eq!(value(&out), 1.0);

    // A labelled query without a prediction still counts.
    fs::write(&gt, "query\trelevant\nq1\t0\nq2\t1\nq3\t-\nq4\t2\n").unwrap();
    let out = ok(evaluate(&preds, &gt, "uap1"));
    assert!((value(&out) - 2.0 / 3.0).abs() < 1e-12);

    fs::write(&gt, "query\trelevant\nq1\t0\n").unwrap();
    assert_eq!(code(&evaluate(&preds, &gt, "uap1")), 6);

    let pairs = dir.path().join("pairs.tsv");
    fs::write(&pairs, "a\tb\tinliers\nx\ty\t40\nx\tz\t3\ny\tz\t10\n").unwrap();
    fs::write(&gt, "query\trelevant\ny\tx\n").unwrap();
    let out = ok(evaluate(&pairs, &gt, "pair-ap"));
    assert_eq!(value(&out), 1.0);
    fs::write(&gt, "query\trelevant\nx\tz\n").unwrap();
    let out = ok(evaluate(&pairs, &gt, "pair-ap"));
    assert!((value(&out) - 1.0 / 3.0).abs() < 1e-12);
    fs::write(&gt, "query\trelevant\nx\tw\n").unwrap();
    assert_eq!(code(&evaluate(&pairs, &gt, "pair-ap")), 6);

    fs::write(&gt, "query\trelevant\nx\ty\n").unwrap();
    let report = dir.path().join("report.json");
    let out = ok(delg(&[
        "evaluate",
        "--results",
        p(&pairs),
        "--groundtruth",
        p(&gt),
        "--metric",
        "pair-ap",
        "--out",
        p(&report),
    ]));
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(written["value"].as_f64(), Some(value(&out)));
    assert_eq!(written["metric"], "pair-ap");
}
