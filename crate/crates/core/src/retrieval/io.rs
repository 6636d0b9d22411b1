//! Tab-separated manifests, rankings, predictions and pair lists.
//!
//! Every file starts with a header line; blank lines and lines starting with
//! `#` are ignored on read.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::RetrievalError;

pub const MANIFEST_HEADER: &str = "id\tpath\tlabel";
pub const RESULTS_HEADER: &str = "rank\tid\tsimilarity\tinliers";
pub const PREDICTIONS_HEADER: &str = "query\tclass\tconfidence";
pub const PAIRS_HEADER: &str = "a\tb\tinliers";
pub const GROUNDTRUTH_HEADER: &str = "query\trelevant";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Data rows of a TSV file with the given header, split on tabs. Each row has
/// between `min_cols` and the header's column count fields.
pub fn read_rows(
    path: &Path,
    header: &str,
    min_cols: usize,
) -> Result<Vec<(usize, Vec<String>)>, RetrievalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let max_cols = header.split('\t').count();
    let parse_err = |line: usize, message: String| RetrievalError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line.trim_end() != header {
                return Err(parse_err(line_no, format!("expected header `{header}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<String> = line.trim_end_matches('\r').split('\t').map(str::to_string).collect();
        if fields.len() < min_cols || fields.len() > max_cols {
            return Err(parse_err(
                line_no,
                format!("expected {min_cols}..={max_cols} fields, got {}", fields.len()),
            ));
        }
        rows.push((line_no, fields));
    }
    if !saw_header {
        return Err(parse_err(0, format!("missing header `{header}`")));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    what: &str,
) -> Result<T, RetrievalError> {
    field.parse().map_err(|_| RetrievalError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), RetrievalError> {
    let mut buf = Vec::new();
    body(&mut buf).map_err(io_err(path))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Option<usize>,
}

/// Reads a manifest; relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, RetrievalError> {
    let base = path.parent().unwrap_or(Path::new(""));
    read_rows(path, MANIFEST_HEADER, 2)?
        .into_iter()
        .map(|(line, f)| {
            let label = match f.get(2).map(String::as_str) {
                None | Some("") => None,
                Some(v) => Some(parse(path, line, v, "label")?),
            };
            Ok(ManifestEntry {
                id: f[0].clone(),
                path: base.join(&f[1]),
                label,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), RetrievalError> {
    write_file(path, |out| {
        writeln!(out, "{MANIFEST_HEADER}")?;
        for e in entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            writeln!(out, "{}\t{}\t{label}", e.id, e.path.display())?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub rank: usize,
    pub id: String,
    pub similarity: f64,
    pub inliers: Option<usize>,
}

/// Ranking of one query; unverified entries have `-` in the inlier column.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), RetrievalError> {
    write_file(path, |out| {
        writeln!(out, "{RESULTS_HEADER}")?;
        for r in rows {
            let inliers = r.inliers.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
            writeln!(out, "{}\t{}\t{}\t{inliers}", r.rank, r.id, r.similarity)?;
        }
        Ok(())
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, RetrievalError> {
    read_rows(path, RESULTS_HEADER, 4)?
        .into_iter()
        .map(|(line, f)| {
            Ok(ResultRow {
                rank: parse(path, line, &f[0], "rank")?,
                id: f[1].clone(),
                similarity: parse(path, line, &f[2], "similarity")?,
                inliers: match f[3].as_str() {
                    "-" => None,
                    v => Some(parse(path, line, v, "inlier count")?),
                },
            })
        })
        .collect()
}

/// Two-column rows (`query`, `relevant` id or class label).
pub fn read_groundtruth(path: &Path) -> Result<Vec<(String, String)>, RetrievalError> {
    Ok(read_rows(path, GROUNDTRUTH_HEADER, 2)?
        .into_iter()
        .map(|(_, mut f)| {
            let b = f.pop().expect("two fields");
            let a = f.pop().expect("two fields");
            (a, b)
        })
        .collect())
}

pub fn write_groundtruth<A: Display, B: Display>(
    path: &Path,
    rows: impl IntoIterator<Item = (A, B)>,
) -> Result<(), RetrievalError> {
    write_file(path, |out| {
        writeln!(out, "{GROUNDTRUTH_HEADER}")?;
        for (a, b) in rows {
            writeln!(out, "{a}\t{b}")?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub query: String,
    pub class: usize,
    pub confidence: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), RetrievalError> {
    write_file(path, |out| {
        writeln!(out, "{PREDICTIONS_HEADER}")?;
        for r in rows {
            writeln!(out, "{}\t{}\t{}", r.query, r.class, r.confidence)?;
        }
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, RetrievalError> {
    read_rows(path, PREDICTIONS_HEADER, 3)?
        .into_iter()
        .map(|(line, f)| {
            Ok(PredictionRow {
                query: f[0].clone(),
                class: parse(path, line, &f[1], "class")?,
                confidence: parse(path, line, &f[2], "confidence")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRow {
    pub a: String,
    pub b: String,
    pub inliers: usize,
}

pub fn write_pairs(path: &Path, rows: &[PairRow]) -> Result<(), RetrievalError> {
    write_file(path, |out| {
        writeln!(out, "{PAIRS_HEADER}")?;
        for r in rows {
            writeln!(out, "{}\t{}\t{}", r.a, r.b, r.inliers)?;
        }
        Ok(())
    })
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>, RetrievalError> {
    read_rows(path, PAIRS_HEADER, 3)?
        .into_iter()
        .map(|(line, f)| {
            Ok(PairRow {
                a: f[0].clone(),
                b: f[1].clone(),
                inliers: parse(path, line, &f[2], "inlier count")?,
            })
        })
        .collect()
}
