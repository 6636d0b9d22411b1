//! Putative correspondences between two local feature sets and RANSAC affine
//! geometric verification.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::extractor::{hamming, Descriptors, LocalFeatures};
use crate::numgraph::kernels;

/// Minimum triangle area of a usable 3-point sample.
pub const COLLINEAR_AREA: f64 = 1e-6;
/// Minimum `|det|` of the linear part of an accepted model.
pub const MIN_DETERMINANT: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match float descriptors against binary ones")]
    MixedDescriptors,
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("binary descriptors support distance matching only")]
    RatioOnBinary,
    #[error("sample points are collinear")]
    Collinear,
    #[error("affine model is degenerate")]
    Degenerate,
    #[error("invalid match configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Ratio,
    Distance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub mode: MatchMode,
    pub ratio_threshold: f64,
    pub distance_threshold: f64,
    pub ransac_iters: usize,
    /// Reprojection error bound, in original-image pixels.
    pub residual_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            mode: MatchMode::Ratio,
            ratio_threshold: 0.95,
            distance_threshold: 1.1,
            ransac_iters: 1000,
            residual_threshold: 20.0,
            min_inliers: 0,
            rng_seed: 0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold <= 1.0) {
            return Err(MatchError::InvalidConfig("ratio_threshold must be in (0, 1]".into()));
        }
        if !(self.residual_threshold > 0.0) {
            return Err(MatchError::InvalidConfig("residual_threshold must be > 0".into()));
        }
        if !(self.distance_threshold > 0.0) {
            return Err(MatchError::InvalidConfig("distance_threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Index pair into the two descriptor sets and their distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PutativeMatch {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Point pair in original-image pixels (`src` in A, `dst` in B).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

/// `x' = a11 x + a12 y + tx`, `y' = a21 x + a22 y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineModel {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineModel {
    pub const IDENTITY: Self = Self {
        linear: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    /// `(a11, a12, a21, a22, tx, ty)`.
    pub fn params(&self) -> [f64; 6] {
        let [[a, b], [c, d]] = self.linear;
        [a, b, c, d, self.translation[0], self.translation[1]]
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Self {
            linear: [[p[0], p[1]], [p[2], p[3]]],
            translation: [p[4], p[5]],
        }
    }

    pub fn determinant(&self) -> f64 {
        let [[a, b], [c, d]] = self.linear;
        a * d - b * c
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [[a, b], [c, d]] = self.linear;
        [
            a * p[0] + b * p[1] + self.translation[0],
            c * p[0] + d * p[1] + self.translation[1],
        ]
    }

    /// Euclidean reprojection error of `c.src` against `c.dst`.
    pub fn residual(&self, c: &Correspondence) -> f64 {
        self.squared_residual(c).sqrt()
    }

    fn squared_residual(&self, c: &Correspondence) -> f64 {
        let [x, y] = self.apply(c.src);
        let (dx, dy) = (x - c.dst[0], y - c.dst[1]);
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<PutativeMatch>,
    pub correspondences: Vec<Correspondence>,
    pub model: Option<AffineModel>,
    pub inliers: usize,
    /// Per-correspondence inlier flag under `model`.
    pub inlier_mask: Vec<bool>,
}

fn widen(d: &Descriptors) -> Vec<f64> {
    match d {
        Descriptors::Float { data, .. } => data.iter().map(|&x| f64::from(x)).collect(),
        Descriptors::Binary { .. } => Vec::new(),
    }
}

/// Row-major `a * b^T` inner products of float descriptors; empty for binary.
fn float_gram(a: &Descriptors, b: &Descriptors) -> Vec<f64> {
    if a.is_binary() {
        return Vec::new();
    }
    let mut gram = vec![0.0; a.len() * b.len()];
    kernels::gemm(a.len(), a.dim(), b.len(), &widen(a), false, &widen(b), true, 0.0, &mut gram);
    gram
}

fn squared_norm(d: &Descriptors, i: usize) -> f64 {
    match d {
        Descriptors::Float { .. } => d.float(i).iter().map(|&x| f64::from(x) * f64::from(x)).sum(),
        Descriptors::Binary { .. } => 0.0,
    }
}

/// Euclidean distance between the unit `±1/sqrt(dim)` vectors of two bit rows.
pub fn binary_distance(a: &[u8], b: &[u8], dim: usize) -> f64 {
    2.0 * (f64::from(hamming(a, b)) / dim as f64).sqrt()
}

/// Nearest neighbour in B of every row of A, then the ratio or distance test.
///
/// Ties for the nearest neighbour go to the lowest index in B.
pub fn putative_matches(
    a: &Descriptors,
    b: &Descriptors,
    config: &MatchConfig,
) -> Result<Vec<PutativeMatch>, MatchError> {
    if a.is_binary() != b.is_binary() {
        return Err(MatchError::MixedDescriptors);
    }
    if a.dim() != b.dim() {
        return Err(MatchError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.is_binary() && config.mode == MatchMode::Ratio {
        return Err(MatchError::RatioOnBinary);
    }
    let dim = a.dim();
    let gram = float_gram(a, b);
    let norms_b: Vec<f64> = (0..b.len()).map(|j| squared_norm(b, j)).collect();
    let mut out = Vec::new();
    for i in 0..a.len() {
        let norm_a = squared_norm(a, i);
        let distance = |j: usize| match a {
            Descriptors::Float { .. } => {
                (norm_a + norms_b[j] - 2.0 * gram[i * b.len() + j]).max(0.0).sqrt()
            }
            Descriptors::Binary { .. } => binary_distance(a.bits(i), b.bits(j), dim),
        };
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for j in 0..b.len() {
            let d = distance(j);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        if best.1 == usize::MAX {
            continue;
        }
        let keep = match config.mode {
            MatchMode::Ratio => best.0 < config.ratio_threshold * second,
            MatchMode::Distance => best.0 < config.distance_threshold,
        };
        if keep {
            out.push(PutativeMatch {
                a: i,
                b: best.1,
                distance: best.0,
            });
        }
    }
    Ok(out)
}

/// Solves the dense `n x n` system `m x = rhs` by Gaussian elimination with
/// partial pivoting; `None` when singular.
fn solve(mut m: Vec<f64>, mut rhs: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs()))?;
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|k| m[r * n + k] * x[k]).sum();
        x[r] = (rhs[r] - tail) / m[r * n + r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Rows of the 6-unknown design matrix for one correspondence.
fn design_rows(c: &Correspondence) -> [([f64; 6], f64); 2] {
    let [x, y] = c.src;
    [
        ([x, y, 0.0, 0.0, 1.0, 0.0], c.dst[0]),
        ([0.0, 0.0, x, y, 0.0, 1.0], c.dst[1]),
    ]
}

fn accept(p: Vec<f64>) -> Result<AffineModel, MatchError> {
    let model = AffineModel::from_params(p.try_into().expect("six parameters"));
    if model.determinant().abs() > MIN_DETERMINANT {
        Ok(model)
    } else {
        Err(MatchError::Degenerate)
    }
}

/// Exact affine map through three correspondences.
pub fn estimate_affine(sample: &[Correspondence; 3]) -> Result<AffineModel, MatchError> {
    let [p, q, r] = sample.map(|c| c.src);
    let area = 0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])).abs();
    if !(area > COLLINEAR_AREA) {
        return Err(MatchError::Collinear);
    }
    let mut m = Vec::with_capacity(36);
    let mut rhs = Vec::with_capacity(6);
    for c in sample {
        for (row, v) in design_rows(c) {
            m.extend_from_slice(&row);
            rhs.push(v);
        }
    }
    accept(solve(m, rhs, 6).ok_or(MatchError::Collinear)?)
}

/// Least-squares affine fit over `points` via the normal equations.
pub fn fit_affine(points: &[Correspondence]) -> Result<AffineModel, MatchError> {
    if points.len() < 3 {
        return Err(MatchError::Degenerate);
    }
    let mut ata = vec![0.0; 36];
    let mut atb = vec![0.0; 6];
    for c in points {
        for (row, v) in design_rows(c) {
            for i in 0..6 {
                atb[i] += row[i] * v;
                for j in 0..6 {
                    ata[i * 6 + j] += row[i] * row[j];
                }
            }
        }
    }
    accept(solve(ata, atb, 6).ok_or(MatchError::Degenerate)?)
}

fn inlier_mask(model: &AffineModel, points: &[Correspondence], threshold: f64) -> Vec<bool> {
    let limit = threshold * threshold;
    points.iter().map(|c| model.squared_residual(c) < limit).collect()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Best-consensus affine model: `ransac_iters` random minimal samples, then a
/// least-squares refit on the winning consensus set that is kept only when it
/// does not lose inliers.
pub fn ransac(
    points: &[Correspondence],
    config: &MatchConfig,
) -> (Option<AffineModel>, Vec<bool>) {
    let none = || (None, vec![false; points.len()]);
    if points.len() < 3 {
        return none();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let limit = config.residual_threshold * config.residual_threshold;
    let mut best: Option<(AffineModel, usize)> = None;
    for _ in 0..config.ransac_iters {
        let pick = index::sample(&mut rng, points.len(), 3);
        let sample = [points[pick.index(0)], points[pick.index(1)], points[pick.index(2)]];
        let Ok(model) = estimate_affine(&sample) else {
            continue;
        };
        let n = points.iter().filter(|c| model.squared_residual(c) < limit).count();
        if best.as_ref().is_none_or(|(_, b)| n > *b) {
            best = Some((model, n));
        }
    }
    let Some((mut model, mut n)) = best else {
        return none();
    };
    let mut mask = inlier_mask(&model, points, config.residual_threshold);
    let consensus: Vec<Correspondence> = points
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    if let Ok(refit) = fit_affine(&consensus) {
        let refit_mask = inlier_mask(&refit, points, config.residual_threshold);
        let refit_n = count(&refit_mask);
        if refit_n >= n {
            (model, mask, n) = (refit, refit_mask, refit_n);
        }
    }
    if n < config.min_inliers {
        return none();
    }
    (Some(model), mask)
}

/// Putative matching followed by geometric verification of keypoint pairs.
pub fn match_features(
    a: &LocalFeatures,
    b: &LocalFeatures,
    config: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    config.validate()?;
    let matches = putative_matches(&a.descriptors, &b.descriptors, config)?;
    let correspondences: Vec<Correspondence> = matches
        .iter()
        .map(|m| {
            let (p, q) = (a.keypoints[m.a], b.keypoints[m.b]);
            Correspondence {
                src: [f64::from(p.x), f64::from(p.y)],
                dst: [f64::from(q.x), f64::from(q.y)],
            }
        })
        .collect();
    let (model, inlier_mask) = ransac(&correspondences, config);
    Ok(MatchResult {
        inliers: count(&inlier_mask),
        matches,
        correspondences,
        model,
        inlier_mask,
    })
}

pub const DUMP_HEADER: &str = "xA\tyA\txB\tyB\tinlier";

/// One TSV line per correspondence with its inlier flag (0/1).
pub fn dump_correspondences(result: &MatchResult, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    for (c, inlier) in result.correspondences.iter().zip(&result.inlier_mask) {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            c.src[0],
            c.src[1],
            c.dst[0],
            c.dst[1],
            u8::from(*inlier)
        )?;
    }
    Ok(())
}

/// Side-by-side SVG: image A at the origin, image B to its right, one line per
/// correspondence (green inliers, red outliers).
pub fn dump_svg(
    result: &MatchResult,
    image_a: (&str, usize, usize),
    image_b: (&str, usize, usize),
    out: &mut impl Write,
) -> std::io::Result<()> {
    let (path_a, wa, ha) = image_a;
    let (path_b, wb, hb) = image_b;
    let escape = |s: &str| {
        s.replace('&', "&amp;")
            .replace('"', "&quot;")
            .replace('<', "&lt;")
    };
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{}" height="{}">"#,
        wa + wb,
        ha.max(hb)
    )?;
    writeln!(
        out,
        r#"<image xlink:href="{}" x="0" y="0" width="{wa}" height="{ha}"/>"#,
        escape(path_a)
    )?;
    writeln!(
        out,
        r#"<image xlink:href="{}" x="{wa}" y="0" width="{wb}" height="{hb}"/>"#,
        escape(path_b)
    )?;
    for (c, inlier) in result.correspondences.iter().zip(&result.inlier_mask) {
        let colour = if *inlier { "lime" } else { "red" };
        writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{colour}" stroke-width="1"/>"#,
            c.src[0],
            c.src[1],
            c.dst[0] + wa as f64,
            c.dst[1]
        )?;
    }
    writeln!(out, "</svg>")
}
