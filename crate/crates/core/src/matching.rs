//! Keypoint generation and fine matching between consecutive frames.
//!
//! Keypoints are produced by a projection matrix over a point cloud, scored
//! by feature similarity, turned into confidences by a dual softmax and
//! filtered with the mutual nearest neighbor rule.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector3};

use crate::error::{shape, Error, Result};

/// Default similarity temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default confidence threshold for accepted matches.
pub const DEFAULT_THETA_C: f64 = 0.45;
/// Default number of generated keypoints.
pub const DEFAULT_KEYPOINTS: usize = 512;
/// Default number of points per cloud.
pub const DEFAULT_CLOUD_POINTS: usize = 2048;

/// Row-aligned keypoint coordinates (n x 3, meters) and features (n x d).
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    coords: DMatrix<f64>,
    features: DMatrix<f64>,
}

impl KeypointSet {
    pub fn new(coords: DMatrix<f64>, features: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(shape("KeypointSet", "no keypoints"));
        }
        if coords.ncols() != 3 {
            return Err(shape("KeypointSet", format!("coords have {} columns", coords.ncols())));
        }
        if features.nrows() != coords.nrows() {
            return Err(shape(
                "KeypointSet",
                format!("{} coords but {} feature rows", coords.nrows(), features.nrows()),
            ));
        }
        if !coords.iter().chain(features.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("keypoint rows must be finite".into()));
        }
        Ok(Self { coords, features })
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.coords[(i, 0)], self.coords[(i, 1)], self.coords[(i, 2)])
    }

    /// One line per keypoint: index, x, y, z, then the features.
    pub fn to_record(&self) -> String {
        let mut out = format!("# keypoints n={} d={}\n", self.len(), self.feature_dim());
        for i in 0..self.len() {
            write!(out, "{i}").unwrap();
            for v in self.coords.row(i).iter().chain(self.features.row(i).iter()) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty keypoint record".into()))?;
        let (n, d) = parse_header(header, "keypoints", &["n", "d"]).map(|v| (v[0], v[1]))?;
        let mut coords = DMatrix::zeros(n, 3);
        let mut features = DMatrix::zeros(n, d);
        let mut seen = 0;
        for (row, line) in lines.enumerate() {
            if row >= n {
                return Err(Error::Format(format!("more than {n} keypoint rows")));
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 + d {
                return Err(Error::Format(format!(
                    "keypoint row {row} has {} fields, expected {}",
                    fields.len(),
                    4 + d
                )));
            }
            if fields[0].parse::<usize>().ok() != Some(row) {
                return Err(Error::Format(format!("keypoint row {row} has index {}", fields[0])));
            }
            for (k, f) in fields[1..].iter().enumerate() {
                let v = parse_f64(f)?;
                if k < 3 {
                    coords[(row, k)] = v;
                } else {
                    features[(row, k - 3)] = v;
                }
            }
            seen += 1;
        }
        if seen != n {
            return Err(Error::Format(format!("expected {n} keypoint rows, found {seen}")));
        }
        Self::new(coords, features)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("not a number: {s:?}")))
}

fn parse_header(line: &str, kind: &str, keys: &[&str]) -> Result<Vec<usize>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some(kind) {
        return Err(Error::Format(format!("expected '# {kind}' header, got {line:?}")));
    }
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let part = parts
            .next()
            .ok_or_else(|| Error::Format(format!("header missing {key}")))?;
        let value = part
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header field {part:?}")))?;
        out.push(value);
    }
    Ok(out)
}

/// `n x N` projection from a cloud to keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    m: DMatrix<f64>,
}

impl ProjectionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() > m.ncols() {
            return Err(shape(
                "ProjectionMatrix",
                format!("{} keypoints from {} points", m.nrows(), m.ncols()),
            ));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("projection matrix must be finite".into()));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// Similarity scores scaled by `1 / tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub s: DMatrix<f64>,
    pub tau: f64,
}

/// One-to-one matches `(prev index, curr index)` with their confidences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub confidences: Vec<f64>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One line per pair: `i j confidence`.
    pub fn to_record(&self) -> String {
        let mut out = format!("# matches count={}\n", self.len());
        for ((i, j), c) in self.pairs.iter().zip(&self.confidences) {
            writeln!(out, "{i} {j} {c}").unwrap();
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty match record".into()))?;
        let count = parse_header(header, "matches", &["count"])?[0];
        let mut out = MatchSet::default();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("bad match row {line:?}")));
            }
            let i = f[0].parse().map_err(|_| Error::Format(format!("bad index {:?}", f[0])))?;
            let j = f[1].parse().map_err(|_| Error::Format(format!("bad index {:?}", f[1])))?;
            out.pairs.push((i, j));
            out.confidences.push(parse_f64(f[2])?);
        }
        if out.len() != count {
            return Err(Error::Format(format!("expected {count} matches, found {}", out.len())));
        }
        Ok(out)
    }
}

/// `M x P`: each keypoint is a weighted combination of cloud points.
pub fn project_keypoints(m: &ProjectionMatrix, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if points.nrows() != m.m.ncols() || points.ncols() != 3 {
        return Err(shape(
            "project_keypoints",
            format!(
                "M is {}x{} but points are {}x{}",
                m.m.nrows(),
                m.m.ncols(),
                points.nrows(),
                points.ncols()
            ),
        ));
    }
    Ok(&m.m * points)
}

/// `S(i, j) = <f_prev[i], f_curr[j]> / tau`.
pub fn score_matrix(f_prev: &DMatrix<f64>, f_curr: &DMatrix<f64>, tau: f64) -> Result<ScoreMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if f_prev.ncols() != f_curr.ncols() {
        return Err(shape(
            "score_matrix",
            format!("feature widths {} and {}", f_prev.ncols(), f_curr.ncols()),
        ));
    }
    Ok(ScoreMatrix {
        s: f_prev * f_curr.transpose() / tau,
        tau,
    })
}

/// Rows per block in [`softmax_rows`]; a block of a 64-column matrix
/// stays cache resident across the three sweeps.
const SOFTMAX_ROW_BLOCK: usize = 256;

/// Softmax along each row, stabilized by the row maximum.
pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    // Storage is column-major: for each block of rows, sweep the column
    // segments with per-row max and sum.
    let (rows, cols) = s.shape();
    let mut out = s.clone();
    let data = out.as_mut_slice();
    let mut max = [0.0; SOFTMAX_ROW_BLOCK];
    let mut sum = [0.0; SOFTMAX_ROW_BLOCK];
    for r0 in (0..rows).step_by(SOFTMAX_ROW_BLOCK) {
        let len = SOFTMAX_ROW_BLOCK.min(rows - r0);
        let (max, sum) = (&mut max[..len], &mut sum[..len]);
        max.fill(f64::NEG_INFINITY);
        sum.fill(0.0);
        for c in 0..cols {
            let seg = &data[c * rows + r0..c * rows + r0 + len];
            for (m, v) in max.iter_mut().zip(seg) {
                *m = m.max(*v);
            }
        }
        for c in 0..cols {
            let seg = &mut data[c * rows + r0..c * rows + r0 + len];
            for ((v, m), acc) in seg.iter_mut().zip(&*max).zip(sum.iter_mut()) {
                *v = (*v - m).exp();
                *acc += *v;
            }
        }
        for c in 0..cols {
            let seg = &mut data[c * rows + r0..c * rows + r0 + len];
            for (v, acc) in seg.iter_mut().zip(&*sum) {
                *v /= acc;
            }
        }
    }
    out
}

/// Softmax along each column, stabilized by the column maximum.
pub fn softmax_cols(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut col in out.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    out
}

/// Elementwise product of the row-wise and column-wise softmaxes.
pub fn dual_softmax(s: &ScoreMatrix) -> DMatrix<f64> {
    softmax_rows(&s.s).component_mul(&softmax_cols(&s.s))
}

fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in values.enumerate() {
        // Strict comparison keeps the lowest index on ties.
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Keeps `(i, j)` when it is the maximum of both its row and its column and
/// reaches `theta_c`. Ties go to the lowest index.
pub fn mnn_filter(p_c: &DMatrix<f64>, theta_c: f64) -> MatchSet {
    let col_best: Vec<usize> = p_c.column_iter().map(|c| argmax(c.iter())).collect();
    let mut out = MatchSet::default();
    for (i, row) in p_c.row_iter().enumerate() {
        if row.is_empty() {
            continue;
        }
        let j = argmax(row.iter());
        let c = p_c[(i, j)];
        if col_best[j] == i && c >= theta_c {
            out.pairs.push((i, j));
            out.confidences.push(c);
        }
    }
    out
}

/// Scores, dual softmax and MNN filter in one call.
pub fn match_keypoints(
    prev: &KeypointSet,
    curr: &KeypointSet,
    tau: f64,
    theta_c: f64,
) -> Result<MatchSet> {
    let s = score_matrix(prev.features(), curr.features(), tau)?;
    Ok(mnn_filter(&dual_softmax(&s), theta_c))
}
