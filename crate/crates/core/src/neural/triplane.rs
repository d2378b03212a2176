//! Axis-aligned feature planes queried by nearest-neighbor lookup.

use nalgebra::DMatrix;

use super::ops::{check_features, hconcat, FeatureMatrix};
use super::weights::BlockWeights;
use crate::error::{shape, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneAxis {
    Xy,
    Yz,
    Xz,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Yz, PlaneAxis::Xz];

    pub fn project(self, p: [f64; 3]) -> [f64; 2] {
        match self {
            PlaneAxis::Xy => [p[0], p[1]],
            PlaneAxis::Yz => [p[1], p[2]],
            PlaneAxis::Xz => [p[0], p[2]],
        }
    }
}

/// Uniform bucket grid over the plane range.
#[derive(Clone, Debug, PartialEq)]
struct Grid {
    cells: [usize; 2],
    size: [f64; 2],
    buckets: Vec<Vec<usize>>,
}

/// Stored samples of one plane: 2D positions and `d_T` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlane {
    pub axis: PlaneAxis,
    pub coords: Vec<[f64; 2]>,
    pub features: DMatrix<f64>,
    pub min: [f64; 2],
    pub max: [f64; 2],
    grid: Grid,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

impl FeaturePlane {
    /// Plane whose range is the bounding box of its samples.
    pub fn new(axis: PlaneAxis, coords: Vec<[f64; 2]>, features: DMatrix<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(shape("FeaturePlane", "no samples"));
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for c in &coords {
            for k in 0..2 {
                min[k] = min[k].min(c[k]);
                max[k] = max[k].max(c[k]);
            }
        }
        Self::with_range(axis, coords, features, min, max)
    }

    pub fn with_range(
        axis: PlaneAxis,
        coords: Vec<[f64; 2]>,
        features: DMatrix<f64>,
        min: [f64; 2],
        max: [f64; 2],
    ) -> Result<Self> {
        if coords.is_empty() || coords.len() != features.nrows() {
            return Err(shape(
                "FeaturePlane",
                format!("{} samples vs {} feature rows", coords.len(), features.nrows()),
            ));
        }
        let finite = coords.iter().flatten().chain(features.iter()).chain(&min).chain(&max);
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("plane samples must be finite".into()));
        }
        if min[0] > max[0] || min[1] > max[1] {
            return Err(Error::Domain("plane range is inverted".into()));
        }
        if coords.iter().any(|c| (0..2).any(|k| c[k] < min[k] || c[k] > max[k])) {
            return Err(Error::Domain("plane samples must lie inside the range".into()));
        }
        let side = (coords.len() as f64).sqrt().ceil().max(1.0) as usize;
        let cells = [side, side];
        let size = [0, 1].map(|k| {
            let extent = max[k] - min[k];
            if extent > 0.0 { extent / side as f64 } else { 1.0 }
        });
        let mut grid = Grid {
            cells,
            size,
            buckets: vec![Vec::new(); side * side],
        };
        for (i, c) in coords.iter().enumerate() {
            let cell = Self::cell_of(&grid, &min, *c);
            grid.buckets[cell[1] * side + cell[0]].push(i);
        }
        Ok(Self {
            axis,
            coords,
            features,
            min,
            max,
            grid,
        })
    }

    fn cell_of(grid: &Grid, min: &[f64; 2], p: [f64; 2]) -> [usize; 2] {
        [0, 1].map(|k| {
            let c = ((p[k] - min[k]) / grid.size[k]).floor();
            (c.max(0.0) as usize).min(grid.cells[k] - 1)
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Clamps `p` into the plane range; the flag is set when it moved.
    pub fn clamp(&self, p: [f64; 2]) -> ([f64; 2], bool) {
        let q = [0, 1].map(|k| p[k].clamp(self.min[k], self.max[k]));
        (q, q != p)
    }

    /// Index of the closest sample, lowest index on ties.
    pub fn nearest(&self, p: [f64; 2]) -> usize {
        let g = &self.grid;
        let home = Self::cell_of(g, &self.min, p);
        let step = g.size[0].min(g.size[1]);
        let max_ring = g.cells[0].max(g.cells[1]);
        let mut best: Option<(f64, usize)> = None;
        for ring in 0..=max_ring {
            let lo = [0, 1].map(|k| home[k] as isize - ring as isize);
            let hi = [0, 1].map(|k| home[k] as isize + ring as isize);
            for cy in lo[1]..=hi[1] {
                for cx in lo[0]..=hi[0] {
                    let on_ring = cx == lo[0] || cx == hi[0] || cy == lo[1] || cy == hi[1];
                    if !on_ring || cx < 0 || cy < 0 {
                        continue;
                    }
                    let (cx, cy) = (cx as usize, cy as usize);
                    if cx >= g.cells[0] || cy >= g.cells[1] {
                        continue;
                    }
                    for &i in &g.buckets[cy * g.cells[0] + cx] {
                        let d = dist2(p, self.coords[i]);
                        if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                            best = Some((d, i));
                        }
                    }
                }
            }
            // Cells on the next ring are at least `ring` cells away.
            if let Some((bd, _)) = best {
                let bound = ring as f64 * step;
                if bound * bound > bd {
                    break;
                }
            }
        }
        best.expect("plane has samples").1
    }
}

/// The three planes `T_XY`, `T_YZ`, `T_XZ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneFeatures {
    pub planes: [FeaturePlane; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneSample {
    /// `n x 3 d_T`, plane features concatenated in XY, YZ, XZ order.
    pub features: DMatrix<f64>,
    /// Selected sample index per keypoint and plane.
    pub selections: Vec<[usize; 3]>,
    /// Keypoints that had to be clamped into at least one plane range.
    pub clamped: Vec<bool>,
}

impl TriplaneFeatures {
    pub fn new(planes: [FeaturePlane; 3]) -> Result<Self> {
        let d = planes[0].feature_dim();
        if planes.iter().any(|p| p.feature_dim() != d) {
            return Err(shape("TriplaneFeatures", "planes disagree on d_T"));
        }
        for (p, axis) in planes.iter().zip(PlaneAxis::ALL) {
            if p.axis != axis {
                return Err(shape("TriplaneFeatures", "planes must be ordered XY, YZ, XZ"));
            }
        }
        Ok(Self { planes })
    }

    /// Projects the points onto each plane and attaches per-plane linear
    /// maps of `[F_obj | F_temp | F_aug]`.
    pub fn build(
        points: &DMatrix<f64>,
        f_obj: &FeatureMatrix,
        f_temp: &FeatureMatrix,
        f_aug: &FeatureMatrix,
        w: &BlockWeights,
    ) -> Result<Self> {
        check_features("triplane", points)?;
        if points.ncols() != 3 {
            return Err(shape("triplane", format!("points have {} columns", points.ncols())));
        }
        for f in [f_obj, f_temp, f_aug] {
            if f.nrows() != points.nrows() {
                return Err(shape("triplane", "features and points must be row-aligned"));
            }
        }
        let joined = hconcat(&hconcat(f_obj, f_temp), f_aug);
        let mut planes = Vec::with_capacity(3);
        for (axis, lin) in PlaneAxis::ALL.into_iter().zip(&w.triplane.planes) {
            lin.check_input("triplane", &joined)?;
            let coords = (0..points.nrows())
                .map(|i| axis.project([points[(i, 0)], points[(i, 1)], points[(i, 2)]]))
                .collect();
            planes.push(FeaturePlane::new(axis, coords, lin.forward(&joined))?);
        }
        let planes: [FeaturePlane; 3] = planes.try_into().expect("three planes");
        Self::new(planes)
    }
}

/// Nearest-sample lookup of every keypoint on each plane; the three
/// `d_T` vectors are concatenated.
pub fn triplane_sample(planes: &TriplaneFeatures, keypoints: &DMatrix<f64>) -> Result<TriplaneSample> {
    if keypoints.ncols() != 3 {
        return Err(shape("triplane_sample", format!("keypoints have {} columns", keypoints.ncols())));
    }
    if !keypoints.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("keypoints must be finite".into()));
    }
    let d_t = planes.planes[0].feature_dim();
    let n = keypoints.nrows();
    let mut out = TriplaneSample {
        features: DMatrix::zeros(n, 3 * d_t),
        selections: Vec::with_capacity(n),
        clamped: Vec::with_capacity(n),
    };
    for i in 0..n {
        let p = [keypoints[(i, 0)], keypoints[(i, 1)], keypoints[(i, 2)]];
        let mut sel = [0; 3];
        let mut clamped = false;
        for (k, plane) in planes.planes.iter().enumerate() {
            let (q, moved) = plane.clamp(plane.axis.project(p));
            clamped |= moved;
            sel[k] = plane.nearest(q);
            out.features
                .view_mut((i, k * d_t), (1, d_t))
                .copy_from(&plane.features.row(sel[k]));
        }
        out.selections.push(sel);
        out.clamped.push(clamped);
    }
    Ok(out)
}
