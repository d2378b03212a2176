//! Training losses and their gradients with respect to keypoint coordinates.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{shape, Error, Result};
use crate::geometry::{Pose, Rotation};
use crate::matching::MatchSet;

/// Probability floor in the matching log-likelihood.
pub const MATCH_EPSILON: f64 = 1e-12;

fn row3(m: &DMatrix<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)])
}

fn check_points(op: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::Domain(format!("{op}: empty point set")));
    }
    if m.ncols() != 3 {
        return Err(shape(op, format!("points have {} columns", m.ncols())));
    }
    Ok(())
}

fn check_aligned(op: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    check_points(op, a)?;
    check_points(op, b)?;
    if a.nrows() != b.nrows() {
        return Err(shape(op, format!("{} vs {} keypoints", a.nrows(), b.nrows())));
    }
    Ok(())
}

/// Index and squared distance of the closest row of `set` to `p`; lowest
/// index on ties.
fn closest(set: &DMatrix<f64>, p: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..set.nrows() {
        let d = (row3(set, j) - p).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Symmetric Chamfer distance between the prior and the keypoints.
pub fn loss_aux(prior: &DMatrix<f64>, keypoints: &DMatrix<f64>) -> Result<f64> {
    loss_aux_with_grad(prior, keypoints).map(|(l, _)| l)
}

/// Chamfer distance and its gradient with respect to the keypoints.
pub fn loss_aux_with_grad(prior: &DMatrix<f64>, keypoints: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    check_points("loss_aux", prior)?;
    check_points("loss_aux", keypoints)?;
    let mut grad = DMatrix::zeros(keypoints.nrows(), 3);
    let mut loss = 0.0;
    for i in 0..prior.nrows() {
        let p = row3(prior, i);
        let (k, d) = closest(keypoints, &p);
        loss += d;
        let g = (row3(keypoints, k) - p) * 2.0;
        for c in 0..3 {
            grad[(k, c)] += g[c];
        }
    }
    for k in 0..keypoints.nrows() {
        let q = row3(keypoints, k);
        let (j, d) = closest(prior, &q);
        loss += d;
        let g = (q - row3(prior, j)) * 2.0;
        for c in 0..3 {
            grad[(k, c)] += g[c];
        }
    }
    Ok((loss, grad))
}

/// Mean distance between current keypoints and the previous keypoints moved
/// by the ground-truth inter-frame pose.
pub fn loss_mvc(k_prev: &DMatrix<f64>, k_curr: &DMatrix<f64>, gt_delta: &Pose) -> Result<f64> {
    loss_mvc_with_grad(k_prev, k_curr, gt_delta).map(|(l, _)| l)
}

/// [`loss_mvc`] and its gradient with respect to `k_curr`. Rows with zero
/// residual get a zero subgradient.
pub fn loss_mvc_with_grad(k_prev: &DMatrix<f64>, k_curr: &DMatrix<f64>, gt_delta: &Pose) -> Result<(f64, DMatrix<f64>)> {
    check_aligned("loss_mvc", k_prev, k_curr)?;
    let n = k_prev.nrows() as f64;
    let mut grad = DMatrix::zeros(k_curr.nrows(), 3);
    let mut loss = 0.0;
    for i in 0..k_prev.nrows() {
        let r = row3(k_curr, i) - gt_delta.transform_point(&row3(k_prev, i));
        let norm = r.norm();
        loss += norm;
        if norm > 0.0 {
            for c in 0..3 {
                grad[(i, c)] = r[c] / (norm * n);
            }
        }
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingLoss {
    pub value: f64,
    /// Ground-truth cells whose probability was raised to the floor.
    pub clamped: usize,
}

/// `-(1/|M|) sum log p_c(i, j)` over the ground-truth matches.
pub fn loss_matching(p_c: &DMatrix<f64>, gt_matches: &MatchSet) -> Result<MatchingLoss> {
    check_matches(p_c, gt_matches)?;
    let mut sum = 0.0;
    let mut clamped = 0;
    for &(i, j) in &gt_matches.pairs {
        let p = p_c[(i, j)];
        if p < MATCH_EPSILON {
            clamped += 1;
        }
        sum += p.max(MATCH_EPSILON).ln();
    }
    Ok(MatchingLoss {
        value: -sum / gt_matches.len() as f64,
        clamped,
    })
}

/// Gradient of [`loss_matching`] with respect to `p_c`.
pub fn loss_matching_grad(p_c: &DMatrix<f64>, gt_matches: &MatchSet) -> Result<DMatrix<f64>> {
    check_matches(p_c, gt_matches)?;
    let m = gt_matches.len() as f64;
    let mut grad = DMatrix::zeros(p_c.nrows(), p_c.ncols());
    for &(i, j) in &gt_matches.pairs {
        let p = p_c[(i, j)];
        if p >= MATCH_EPSILON {
            grad[(i, j)] -= 1.0 / (m * p);
        }
    }
    Ok(grad)
}

fn check_matches(p_c: &DMatrix<f64>, gt: &MatchSet) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Domain("no ground-truth matches".into()));
    }
    if let Some(&(i, j)) = gt.pairs.iter().find(|(i, j)| *i >= p_c.nrows() || *j >= p_c.ncols()) {
        return Err(shape(
            "loss_matching",
            format!("match ({i}, {j}) outside {}x{}", p_c.nrows(), p_c.ncols()),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseLoss {
    /// `|mean(k_curr - k_prev) - T_gt|`, meters.
    pub translation: f64,
    /// Geodesic angle between the rotations, radians.
    pub rotation: f64,
    /// The chordal argument exceeded 1 and was clamped.
    pub clamped: bool,
}

/// `2 asin(|A - B|_F / (2 sqrt 2))` and whether the argument was clamped.
pub fn rotation_loss(a: &Matrix3<f64>, b: &Matrix3<f64>) -> (f64, bool) {
    let x = (a - b).norm() / (2.0 * std::f64::consts::SQRT_2);
    let clamped = x > 1.0;
    (2.0 * x.min(1.0).asin(), clamped)
}

/// Gradient of [`rotation_loss`] with respect to the entries of `a`.
pub fn rotation_loss_grad(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix3<f64> {
    let diff = a - b;
    let norm = diff.norm();
    let x = norm / (2.0 * std::f64::consts::SQRT_2);
    if norm == 0.0 || x >= 1.0 {
        return Matrix3::zeros();
    }
    diff * (2.0 / (1.0 - x * x).sqrt() / (2.0 * std::f64::consts::SQRT_2 * norm))
}

pub fn loss_pose(k_prev: &DMatrix<f64>, k_curr: &DMatrix<f64>, delta_r: &Rotation, gt_delta: &Pose) -> Result<PoseLoss> {
    let (translation, _) = translation_loss_with_grad(k_prev, k_curr, gt_delta)?;
    let (rotation, clamped) = rotation_loss(delta_r.matrix(), gt_delta.r.matrix());
    Ok(PoseLoss {
        translation,
        rotation,
        clamped,
    })
}

/// Translation part of [`loss_pose`] and its gradient with respect to
/// `k_curr`.
pub fn translation_loss_with_grad(k_prev: &DMatrix<f64>, k_curr: &DMatrix<f64>, gt_delta: &Pose) -> Result<(f64, DMatrix<f64>)> {
    check_aligned("loss_pose", k_prev, k_curr)?;
    let n = k_prev.nrows() as f64;
    let mean = (0..k_prev.nrows()).fold(Vector3::zeros(), |acc, i| acc + row3(k_curr, i) - row3(k_prev, i)) / n;
    let r = mean - gt_delta.t;
    let norm = r.norm();
    let mut grad = DMatrix::zeros(k_curr.nrows(), 3);
    if norm > 0.0 {
        for i in 0..k_curr.nrows() {
            for c in 0..3 {
                grad[(i, c)] = r[c] / (norm * n);
            }
        }
    }
    Ok((norm, grad))
}

/// Weights of the total training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub mvc: f64,
    pub matching: f64,
    pub translation: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aux: 1.0,
            mvc: 1.0,
            matching: 1.0,
            translation: 1.0,
            rotation: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossTerms {
    pub aux: f64,
    pub mvc: f64,
    pub matching: f64,
    pub translation: f64,
    pub rotation: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.aux * self.aux
            + w.mvc * self.mvc
            + w.matching * self.matching
            + w.translation * self.translation
            + w.rotation * self.rotation
    }
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &DMatrix<f64>, h: f64, mut f: impl FnMut(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const FLOOR: f64 = 1e-4;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        Pose::new(Rotation::about(&axis, rng.random_range(0.0..PI)), Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
    }

    fn moved(k: &DMatrix<f64>, pose: &Pose) -> DMatrix<f64> {
        let mut out = k.clone();
        for i in 0..k.nrows() {
            let p = pose.transform_point(&row3(k, i));
            for c in 0..3 {
                out[(i, c)] = p[c];
            }
        }
        out
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_points(&mut rng, 10);
        assert_eq!(loss_aux(&p, &p).unwrap(), 0.0);
        let a = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert_eq!(loss_aux(&a, &b).unwrap(), 2.0);
        assert!(loss_aux(&DMatrix::zeros(0, 3), &b).is_err());
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let prior = rand_points(&mut rng, 40);
            let kp = rand_points(&mut rng, 9);
            let mut oracle = 0.0;
            for i in 0..40 {
                let mut best = f64::INFINITY;
                for k in 0..9 {
                    let d: f64 = (0..3).map(|c| (prior[(i, c)] - kp[(k, c)]).powi(2)).sum();
                    best = best.min(d);
                }
                oracle += best;
            }
            for k in 0..9 {
                let mut best = f64::INFINITY;
                for i in 0..40 {
                    let d: f64 = (0..3).map(|c| (prior[(i, c)] - kp[(k, c)]).powi(2)).sum();
                    best = best.min(d);
                }
                oracle += best;
            }
            assert!((loss_aux(&prior, &kp).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = rand_points(&mut rng, 30);
        let kp = rand_points(&mut rng, 8);
        let (_, g) = loss_aux_with_grad(&prior, &kp).unwrap();
        let fd = numeric_gradient(&kp, 1e-6, |k| loss_aux(&prior, k).unwrap());
        assert!(max_relative_error(g.as_slice(), fd.as_slice(), FLOOR) < 1e-4);
    }

    #[test]
    fn mvc_examples_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prev = rand_points(&mut rng, 12);
        let pose = random_pose(&mut rng);
        assert_eq!(loss_mvc(&prev, &moved(&prev, &pose), &pose).unwrap(), 0.0);

        let one = DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]);
        let mut off = moved(&one, &pose);
        off[(0, 0)] += 0.3;
        assert!((loss_mvc(&one, &off, &pose).unwrap() - 0.3).abs() < 1e-12);

        let curr = rand_points(&mut rng, 12);
        let (_, g) = loss_mvc_with_grad(&prev, &curr, &pose).unwrap();
        let fd = numeric_gradient(&curr, 1e-6, |k| loss_mvc(&prev, k, &pose).unwrap());
        assert!(max_relative_error(g.as_slice(), fd.as_slice(), FLOOR) < 1e-4);
    }

    #[test]
    fn matching_loss_examples() {
        let gt = MatchSet { pairs: vec![(0, 1), (1, 0)], confidences: vec![1.0, 1.0] };
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l = loss_matching(&p, &gt).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.clamped, 0);

        let single = MatchSet { pairs: vec![(0, 0)], confidences: vec![1.0] };
        let p = DMatrix::from_element(1, 1, (-1f64).exp());
        assert!((loss_matching(&p, &single).unwrap().value - 1.0).abs() < 1e-15);

        let zero = DMatrix::from_element(1, 1, 0.0);
        let l = loss_matching(&zero, &single).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + MATCH_EPSILON.ln()).abs() < 1e-12);
        assert!(loss_matching(&zero, &MatchSet::default()).is_err());
    }

    #[test]
    fn matching_loss_matches_summation_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: DMatrix<f64> = DMatrix::from_fn(8, 8, |_, _| rng.random_range(0.01..1.0));
        let gt = MatchSet { pairs: (0..8).map(|i| (i, (i * 3) % 8)).collect(), confidences: vec![1.0; 8] };
        let mut oracle = 0.0;
        for &(i, j) in &gt.pairs {
            oracle -= p[(i, j)].ln();
        }
        oracle /= 8.0;
        assert!((loss_matching(&p, &gt).unwrap().value - oracle).abs() < 1e-12);
        let g = loss_matching_grad(&p, &gt).unwrap();
        let fd = numeric_gradient(&p, 1e-6, |m| loss_matching(m, &gt).unwrap().value);
        assert!(max_relative_error(g.as_slice(), fd.as_slice(), FLOOR) < 1e-4);
    }

    #[test]
    fn pose_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Dyadic values keep the displacement arithmetic exact.
        let prev = rand_points(&mut rng, 10).map(|v| (v * 8.0).round() / 8.0);
        let pose = Pose::new(random_pose(&mut rng).r, Vector3::new(0.125, -0.25, 0.5));
        let curr = DMatrix::from_fn(10, 3, |i, c| prev[(i, c)] + pose.t[c]);
        let l = loss_pose(&prev, &curr, &pose.r, &pose).unwrap();
        assert_eq!((l.translation, l.rotation), (0.0, 0.0));

        let d = Vector3::new(0.3, 0.0, -0.4);
        let shifted = DMatrix::from_fn(10, 3, |i, c| prev[(i, c)] + d[c]);
        let l = loss_pose(&prev, &shifted, &Rotation::identity(), &Pose::identity()).unwrap();
        assert!((l.translation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_loss_is_geodesic_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_pose(&mut rng).r;
            let b = random_pose(&mut rng).r;
            let (l, clamped) = rotation_loss(a.matrix(), b.matrix());
            assert!(!clamped);
            assert!((l - rotation_distance(&a, &b)).abs() < 1e-9);
        }
        let far = Matrix3::identity() * 10.0;
        assert!(rotation_loss(&far, &Matrix3::identity()).1);
    }

    #[test]
    fn pose_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prev = rand_points(&mut rng, 6);
        let curr = rand_points(&mut rng, 6);
        let pose = random_pose(&mut rng);
        let (_, g) = translation_loss_with_grad(&prev, &curr, &pose).unwrap();
        let fd = numeric_gradient(&curr, 1e-6, |k| translation_loss_with_grad(&prev, k, &pose).unwrap().0);
        assert!(max_relative_error(g.as_slice(), fd.as_slice(), FLOOR) < 1e-4);

        let a = random_pose(&mut rng).r;
        let b = Rotation::about(&Vector3::new(0.3, 0.2, 0.9), 1.0).compose(&a);
        let g = rotation_loss_grad(a.matrix(), b.matrix());
        let x = DMatrix::from_column_slice(3, 3, a.matrix().as_slice());
        let fd = numeric_gradient(&x, 1e-6, |m| {
            rotation_loss(&Matrix3::from_column_slice(m.as_slice()), b.matrix()).0
        });
        assert!(max_relative_error(g.as_slice(), fd.as_slice(), FLOOR) < 1e-4);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let t = LossTerms { aux: 1.0, mvc: 2.0, matching: 3.0, translation: 4.0, rotation: 5.0 };
        assert_eq!(t.total(&LossWeights::default()), 15.0);
        let w = LossWeights { rotation: 0.0, ..Default::default() };
        assert_eq!(t.total(&w), 10.0);
    }
}
