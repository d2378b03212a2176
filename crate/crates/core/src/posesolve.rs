//! Inter-frame pose recovery from matched 3D keypoints.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Error, Result};
use crate::geometry::{Pose, Rotation};

/// Matched keypoints of the previous and current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub prev: Vec<Vector3<f64>>,
    pub curr: Vec<Vector3<f64>>,
    /// Optional per-pair weights in `[0, 1]`.
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(prev: Vec<Vector3<f64>>, curr: Vec<Vector3<f64>>) -> Result<Self> {
        Self::weighted(prev, curr, None)
    }

    pub fn weighted(
        prev: Vec<Vector3<f64>>,
        curr: Vec<Vector3<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if prev.len() != curr.len() {
            return Err(shape(
                "CorrespondenceSet",
                format!("{} previous vs {} current points", prev.len(), curr.len()),
            ));
        }
        if let Some(w) = &weights {
            if w.len() != prev.len() {
                return Err(shape("CorrespondenceSet", format!("{} weights", w.len())));
            }
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain("weights must lie in [0, 1]".into()));
            }
        }
        Ok(Self {
            prev,
            curr,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn subset(&self, idx: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet {
            prev: idx.iter().map(|&i| self.prev[i]).collect(),
            curr: idx.iter().map(|&i| self.curr[i]).collect(),
            weights: self
                .weights
                .as_ref()
                .map(|w| idx.iter().map(|&i| w[i]).collect()),
        }
    }

    /// `|R prev_i + t - curr_i|`.
    pub fn residual(&self, pose: &Pose, i: usize) -> f64 {
        (pose.transform_point(&self.prev[i]) - self.curr[i]).norm()
    }
}

/// Mean displacement `(1/m) sum(curr_i - prev_i)`.
pub fn estimate_translation(c: &CorrespondenceSet) -> Result<Vector3<f64>> {
    if c.is_empty() {
        return Err(Error::Domain("no correspondences".into()));
    }
    let sum = c
        .prev
        .iter()
        .zip(&c.curr)
        .fold(Vector3::zeros(), |acc, (p, q)| acc + (q - p));
    Ok(sum / c.len() as f64)
}

/// Weighted least-squares rigid transform taking `prev` onto `curr`.
///
/// Solved through the SVD of the cross-covariance, with the sign of the
/// weakest direction flipped when needed so the result is a proper rotation.
pub fn rigid_align(c: &CorrespondenceSet) -> Result<Pose> {
    if c.len() < 3 {
        return Err(Error::Domain(format!(
            "rigid alignment needs 3 pairs, got {}",
            c.len()
        )));
    }
    let total: f64 = (0..c.len()).map(|i| c.weight(i)).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let (mut mp, mut mq) = (Vector3::zeros(), Vector3::zeros());
    for i in 0..c.len() {
        mp += c.prev[i] * c.weight(i);
        mq += c.curr[i] * c.weight(i);
    }
    mp /= total;
    mq /= total;

    let mut h = Matrix3::zeros();
    for i in 0..c.len() {
        h += (c.prev[i] - mp) * (c.curr[i] - mq).transpose() * c.weight(i);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[0]] > 0.0) || s[order[1]] <= 1e-12 * s[order[0]] {
        return Err(Error::Degenerate(
            "correspondences are collinear or coincident".into(),
        ));
    }

    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(v * d * u.transpose()).renormalized();
    let t = mq - r.apply(&mp);
    Ok(Pose::new(r, t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustSolveParams {
    pub max_iterations: usize,
    /// Inlier residual bound, meters.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl RobustSolveParams {
    pub fn new(max_iterations: usize, inlier_threshold: f64, min_inliers: usize, rng_seed: u64) -> Result<Self> {
        let p = Self {
            max_iterations,
            inlier_threshold,
            min_inliers,
            rng_seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Domain("max_iterations must be positive".into()));
        }
        let th = self.inlier_threshold;
        if !(th > 0.0 && th.is_finite()) {
            return Err(Error::Domain("inlier_threshold must be positive".into()));
        }
        if self.min_inliers < 3 {
            return Err(Error::Domain("min_inliers must be at least 3".into()));
        }
        Ok(())
    }
}

impl Default for RobustSolveParams {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 0.005,
            min_inliers: 12,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustSolution {
    pub pose: Pose,
    /// Consensus set `pose` was fit to.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Inlier count of the best minimal-sample model.
    pub best_sample_inliers: usize,
    /// Minimal samples that produced a model.
    pub models_evaluated: usize,
}

fn inlier_mask(c: &CorrespondenceSet, pose: &Pose, threshold: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = (0..c.len()).map(|i| c.residual(pose, i) < threshold).collect();
    let count = mask.iter().filter(|&&b| b).count();
    (mask, count)
}

/// Least-squares refits after the sample search.
const MAX_REFITS: usize = 8;

/// RANSAC over 3-pair samples followed by a refit on the consensus set.
///
/// The returned consensus set is never smaller than the best sample's.
pub fn robust_solve(c: &CorrespondenceSet, params: &RobustSolveParams) -> Result<RobustSolution> {
    params.validate()?;
    if c.len() < params.min_inliers {
        return Err(Error::Domain(format!(
            "{} correspondences, at least {} required",
            c.len(),
            params.min_inliers
        )));
    }
    let threshold = params.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(Pose, Vec<bool>, usize)> = None;
    let mut models = 0;
    for _ in 0..params.max_iterations {
        let idx = rand::seq::index::sample(&mut rng, c.len(), 3).into_vec();
        let Ok(model) = rigid_align(&c.subset(&idx)) else {
            continue;
        };
        models += 1;
        let (mask, count) = inlier_mask(c, &model, threshold);
        if best.as_ref().is_none_or(|b| count > b.2) {
            best = Some((model, mask, count));
            if count == c.len() {
                break;
            }
        }
    }
    let Some((mut pose, mut mask, mut count)) = best else {
        return Err(Error::SolveFailed {
            found: 0,
            required: params.min_inliers,
        });
    };
    let best_sample_inliers = count;
    if count < params.min_inliers {
        return Err(Error::SolveFailed {
            found: count,
            required: params.min_inliers,
        });
    }

    // Least-squares refit on the consensus set, which absorbs any pairs the
    // refit adds and never drops pairs. A noise-tail pair that a lucky
    // sample covered can sit just past the threshold under the refit; it
    // stays in the reported set so the support never falls below the best
    // sample's.
    for _ in 0..MAX_REFITS {
        let idx: Vec<usize> = (0..c.len()).filter(|&i| mask[i]).collect();
        let Ok(refit) = rigid_align(&c.subset(&idx)) else {
            break;
        };
        pose = refit;
        let (new_mask, _) = inlier_mask(c, &pose, threshold);
        let mut grew = false;
        for (m, n) in mask.iter_mut().zip(new_mask) {
            if n && !*m {
                *m = true;
                count += 1;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }

    Ok(RobustSolution {
        pose,
        inliers: mask,
        inlier_count: count,
        best_sample_inliers,
        models_evaluated: models,
    })
}

/// `delta * previous`, re-orthonormalized when drift exceeds tolerance.
pub fn accumulate_pose(delta: &Pose, previous: &Pose) -> Pose {
    delta.compose(previous).renormalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_distance;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose::new(
            Rotation::about(&axis, rng.random_range(0.0..PI)),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        )
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
            .collect()
    }

    fn moved(points: &[Vector3<f64>], pose: &Pose) -> Vec<Vector3<f64>> {
        points.iter().map(|p| pose.transform_point(p)).collect()
    }

    #[test]
    fn translation_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cloud(&mut rng, 20, 1.0);
        let same = CorrespondenceSet::new(p.clone(), p.clone()).unwrap();
        assert_eq!(estimate_translation(&same).unwrap(), Vector3::zeros());
        let shift = Vector3::new(1.0, 2.0, 3.0);
        let c = CorrespondenceSet::new(p.clone(), p.iter().map(|x| x + shift).collect()).unwrap();
        assert!((estimate_translation(&c).unwrap() - shift).amax() < 1e-12);

        let q = cloud(&mut rng, 20, 1.0);
        let c = CorrespondenceSet::new(p.clone(), q.clone()).unwrap();
        let mut oracle = [0.0; 3];
        for i in 0..20 {
            for k in 0..3 {
                oracle[k] += q[i][k] - p[i][k];
            }
        }
        let est = estimate_translation(&c).unwrap();
        for k in 0..3 {
            assert!((est[k] - oracle[k] / 20.0).abs() < 1e-12);
        }
        let empty = CorrespondenceSet::new(vec![], vec![]).unwrap();
        assert!(matches!(estimate_translation(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn rigid_align_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = cloud(&mut rng, 30, 0.5);
        let id = rigid_align(&CorrespondenceSet::new(p.clone(), p.clone()).unwrap()).unwrap();
        assert!((id.r.matrix() - Matrix3::identity()).amax() < 1e-12);
        assert!(id.t.amax() < 1e-12);
        for _ in 0..50 {
            let truth = random_pose(&mut rng);
            let est = rigid_align(&CorrespondenceSet::new(p.clone(), moved(&p, &truth)).unwrap()).unwrap();
            assert!((est.r.matrix() - truth.r.matrix()).amax() < 1e-9);
            assert!((est.t - truth.t).amax() < 1e-9);
        }
    }

    #[test]
    fn rigid_align_rejects_degenerate_sets() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = CorrespondenceSet::new(line.clone(), line).unwrap();
        assert!(matches!(rigid_align(&c), Err(Error::Degenerate(_))));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(rigid_align(&CorrespondenceSet::new(two.clone(), two).unwrap()).is_err());
    }

    #[test]
    fn rigid_align_never_returns_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = cloud(&mut rng, 10, 1.0);
            let mirrored: Vec<_> = p.iter().map(|x| Vector3::new(-x.x, x.y, x.z)).collect();
            let est = rigid_align(&CorrespondenceSet::new(p, mirrored).unwrap()).unwrap();
            assert!((est.r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_align_noise_accuracy() {
        let normal = Normal::new(0.0, 1e-3).unwrap();
        let mut rot_errs = Vec::new();
        let mut trans_errs = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = cloud(&mut rng, 512, 0.5);
            let truth = random_pose(&mut rng);
            let q: Vec<_> = moved(&p, &truth)
                .into_iter()
                .map(|x| x + Vector3::from_fn(|_, _| normal.sample(&mut rng)))
                .collect();
            let est = rigid_align(&CorrespondenceSet::new(p, q).unwrap()).unwrap();
            rot_errs.push(rotation_distance(&est.r, &truth.r).to_degrees());
            trans_errs.push((est.t - truth.t).norm());
        }
        rot_errs.sort_by(f64::total_cmp);
        trans_errs.sort_by(f64::total_cmp);
        assert!(rot_errs[94] < 0.05, "rotation p95 {}", rot_errs[94]);
        assert!(trans_errs[94] < 5e-4, "translation p95 {}", trans_errs[94]);
    }

    proptest! {
        #[test]
        fn rigid_align_conjugation_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 12, 1.0);
            let truth = random_pose(&mut rng);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let q: Vec<_> = moved(&p, &truth).into_iter().map(|x| x + Vector3::from_fn(|_, _| noise.sample(&mut rng))).collect();
            let base = rigid_align(&CorrespondenceSet::new(p.clone(), q.clone()).unwrap()).unwrap();
            let g = Pose::from_rotation(random_pose(&mut rng).r);
            let rotated = rigid_align(&CorrespondenceSet::new(moved(&p, &g), moved(&q, &g)).unwrap()).unwrap();
            let expected = g.r.matrix() * base.r.matrix() * g.r.matrix().transpose();
            prop_assert!((rotated.r.matrix() - expected).amax() < 1e-9);
        }
    }

    fn planted(seed: u64, n: usize, outlier_ratio: f64, sigma: f64) -> (CorrespondenceSet, Pose, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cloud(&mut rng, n, 0.15);
        let truth = random_pose(&mut rng);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut q = moved(&p, &truth);
        let mut is_inlier = vec![true; n];
        for (i, x) in q.iter_mut().enumerate() {
            if rng.random::<f64>() < outlier_ratio {
                *x = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) + truth.t;
                is_inlier[i] = false;
            } else {
                *x += Vector3::from_fn(|_, _| normal.sample(&mut rng));
            }
        }
        (CorrespondenceSet::new(p, q).unwrap(), truth, is_inlier)
    }

    #[test]
    fn robust_solve_exact_matches_rigid_align() {
        let (c, _, _) = planted(7, 64, 0.0, 0.0);
        let sol = robust_solve(&c, &RobustSolveParams::default()).unwrap();
        assert_eq!(sol.pose, rigid_align(&c).unwrap());
        assert!(sol.inliers.iter().all(|&b| b));
    }

    #[test]
    fn robust_solve_rejects_planted_outliers() {
        let (c, truth, is_inlier) = planted(8, 512, 0.3, 1e-3);
        let sol = robust_solve(&c, &RobustSolveParams::default()).unwrap();
        assert!(rotation_distance(&sol.pose.r, &truth.r).to_degrees() < 0.1);
        assert!((sol.pose.t - truth.t).norm() < 1e-3);
        let true_pos = (0..c.len()).filter(|&i| sol.inliers[i] && is_inlier[i]).count();
        assert!(true_pos as f64 >= 0.99 * sol.inlier_count as f64);
        assert!(sol.inlier_count >= sol.best_sample_inliers);
    }

    #[test]
    fn robust_solve_is_deterministic() {
        let (c, _, _) = planted(9, 200, 0.4, 1e-3);
        let params = RobustSolveParams { rng_seed: 42, ..Default::default() };
        let a = robust_solve(&c, &params).unwrap();
        let b = robust_solve(&c, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn robust_solve_monotone_support() {
        for seed in 0..20 {
            let (c, _, _) = planted(seed, 100, 0.5, 2e-3);
            let sol = robust_solve(&c, &RobustSolveParams { rng_seed: seed, ..Default::default() }).unwrap();
            assert!(sol.inlier_count >= sol.best_sample_inliers);
        }
    }

    #[test]
    fn robust_solve_fails_without_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = CorrespondenceSet::new(cloud(&mut rng, 40, 1.0), cloud(&mut rng, 40, 1.0)).unwrap();
        let params = RobustSolveParams { min_inliers: 30, ..Default::default() };
        assert!(matches!(robust_solve(&c, &params), Err(Error::SolveFailed { .. })));
        let small = CorrespondenceSet::new(cloud(&mut rng, 5, 1.0), cloud(&mut rng, 5, 1.0)).unwrap();
        assert!(matches!(robust_solve(&small, &RobustSolveParams::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn accumulate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prev = random_pose(&mut rng);
        assert_eq!(accumulate_pose(&Pose::identity(), &prev), prev);
        let delta = random_pose(&mut rng);
        let back = accumulate_pose(&delta.inverse(), &accumulate_pose(&delta, &prev));
        assert!((back.r.matrix() - prev.r.matrix()).amax() < 1e-12);
        assert!((back.t - prev.t).amax() < 1e-12);
    }

    #[test]
    fn accumulating_trajectory_deltas_reproduces_final_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut truth = vec![random_pose(&mut rng)];
        for _ in 0..1000 {
            let w = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
            let v = Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01));
            let step = Pose::new(Rotation::exp(&w), v);
            truth.push(step.compose(truth.last().unwrap()));
        }
        let mut est = truth[0];
        for k in 1..truth.len() {
            let delta = truth[k].compose(&truth[k - 1].inverse());
            est = accumulate_pose(&delta, &est);
        }
        let last = truth.last().unwrap();
        assert!(rotation_distance(&est.r, &last.r) < 1e-7);
        assert!((est.t - last.t).norm() < 1e-7);
    }
}
