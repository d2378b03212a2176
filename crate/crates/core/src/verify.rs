//! Numeric verification suites: finite-difference Jacobian and loss-gradient
//! checks, and synthetic matching and robust-solve benchmarks.

use std::collections::HashSet;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{rotation_distance, rotation_log, Pose, Rotation};
use crate::kinematics::{forward_kinematics, generalized_jacobian, ArmParameters, Jacobian, KinematicState};
use crate::matching::{dual_softmax, mnn_filter, score_matrix, MatchSet};
use crate::neural::losses::{
    loss_aux_with_grad, loss_matching, loss_matching_grad, loss_mvc_with_grad, max_relative_error,
    numeric_gradient, rotation_loss, rotation_loss_grad, translation_loss_with_grad,
};
use crate::posesolve::{robust_solve, CorrespondenceSet, RobustSolveParams};

/// Finite-difference step used by both checks.
pub const FD_STEP: f64 = 1e-6;
/// Magnitude floor in relative gradient errors.
pub const RELATIVE_FLOOR: f64 = 1e-4;

fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let axis = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
    Rotation::about(&axis, rng.random_range(0.0..std::f64::consts::PI))
}

fn random_pose(rng: &mut impl Rng, reach: f64) -> Pose {
    Pose::new(random_rotation(rng), Vector3::from_fn(|_, _| rng.random_range(-reach..reach)))
}

/// A random vehicle pose and joint angles inside the limits.
pub fn random_state(params: &ArmParameters, rng: &mut impl Rng) -> KinematicState {
    KinematicState {
        vehicle_pose: random_pose(rng, 3.0),
        joint_angles: std::array::from_fn(|i| {
            let (lo, hi) = params.joint_limits[i];
            rng.random_range(lo.max(-2.5)..=hi.min(2.5))
        }),
    }
}

/// Central differences of the world camera pose along each generalized
/// coordinate. Vehicle increments are body-frame; the result is the camera
/// velocity in the camera frame, `(linear, angular)`.
pub fn finite_difference_jacobian(params: &ArmParameters, state: &KinematicState, h: f64) -> Result<Jacobian> {
    let camera_at = |k: usize, step: f64| -> Result<Pose> {
        let mut s = *state;
        let mut d = Vector3::zeros();
        match k {
            0..=2 => {
                d[k] = step;
                s.vehicle_pose.t += s.vehicle_pose.r.apply(&d);
            }
            3..=5 => {
                d[k - 3] = step;
                s.vehicle_pose.r = s.vehicle_pose.r.compose(&Rotation::exp(&d));
            }
            _ => s.joint_angles[k - 6] += step,
        }
        // Probe outside the limits if needed; only the geometry matters.
        let relaxed = ArmParameters {
            joint_limits: [(f64::NEG_INFINITY, f64::INFINITY); 4],
            ..*params
        };
        Ok(forward_kinematics(&relaxed, &s)?.camera)
    };
    let here = camera_at(0, 0.0)?;
    let mut j = Jacobian::zeros();
    for k in 0..10 {
        let plus = camera_at(k, h)?;
        let minus = camera_at(k, -h)?;
        let linear = here.r.transpose().apply(&(plus.t - minus.t)) / (2.0 * h);
        let angular = rotation_log(&minus.r.transpose().compose(&plus.r)).rotation_vector() / (2.0 * h);
        j.fixed_view_mut::<3, 1>(0, k).copy_from(&linear);
        j.fixed_view_mut::<3, 1>(3, k).copy_from(&angular);
    }
    Ok(j)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianReport {
    pub states: usize,
    /// Largest `max|J_fd - J| / max|J|` over the states.
    pub max_relative_error: f64,
    pub worst_state: usize,
}

pub fn jacobian_check(params: &ArmParameters, states: usize, seed: u64) -> Result<JacobianReport> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = JacobianReport { states, max_relative_error: 0.0, worst_state: 0 };
    for k in 0..states {
        let state = random_state(params, &mut rng);
        let j = generalized_jacobian(params, &state);
        let fd = finite_difference_jacobian(params, &state, FD_STEP)?;
        let err = (fd - j).amax() / j.amax().max(f64::MIN_POSITIVE);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_state = k;
        }
    }
    Ok(report)
}

/// Worst relative error of each analytic loss gradient.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GradReport {
    pub cases: usize,
    pub aux: f64,
    pub mvc: f64,
    pub translation: f64,
    pub rotation: f64,
    pub matching: f64,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        [self.aux, self.mvc, self.translation, self.rotation, self.matching]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn cloud(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0))
}

fn rel(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    max_relative_error(analytic.as_slice(), numeric.as_slice(), RELATIVE_FLOOR)
}

/// Compares every analytic loss gradient against central differences on
/// `cases` random inputs.
pub fn gradcheck(cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = GradReport { cases, ..Default::default() };
    let h = FD_STEP;
    for _ in 0..cases {
        let n = rng.random_range(4..12);
        let prior = cloud(&mut rng, n + 5);
        let keypoints = cloud(&mut rng, n);
        let (_, g) = loss_aux_with_grad(&prior, &keypoints)?;
        let fd = numeric_gradient(&keypoints, h, |k| loss_aux_with_grad(&prior, k).map_or(f64::NAN, |v| v.0));
        r.aux = r.aux.max(rel(&g, &fd));

        let gt = random_pose(&mut rng, 0.5);
        let k_prev = cloud(&mut rng, n);
        let k_curr = DMatrix::from_fn(n, 3, |i, c| {
            let p = gt.transform_point(&Vector3::new(k_prev[(i, 0)], k_prev[(i, 1)], k_prev[(i, 2)]));
            p[c] + rng.random_range(-0.3..0.3)
        });
        let (_, g) = loss_mvc_with_grad(&k_prev, &k_curr, &gt)?;
        let fd = numeric_gradient(&k_curr, h, |k| loss_mvc_with_grad(&k_prev, k, &gt).map_or(f64::NAN, |v| v.0));
        r.mvc = r.mvc.max(rel(&g, &fd));

        let (_, g) = translation_loss_with_grad(&k_prev, &k_curr, &gt)?;
        let fd = numeric_gradient(&k_curr, h, |k| translation_loss_with_grad(&k_prev, k, &gt).map_or(f64::NAN, |v| v.0));
        r.translation = r.translation.max(rel(&g, &fd));

        let a = *random_rotation(&mut rng).matrix();
        let b = *random_rotation(&mut rng).matrix();
        let g = rotation_loss_grad(&a, &b);
        let a_dyn = DMatrix::from_column_slice(3, 3, a.as_slice());
        let fd = numeric_gradient(&a_dyn, h, |m| rotation_loss(&Matrix3::from_column_slice(m.as_slice()), &b).0);
        r.rotation = r.rotation.max(rel(&DMatrix::from_column_slice(3, 3, g.as_slice()), &fd));

        let p_c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.05..1.0));
        let mut cols: Vec<usize> = (0..n).collect();
        cols.shuffle(&mut rng);
        let gt_matches = MatchSet {
            pairs: cols.iter().take(n / 2 + 1).enumerate().map(|(i, &j)| (i, j)).collect(),
            confidences: vec![1.0; n / 2 + 1],
        };
        let g = loss_matching_grad(&p_c, &gt_matches)?;
        let fd = numeric_gradient(&p_c, h, |p| loss_matching(p, &gt_matches).map_or(f64::NAN, |l| l.value));
        r.matching = r.matching.max(rel(&g, &fd));
    }
    if !r.max().is_finite() {
        return Err(Error::Domain("gradient check produced a non-finite error".into()));
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchBenchReport {
    pub trials: usize,
    pub keypoints: usize,
    /// Smallest fraction of the planted permutation recovered in a trial.
    pub min_recovery: f64,
    pub mean_recovery: f64,
    /// Accepted matches that disagree with the planted permutation.
    pub wrong_matches: usize,
    /// Every dual-softmax entry lay strictly inside `(0, 1)`.
    pub confidences_in_open_unit: bool,
}

/// Plants a random permutation between unit features and noisy copies and
/// measures how much of it score, dual softmax and MNN recover.
pub fn match_bench(
    n: usize,
    dim: usize,
    feature_sigma: f64,
    tau: f64,
    theta_c: f64,
    trials: usize,
    seed: u64,
) -> Result<MatchBenchReport> {
    if n == 0 || dim == 0 || trials == 0 {
        return Err(Error::Domain("match bench needs positive sizes".into()));
    }
    let noise = Normal::new(0.0, feature_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut report = MatchBenchReport {
        trials,
        keypoints: n,
        min_recovery: 1.0,
        mean_recovery: 0.0,
        wrong_matches: 0,
        confidences_in_open_unit: true,
    };
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let mut f_prev = DMatrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng));
        for mut row in f_prev.row_iter_mut() {
            let norm: f64 = row.norm();
            row /= norm;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut f_curr = DMatrix::zeros(n, dim);
        for (i, &slot) in perm.iter().enumerate() {
            for c in 0..dim {
                f_curr[(slot, c)] = f_prev[(i, c)] + noise.sample(&mut rng);
            }
        }
        let p_c = dual_softmax(&score_matrix(&f_prev, &f_curr, tau)?);
        report.confidences_in_open_unit &= p_c.iter().all(|&p| p > 0.0 && p < 1.0);
        let m = mnn_filter(&p_c, theta_c);
        let correct = m.pairs.iter().filter(|(i, j)| perm[*i] == *j).count();
        report.wrong_matches += m.len() - correct;
        let frac = correct as f64 / n as f64;
        report.min_recovery = report.min_recovery.min(frac);
        report.mean_recovery += frac / trials as f64;
    }
    Ok(report)
}

/// Number of random confidence matrices on which MNN produced a repeated
/// row or column. Entries are quantized so ties are common.
pub fn mnn_one_to_one_violations(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for t in 0..trials {
        let (rows, cols) = (1 + t % 17, 1 + (t / 17) % 13);
        let p = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0..5) as f64 / 4.0);
        let m = mnn_filter(&p, rng.random_range(0.0..1.0));
        let is: HashSet<_> = m.pairs.iter().map(|p| p.0).collect();
        let js: HashSet<_> = m.pairs.iter().map(|p| p.1).collect();
        if is.len() != m.len() || js.len() != m.len() {
            violations += 1;
        }
    }
    violations
}

/// Rotation (degrees) and translation (m) error of one planted-outlier solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveTrial {
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub inliers: usize,
}

/// Points in a 30 cm cube moved by a random pose with Gaussian noise; a
/// fraction of the targets replaced by uniform points in a 1 m cube around
/// the true translation.
pub fn solve_trial(
    n: usize,
    outlier_fraction: f64,
    sigma: f64,
    seed: u64,
    params: &RobustSolveParams,
) -> Result<Option<SolveTrial>> {
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(Error::Domain("outlier fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let truth = random_pose(&mut rng, 1.0);
    let outliers = (outlier_fraction * n as f64).round() as usize;
    let mut prev = Vec::with_capacity(n);
    let mut curr = Vec::with_capacity(n);
    for i in 0..n {
        let p = Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15));
        let q = if i < outliers {
            truth.t + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))
        } else {
            truth.transform_point(&p) + Vector3::from_fn(|_, _| noise.sample(&mut rng))
        };
        prev.push(p);
        curr.push(q);
    }
    let set = CorrespondenceSet::new(prev, curr)?;
    let params = RobustSolveParams { rng_seed: seed, ..*params };
    match robust_solve(&set, &params) {
        Ok(sol) => Ok(Some(SolveTrial {
            rotation_error_deg: rotation_distance(&sol.pose.r, &truth.r).to_degrees(),
            translation_error: (sol.pose.t - truth.t).norm(),
            inliers: sol.inlier_count,
        })),
        Err(Error::SolveFailed { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveBenchRow {
    pub outlier_fraction: f64,
    pub seeds: usize,
    /// Seeds with rotation error below 0.1 degrees and translation error
    /// below 1 mm.
    pub successes: usize,
    pub worst_rotation_deg: f64,
    pub worst_translation: f64,
}

pub const SOLVE_ROTATION_TOL_DEG: f64 = 0.1;
pub const SOLVE_TRANSLATION_TOL: f64 = 1e-3;

pub fn solve_bench(
    n: usize,
    fractions: &[f64],
    sigma: f64,
    seeds: usize,
    params: &RobustSolveParams,
) -> Result<Vec<SolveBenchRow>> {
    fractions
        .iter()
        .map(|&f| {
            let mut row = SolveBenchRow {
                outlier_fraction: f,
                seeds,
                successes: 0,
                worst_rotation_deg: 0.0,
                worst_translation: 0.0,
            };
            for seed in 0..seeds as u64 {
                match solve_trial(n, f, sigma, seed, params)? {
                    Some(t) => {
                        row.worst_rotation_deg = row.worst_rotation_deg.max(t.rotation_error_deg);
                        row.worst_translation = row.worst_translation.max(t.translation_error);
                        if t.rotation_error_deg < SOLVE_ROTATION_TOL_DEG && t.translation_error < SOLVE_TRANSLATION_TOL {
                            row.successes += 1;
                        }
                    }
                    None => {
                        row.worst_rotation_deg = f64::INFINITY;
                        row.worst_translation = f64::INFINITY;
                    }
                }
            }
            Ok(row)
        })
        .collect()
}
