//! Line-oriented `key = value` run configuration.
//!
//! Keys carry a dotted section prefix (`servo.lambda_r`). Blank lines and
//! lines starting with `#` are ignored; lists are comma separated. Every
//! omitted key keeps its default and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use aeroservo::kinematics::{ArmParameters, JOINTS};
use aeroservo::matching::{DEFAULT_CLOUD_POINTS, DEFAULT_KEYPOINTS, DEFAULT_TAU, DEFAULT_THETA_C};
use aeroservo::servo::{ServoLaw, StopGuard};
use aeroservo::sim::{ObservationMode, PoseNoiseMode, SimConfig};
use aeroservo::{Error, Result};
use nalgebra::{Vector2, Vector3};

/// Matching parameters shared by the tracker and `match-bench`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingParams {
    pub tau: f64,
    pub theta_c: f64,
    /// Keypoints per frame, `n`.
    pub keypoints: usize,
    /// Points per cloud, `N`; bounds `n`.
    pub cloud_points: usize,
    pub feature_dim: usize,
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            theta_c: DEFAULT_THETA_C,
            keypoints: DEFAULT_KEYPOINTS,
            cloud_points: DEFAULT_CLOUD_POINTS,
            feature_dim: 64,
        }
    }
}

/// Sizes of the verification suites.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchParams {
    /// Random permutations planted by `match-bench`.
    pub trials: usize,
    /// Seeds per outlier fraction in `solve-bench`.
    pub seeds: usize,
    pub correspondences: usize,
    pub feature_sigma: f64,
    pub keypoint_sigma: f64,
    pub outlier_fractions: Vec<f64>,
    pub jacobian_states: usize,
    pub grad_cases: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            trials: 10,
            seeds: 100,
            correspondences: 512,
            feature_sigma: 0.01,
            keypoint_sigma: 1e-3,
            outlier_fractions: vec![0.0, 0.1, 0.2, 0.3],
            jacobian_states: 100,
            grad_cases: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Arm, servo, noise, solver and episode settings.
    pub sim: SimConfig,
    pub matching: MatchingParams,
    pub bench: BenchParams,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            sim: SimConfig::default(),
            matching: MatchingParams::default(),
            bench: BenchParams::default(),
            output: None,
        };
        c.sync_matching();
        c
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ")
}

fn law_name(l: ServoLaw) -> &'static str {
    match l {
        ServoLaw::Coupled => "coupled",
        ServoLaw::Decoupled => "decoupled",
    }
}

fn guard_name(g: StopGuard) -> &'static str {
    match g {
        StopGuard::Both => "both",
        StopGuard::Either => "either",
    }
}

fn mode_name(m: ObservationMode) -> &'static str {
    match m {
        ObservationMode::Direct => "direct",
        ObservationMode::Tracker => "tracker",
    }
}

fn pose_noise_name(m: PoseNoiseMode) -> &'static str {
    match m {
        PoseNoiseMode::Off => "off",
        PoseNoiseMode::Init => "init",
        PoseNoiseMode::All => "all",
    }
}

type Check = std::result::Result<(), String>;

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got `{v}`"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be positive, got {x}"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("must be non-negative, got {x}"))
    }
}

fn unit(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("must lie in [0, 1], got {x}"))
    }
}

fn integer<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn count(v: &str) -> std::result::Result<usize, String> {
    match integer::<usize>(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|s| float(s.trim())).collect()
}

fn fixed<const N: usize>(v: &str) -> std::result::Result<[f64; N], String> {
    let xs = list(v)?;
    <[f64; N]>::try_from(xs.as_slice()).map_err(|_| format!("expected {N} comma-separated numbers, got {}", xs.len()))
}

fn vec3(v: &str) -> std::result::Result<Vector3<f64>, String> {
    fixed::<3>(v).map(Vector3::from)
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> std::result::Result<T, String> {
    options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got `{v}`", names.join(", "))
    })
}

impl RunConfig {
    /// Copies the matching section into the tracker and object settings.
    fn sync_matching(&mut self) {
        self.sim.tracker.tau = self.matching.tau;
        self.sim.tracker.theta_c = self.matching.theta_c;
        self.sim.object.keypoints = self.matching.keypoints;
        self.sim.object.feature_dim = self.matching.feature_dim;
    }

    /// Applies one `key = value` pair with per-key checks.
    fn set(&mut self, key: &str, v: &str) -> Check {
        let s = &mut self.sim;
        let c = &mut s.controller;
        match key {
            "arm.link_lengths" => {
                let l = fixed::<JOINTS>(v)?;
                if l.iter().any(|x| *x <= 0.0) {
                    return Err("link lengths must be positive".into());
                }
                s.arm.link_lengths = l;
            }
            "arm.joint_lower" => {
                for (lim, lo) in s.arm.joint_limits.iter_mut().zip(fixed::<JOINTS>(v)?) {
                    lim.0 = lo;
                }
            }
            "arm.joint_upper" => {
                for (lim, hi) in s.arm.joint_limits.iter_mut().zip(fixed::<JOINTS>(v)?) {
                    lim.1 = hi;
                }
            }
            "arm.base_offset" => s.arm.base_offset.t = vec3(v)?,

            "servo.lambda_r" => c.gains.lambda_r = positive(v)?,
            "servo.lambda_p" => c.gains.lambda_p = positive(v)?,
            "servo.delta_r" => c.thresholds.delta_r = positive(v)?,
            "servo.delta_t" => c.thresholds.delta_t = positive(v)?,
            "servo.theta_small" => c.theta_small = non_negative(v)?,
            "servo.pinv_tolerance" => {
                let x = positive(v)?;
                if x >= 1.0 {
                    return Err("must lie in (0, 1)".into());
                }
                c.pinv_tolerance = x;
            }
            "servo.law" => c.law = choice(v, &[("coupled", ServoLaw::Coupled), ("decoupled", ServoLaw::Decoupled)])?,
            "servo.guard" => c.guard = choice(v, &[("both", StopGuard::Both), ("either", StopGuard::Either)])?,
            "servo.compensate_underactuation" => c.compensate_underactuation = boolean(v)?,

            "noise.pose_rot_sigma" => s.noise.pose_rot_sigma = non_negative(v)?,
            "noise.pose_trans_sigma" => s.noise.pose_trans_sigma = non_negative(v)?,
            "noise.keypoint_sigma" => s.noise.keypoint_sigma = non_negative(v)?,
            "noise.feature_sigma" => s.noise.feature_sigma = non_negative(v)?,
            "noise.outlier_fraction" => s.noise.outlier_fraction = unit(v)?,
            "noise.drop_probability" => s.noise.drop_probability = unit(v)?,
            "noise.seed" => s.noise.seed = integer(v)?,
            "noise.pose_mode" => {
                s.pose_noise = choice(
                    v,
                    &[("off", PoseNoiseMode::Off), ("init", PoseNoiseMode::Init), ("all", PoseNoiseMode::All)],
                )?
            }
            "noise.pose_times" => s.pose_noise_times = integer(v)?,

            "solver.max_iterations" => s.tracker.solve.max_iterations = count(v)?,
            "solver.inlier_threshold" => s.tracker.solve.inlier_threshold = positive(v)?,
            "solver.min_inliers" => {
                let n = integer(v)?;
                if n < 3 {
                    return Err("must be at least 3".into());
                }
                s.tracker.solve.min_inliers = n;
            }
            "solver.seed" => s.tracker.solve.rng_seed = integer(v)?,

            "matching.tau" => self.matching.tau = positive(v)?,
            "matching.theta_c" => self.matching.theta_c = unit(v)?,
            "matching.keypoints" => {
                let n = count(v)?;
                if n < 3 {
                    return Err("must be at least 3".into());
                }
                self.matching.keypoints = n;
            }
            "matching.cloud_points" => self.matching.cloud_points = count(v)?,
            "matching.feature_dim" => self.matching.feature_dim = count(v)?,

            "sim.dt" => s.dt = positive(v)?,
            "sim.max_steps" => s.max_steps = count(v)?,
            "sim.seed" => s.seed = integer(v)?,
            "sim.mode" => s.mode = choice(v, &[("direct", ObservationMode::Direct), ("tracker", ObservationMode::Tracker)])?,
            "sim.initial_joints" => s.initial_joints = fixed::<JOINTS>(v)?,
            "sim.initial_rotation" => s.initial_rotation = vec3(v)?,
            "sim.initial_translation" => s.initial_translation = vec3(v)?,
            "sim.desired_translation" => {
                let t = vec3(v)?;
                if t.z <= 0.0 {
                    return Err("the desired object position needs Z > 0".into());
                }
                s.desired.t = t;
            }
            "sim.disturbance" => s.disturbance = Vector2::from(fixed::<2>(v)?),
            "sim.target_velocity" => s.target_velocity = vec3(v)?,
            "sim.box_half_extents" => {
                let h = vec3(v)?;
                if h.iter().any(|x| *x <= 0.0) {
                    return Err("half extents must be positive".into());
                }
                s.object.half_extents = h;
            }

            "bench.trials" => self.bench.trials = count(v)?,
            "bench.seeds" => self.bench.seeds = count(v)?,
            "bench.correspondences" => {
                let n = count(v)?;
                if n < 3 {
                    return Err("must be at least 3".into());
                }
                self.bench.correspondences = n;
            }
            "bench.feature_sigma" => self.bench.feature_sigma = non_negative(v)?,
            "bench.keypoint_sigma" => self.bench.keypoint_sigma = non_negative(v)?,
            "bench.outlier_fractions" => {
                let f = list(v)?;
                if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err("fractions must lie in [0, 1]".into());
                }
                self.bench.outlier_fractions = f;
            }
            "bench.jacobian_states" => self.bench.jacobian_states = count(v)?,
            "bench.grad_cases" => self.bench.grad_cases = count(v)?,

            "output.path" => self.output = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.sim;
        let c = &s.controller;
        let n = &s.noise;
        let sv = &s.tracker.solve;
        let m = &self.matching;
        let b = &self.bench;
        let lower: Vec<f64> = s.arm.joint_limits.iter().map(|l| l.0).collect();
        let upper: Vec<f64> = s.arm.joint_limits.iter().map(|l| l.1).collect();
        vec![
            ("arm.link_lengths", fmt_list(&s.arm.link_lengths)),
            ("arm.joint_lower", fmt_list(&lower)),
            ("arm.joint_upper", fmt_list(&upper)),
            ("arm.base_offset", fmt_list(s.arm.base_offset.t.as_slice())),
            ("servo.lambda_r", c.gains.lambda_r.to_string()),
            ("servo.lambda_p", c.gains.lambda_p.to_string()),
            ("servo.delta_r", c.thresholds.delta_r.to_string()),
            ("servo.delta_t", c.thresholds.delta_t.to_string()),
            ("servo.theta_small", c.theta_small.to_string()),
            ("servo.pinv_tolerance", c.pinv_tolerance.to_string()),
            ("servo.law", law_name(c.law).into()),
            ("servo.guard", guard_name(c.guard).into()),
            ("servo.compensate_underactuation", c.compensate_underactuation.to_string()),
            ("noise.pose_rot_sigma", n.pose_rot_sigma.to_string()),
            ("noise.pose_trans_sigma", n.pose_trans_sigma.to_string()),
            ("noise.keypoint_sigma", n.keypoint_sigma.to_string()),
            ("noise.feature_sigma", n.feature_sigma.to_string()),
            ("noise.outlier_fraction", n.outlier_fraction.to_string()),
            ("noise.drop_probability", n.drop_probability.to_string()),
            ("noise.seed", n.seed.to_string()),
            ("noise.pose_mode", pose_noise_name(s.pose_noise).into()),
            ("noise.pose_times", s.pose_noise_times.to_string()),
            ("solver.max_iterations", sv.max_iterations.to_string()),
            ("solver.inlier_threshold", sv.inlier_threshold.to_string()),
            ("solver.min_inliers", sv.min_inliers.to_string()),
            ("solver.seed", sv.rng_seed.to_string()),
            ("matching.tau", m.tau.to_string()),
            ("matching.theta_c", m.theta_c.to_string()),
            ("matching.keypoints", m.keypoints.to_string()),
            ("matching.cloud_points", m.cloud_points.to_string()),
            ("matching.feature_dim", m.feature_dim.to_string()),
            ("sim.dt", s.dt.to_string()),
            ("sim.max_steps", s.max_steps.to_string()),
            ("sim.seed", s.seed.to_string()),
            ("sim.mode", mode_name(s.mode).into()),
            ("sim.initial_joints", fmt_list(&s.initial_joints)),
            ("sim.initial_rotation", fmt_list(s.initial_rotation.as_slice())),
            ("sim.initial_translation", fmt_list(s.initial_translation.as_slice())),
            ("sim.desired_translation", fmt_list(s.desired.t.as_slice())),
            ("sim.disturbance", fmt_list(s.disturbance.as_slice())),
            ("sim.target_velocity", fmt_list(s.target_velocity.as_slice())),
            ("sim.box_half_extents", fmt_list(s.object.half_extents.as_slice())),
            ("bench.trials", b.trials.to_string()),
            ("bench.seeds", b.seeds.to_string()),
            ("bench.correspondences", b.correspondences.to_string()),
            ("bench.feature_sigma", b.feature_sigma.to_string()),
            ("bench.keypoint_sigma", b.keypoint_sigma.to_string()),
            ("bench.outlier_fractions", fmt_list(&b.outlier_fractions)),
            ("bench.jacobian_states", b.jacobian_states.to_string()),
            ("bench.grad_cases", b.grad_cases.to_string()),
            (
                "output.path",
                self.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    /// Text that [`parse_config`] reads back to an equal config.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let prefix = key.split('.').next().unwrap_or_default();
            if prefix != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = prefix;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Cross-key invariants, reported against the last line that set one of
    /// the involved keys.
    fn validate(&self, lines: &std::collections::HashMap<&str, usize>) -> Result<()> {
        let at = |keys: &[&'static str], message: String| {
            let (key, line) = keys
                .iter()
                .map(|k| (*k, lines.get(k).copied().unwrap_or(0)))
                .max_by_key(|(_, l)| *l)
                .unwrap_or((keys[0], 0));
            Error::Config { line, key: key.into(), message }
        };
        if self.matching.keypoints > self.matching.cloud_points {
            return Err(at(
                &["matching.keypoints", "matching.cloud_points"],
                format!(
                    "n = {} exceeds N = {}",
                    self.matching.keypoints, self.matching.cloud_points
                ),
            ));
        }
        let arm: &ArmParameters = &self.sim.arm;
        if let Some(i) = arm.joint_limits.iter().position(|(lo, hi)| !(lo < hi)) {
            return Err(at(
                &["arm.joint_lower", "arm.joint_upper"],
                format!("joint {} has an empty range", i + 1),
            ));
        }
        if let Err(e) = arm.check_limits(&self.sim.initial_joints) {
            return Err(at(&["sim.initial_joints", "arm.joint_lower", "arm.joint_upper"], e.to_string()));
        }
        self.sim
            .validate()
            .map_err(|e| at(&["sim.dt"], format!("invalid simulation settings: {e}")))
    }
}

/// Parses and validates a configuration; omitted keys keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut lines = std::collections::HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config {
                line,
                key: trimmed.into(),
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        cfg.set(key, value).map_err(|message| Error::Config {
            line,
            key: key.into(),
            message,
        })?;
        if let Some(known) = cfg.entries().into_iter().map(|(k, _)| k).find(|k| *k == key) {
            lines.insert(known, line);
        }
    }
    cfg.sync_matching();
    cfg.validate(&lines)?;
    Ok(cfg)
}
