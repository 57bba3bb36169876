//! Pose simulation: noisy votes, keypoint recovery, closed-form alignment and
//! ADD / ADD-S / AUC scoring over repeated random trials.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_transform, GeometryError, ObjectModel, Point3, PointCloud, RigidTransform};
use crate::sampling::{denormalize_keypoints, KeypointSet};
use crate::votes::{compute_votes, VoteError, VoteField, VoteScheme, VoteValues};

/// Relative singular-value floor below which a linear system counts as degenerate.
pub const RANK_TOL: f64 = 1e-10;
pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("keypoint {keypoint}: {reason}")]
    DegenerateRecovery { keypoint: usize, reason: String },
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
    #[error("keypoint counts differ: {model} model vs {scene} scene")]
    CountMismatch { model: usize, scene: usize },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("empty distance list")]
    EmptyDistances,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Vote(#[from] VoteError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteNoiseModel {
    /// Standard deviation per scalar vote component.
    pub gaussian_std: f64,
    pub outlier_rate: f64,
    /// Outliers are uniform in `[0, spread]` (radial) or `[−spread, spread]³`.
    pub outlier_spread: f64,
    pub rng_seed: u64,
}

impl Default for VoteNoiseModel {
    fn default() -> Self {
        Self { gaussian_std: 0.0, outlier_rate: 0.0, outlier_spread: 1.0, rng_seed: 0 }
    }
}

impl VoteNoiseModel {
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.gaussian_std >= 0.0) || !self.gaussian_std.is_finite() {
            return Err(PoseError::InvalidNoise(format!("gaussian_std must be >= 0, got {}", self.gaussian_std)));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(PoseError::InvalidNoise(format!("outlier_rate must be in [0, 1], got {}", self.outlier_rate)));
        }
        if !(self.outlier_spread >= 0.0) || !self.outlier_spread.is_finite() {
            return Err(PoseError::InvalidNoise(format!("outlier_spread must be >= 0, got {}", self.outlier_spread)));
        }
        Ok(())
    }

    /// The same model with lengths multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { gaussian_std: self.gaussian_std * s, outlier_spread: self.outlier_spread * s, ..*self }
    }
}

/// Gaussian jitter plus uniform outliers. Radial votes are clamped at zero and
/// Vector votes renormalized.
pub fn perturb_votes(field: &VoteField, noise: &VoteNoiseModel) -> Result<VoteField, PoseError> {
    noise.validate()?;
    if noise.gaussian_std == 0.0 && noise.outlier_rate == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let gauss = Normal::new(0.0, noise.gaussian_std).map_err(|e| PoseError::InvalidNoise(e.to_string()))?;
    let spread = noise.outlier_spread;
    let outlier = |rng: &mut ChaCha8Rng| rng.random::<f64>() < noise.outlier_rate;
    let values = match &field.values {
        VoteValues::Scalar(rows) => VoteValues::Scalar(
            rows.iter()
                .map(|row| {
                    row.iter()
                        .map(|v| {
                            let v = v + gauss.sample(&mut rng);
                            let v = if outlier(&mut rng) { rng.random::<f64>() * spread } else { v };
                            v.max(0.0)
                        })
                        .collect()
                })
                .collect(),
        ),
        VoteValues::Vector(rows) => VoteValues::Vector(
            rows.iter()
                .map(|row| {
                    row.iter()
                        .map(|v| {
                            let mut w = v.map(|c| c + gauss.sample(&mut rng));
                            if outlier(&mut rng) {
                                w = Point3::from_fn(|_, _| (rng.random::<f64>() * 2.0 - 1.0) * spread);
                            }
                            if field.scheme == VoteScheme::Vector {
                                let n = w.norm();
                                w = if n > 0.0 { w / n } else { *v };
                            }
                            w
                        })
                        .collect()
                })
                .collect(),
        ),
    };
    Ok(VoteField { scheme: field.scheme, values })
}

fn solve_normal(a: Matrix3<f64>, b: Point3, keypoint: usize, what: &str) -> Result<Point3, PoseError> {
    let svd = a.svd(true, true);
    let s = svd.singular_values;
    if !(s.min() > RANK_TOL * s.max()) {
        return Err(PoseError::DegenerateRecovery { keypoint, reason: what.into() });
    }
    svd.solve(&b, 0.0)
        .map_err(|e| PoseError::DegenerateRecovery { keypoint, reason: e.to_string() })
}

/// Least-squares sphere intersection. Each equation `‖x − p_i‖² = r_i²` has
/// the mean equation subtracted, leaving a linear system in `x`.
fn trilaterate(points: &[Point3], radii: &[f64], keypoint: usize) -> Result<Point3, PoseError> {
    let n = points.len() as f64;
    let mean_p = points.iter().sum::<Point3>() / n;
    let mean_c = points.iter().zip(radii).map(|(p, r)| p.norm_squared() - r * r).sum::<f64>() / n;
    let mut ata = Matrix3::zeros();
    let mut atb = Point3::zeros();
    for (p, r) in points.iter().zip(radii) {
        let row = (p - mean_p) * 2.0;
        let rhs = p.norm_squared() - r * r - mean_c;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    solve_normal(ata, atb, keypoint, "surface points are coplanar or collinear")
}

/// Point closest in the least-squares sense to all rays `p_i + s·d_i`.
fn ray_intersection(points: &[Point3], dirs: &[Point3], keypoint: usize) -> Result<Point3, PoseError> {
    let mut a = Matrix3::zeros();
    let mut b = Point3::zeros();
    for (p, d) in points.iter().zip(dirs) {
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * p;
    }
    solve_normal(a, b, keypoint, "vote rays are parallel")
}

/// Scene keypoint estimates from a cloud and its (possibly noisy) votes.
pub fn recover_keypoints(cloud: &PointCloud, field: &VoteField) -> Result<Vec<Point3>, PoseError> {
    let points = cloud.position_vec();
    if points.is_empty() {
        return Err(PoseError::DegenerateRecovery { keypoint: 0, reason: "empty cloud".into() });
    }
    match (&field.values, field.scheme) {
        (VoteValues::Scalar(rows), _) => rows
            .iter()
            .enumerate()
            .map(|(j, r)| trilaterate(&points, r, j))
            .collect(),
        (VoteValues::Vector(rows), VoteScheme::Offset) => Ok(rows
            .iter()
            .map(|r| points.iter().zip(r).map(|(p, v)| p + v).sum::<Point3>() / points.len() as f64)
            .collect()),
        (VoteValues::Vector(rows), _) => rows
            .iter()
            .enumerate()
            .map(|(j, r)| ray_intersection(&points, r, j))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    /// Mean `‖R·m + t − s‖` over keypoints.
    pub residual: f64,
}

/// Closed-form least-squares rigid alignment of `model` onto `scene`, with the
/// rotation restricted to det +1.
pub fn horn_align(model: &[Point3], scene: &[Point3]) -> Result<PoseEstimate, PoseError> {
    if model.len() != scene.len() {
        return Err(PoseError::CountMismatch { model: model.len(), scene: scene.len() });
    }
    if model.len() < 3 {
        return Err(PoseError::DegenerateAlignment(format!("need at least 3 keypoints, got {}", model.len())));
    }
    let n = model.len() as f64;
    let cm = model.iter().sum::<Point3>() / n;
    let cs = scene.iter().sum::<Point3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (m, s) in model.iter().zip(scene) {
        let (dm, ds) = (m - cm, s - cs);
        h += dm * ds.transpose();
        spread += dm * dm.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > RANK_TOL * ev[2]) {
        return Err(PoseError::DegenerateAlignment("model keypoints are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Point3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    // re-orthonormalize away rounding so validation at 1e-9 always holds
    let r = UnitQuaternion::from_matrix(&r).to_rotation_matrix().into_inner();
    let t = cs - r * cm;
    let transform = RigidTransform::new(r, t)?;
    let residual = model.iter().zip(scene).map(|(m, s)| (transform.apply(m) - s).norm()).sum::<f64>() / n;
    Ok(PoseEstimate { transform, residual })
}

/// ADD (mean corresponding-point distance) or, with `symmetric`, ADD-S (mean
/// nearest-neighbor distance) over the model's points.
pub fn add_metrics(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform, symmetric: bool) -> f64 {
    let pts = model.cloud.position_vec();
    let n = pts.len() as f64;
    if !symmetric {
        return pts.iter().map(|p| (est.apply(p) - gt.apply(p)).norm()).sum::<f64>() / n;
    }
    let target: Vec<Point3> = pts.iter().map(|p| gt.apply(p)).collect();
    pts.iter()
        .map(|p| {
            let q = est.apply(p);
            target.iter().map(|t| (q - t).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
        })
        .sum::<f64>()
        / n
}

/// Area under the accuracy-vs-threshold curve on `[0, max_frac·diameter]`,
/// divided by the interval length. Exact for the step function.
pub fn adds_auc(distances: &[f64], diameter: f64, max_frac: f64) -> Result<f64, PoseError> {
    if distances.is_empty() {
        return Err(PoseError::EmptyDistances);
    }
    let t = max_frac * diameter;
    if !(t > 0.0) {
        return Err(PoseError::InvalidExperiment(format!("threshold must be positive, got {t}")));
    }
    Ok(distances.iter().map(|d| (t - d).max(0.0)).sum::<f64>() / (distances.len() as f64 * t))
}

/// Rotation uniform over SO(3) (unit quaternion from three uniforms).
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = Quaternion::new(b * (2.0 * PI * u3).cos(), a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos(), b * (2.0 * PI * u3).sin());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

pub fn random_pose(rng: &mut impl Rng, translation_range: f64) -> RigidTransform {
    let r = random_rotation(rng);
    let t = Point3::from_fn(|_, _| (rng.random::<f64>() * 2.0 - 1.0) * translation_range);
    RigidTransform { rotation: r, translation: t }
}

/// Keypoints a method supplies, in the normalized frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeypointProvider {
    /// One set per object, in object order.
    PerObject(Vec<KeypointSet>),
    /// One set shared by every object.
    Shared(KeypointSet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub keypoints: KeypointProvider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: VoteScheme,
    /// Gaussian vote noise levels in normalized units (multiples of the diameter).
    pub noise_levels: Vec<f64>,
    pub outlier_rate: f64,
    /// Outlier spread in normalized units.
    pub outlier_spread: f64,
    pub trials: usize,
    /// GT translations are uniform in `[−range, range]³`, in model units.
    pub translation_range: f64,
    /// Per-object ADD-S flag; missing entries mean asymmetric.
    pub symmetric: Vec<bool>,
    pub threshold_frac: f64,
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: VoteScheme::Radial,
            noise_levels: vec![0.0, 0.01, 0.02],
            outlier_rate: 0.0,
            outlier_spread: 1.0,
            trials: 50,
            translation_range: 1.0,
            symmetric: Vec::new(),
            threshold_frac: DEFAULT_THRESHOLD_FRAC,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub object: String,
    pub noise_std: f64,
    /// Global trial index: `level · trials + t`.
    pub trial: usize,
    pub add: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    /// Mean distance between recovered and true scene keypoints.
    pub kp_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedTrial {
    pub method: String,
    pub object: String,
    pub noise_std: f64,
    pub trial: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub noise_std: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_add: f64,
    /// Fraction of completed trials with ADD(-S) ≤ threshold_frac · diameter.
    pub accuracy: f64,
    pub auc: f64,
    pub mean_rot_err_deg: f64,
    pub mean_trans_err: f64,
    pub mean_kp_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scheme: VoteScheme,
    pub trials: Vec<TrialRecord>,
    pub failures: Vec<FailedTrial>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,object,trial,add,rot_err_deg,trans_err\n");
        for t in &self.trials {
            out.push_str(&format!("{},{},{},{},{},{}\n", t.method, t.object, t.trial, t.add, t.rot_err_deg, t.trans_err));
        }
        out
    }

    pub fn summary(&self, method: &str, noise_std: f64) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method && s.noise_std == noise_std)
    }
}

/// Mixes indices into an RNG seed so every (object, level, trial) gets its own stream.
fn trial_seed(base: u64, object: usize, level: usize, trial: usize) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for v in [object as u64, level as u64, trial as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(17);
    }
    h
}

struct TrialInput<'a> {
    model: &'a ObjectModel,
    model_kps: Vec<Point3>,
    symmetric: bool,
}

fn run_trial(input: &TrialInput, cfg: &ExperimentConfig, noise_std: f64, seed: u64) -> Result<(f64, f64, f64, f64), PoseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_pose(&mut rng, cfg.translation_range);
    let noise = VoteNoiseModel {
        gaussian_std: noise_std,
        outlier_rate: cfg.outlier_rate,
        outlier_spread: cfg.outlier_spread,
        rng_seed: rng.random(),
    }
    .scaled(input.model.diameter);
    let scene = apply_transform(&input.model.cloud, &gt)?;
    let scene_kps: Vec<Point3> = input.model_kps.iter().map(|k| gt.apply(k)).collect();
    let field = compute_votes(&scene, &scene_kps, cfg.scheme)?;
    let noisy = perturb_votes(&field, &noise)?;
    let recovered = recover_keypoints(&scene, &noisy)?;
    let est = horn_align(&input.model_kps, &recovered)?.transform;
    let add = add_metrics(input.model, &est, &gt, input.symmetric);
    let kp_err = recovered.iter().zip(&scene_kps).map(|(a, b)| (a - b).norm()).sum::<f64>() / scene_kps.len() as f64;
    Ok((add, est.rotation_angle_deg(&gt), (est.translation - gt.translation).norm(), kp_err))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Random-pose trials for every method, object and noise level. Methods share
/// the pose and noise stream of each trial.
pub fn run_experiment(objects: &[ObjectModel], methods: &[Method], cfg: &ExperimentConfig) -> Result<ExperimentReport, PoseError> {
    if objects.is_empty() || methods.is_empty() {
        return Err(PoseError::InvalidExperiment("need at least one object and one method".into()));
    }
    if cfg.noise_levels.is_empty() || cfg.trials == 0 {
        return Err(PoseError::InvalidExperiment("need at least one noise level and one trial".into()));
    }
    if !(cfg.threshold_frac > 0.0) {
        return Err(PoseError::InvalidExperiment(format!("threshold_frac must be positive, got {}", cfg.threshold_frac)));
    }
    for &s in &cfg.noise_levels {
        VoteNoiseModel { gaussian_std: s, outlier_rate: cfg.outlier_rate, outlier_spread: cfg.outlier_spread, rng_seed: 0 }
            .validate()?;
    }
    let mut inputs = Vec::new();
    for m in methods {
        let sets: Vec<&KeypointSet> = match &m.keypoints {
            KeypointProvider::PerObject(v) => {
                if v.len() != objects.len() {
                    return Err(PoseError::InvalidExperiment(format!(
                        "method {} provides {} keypoint sets for {} objects",
                        m.name,
                        v.len(),
                        objects.len()
                    )));
                }
                v.iter().collect()
            }
            KeypointProvider::Shared(k) => vec![k; objects.len()],
        };
        let per_obj: Vec<TrialInput> = objects
            .iter()
            .zip(sets)
            .enumerate()
            .map(|(o, (model, k))| TrialInput {
                model,
                model_kps: denormalize_keypoints(k, model).into_coords(),
                symmetric: cfg.symmetric.get(o).copied().unwrap_or(false),
            })
            .collect();
        inputs.push(per_obj);
    }

    // (method, object, level, trial) in report order
    let jobs: Vec<(usize, usize, usize, usize)> = (0..methods.len())
        .flat_map(|m| {
            (0..cfg.noise_levels.len()).flat_map(move |l| {
                (0..objects.len()).flat_map(move |o| (0..cfg.trials).map(move |t| (m, o, l, t)))
            })
        })
        .collect();
    let run = |&(m, o, l, t): &(usize, usize, usize, usize)| {
        run_trial(&inputs[m][o], cfg, cfg.noise_levels[l], trial_seed(cfg.rng_seed, o, l, t))
    };
    let outcomes: Vec<Result<(f64, f64, f64, f64), PoseError>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            jobs.iter().map(run).collect()
        }
    };

    let mut report = ExperimentReport { scheme: cfg.scheme, trials: Vec::new(), failures: Vec::new(), summaries: Vec::new() };
    let mut normalized: Vec<Vec<f64>> = vec![Vec::new(); methods.len() * cfg.noise_levels.len()];
    for (&(m, o, l, t), outcome) in jobs.iter().zip(outcomes) {
        let (method, object, noise_std, trial) = (methods[m].name.clone(), objects[o].id.clone(), cfg.noise_levels[l], l * cfg.trials + t);
        match outcome {
            Ok((add, rot_err_deg, trans_err, kp_err)) => {
                normalized[m * cfg.noise_levels.len() + l].push(add / objects[o].diameter);
                report.trials.push(TrialRecord { method, object, noise_std, trial, add, rot_err_deg, trans_err, kp_err });
            }
            Err(e) => report.failures.push(FailedTrial { method, object, noise_std, trial, reason: e.to_string() }),
        }
    }
    for (m, method) in methods.iter().enumerate() {
        for (l, &noise_std) in cfg.noise_levels.iter().enumerate() {
            let rows: Vec<&TrialRecord> = report
                .trials
                .iter()
                .filter(|r| r.method == method.name && r.noise_std == noise_std)
                .collect();
            let failed = report.failures.iter().filter(|f| f.method == method.name && f.noise_std == noise_std).count();
            let rel = &normalized[m * cfg.noise_levels.len() + l];
            report.summaries.push(MethodSummary {
                method: method.name.clone(),
                noise_std,
                completed: rows.len(),
                failed,
                mean_add: mean(rows.iter().map(|r| r.add)),
                accuracy: if rel.is_empty() {
                    0.0
                } else {
                    rel.iter().filter(|d| **d <= cfg.threshold_frac).count() as f64 / rel.len() as f64
                },
                auc: if rel.is_empty() { 0.0 } else { adds_auc(rel, 1.0, cfg.threshold_frac)? },
                mean_rot_err_deg: mean(rows.iter().map(|r| r.rot_err_deg)),
                mean_trans_err: mean(rows.iter().map(|r| r.trans_err)),
                mean_kp_err: mean(rows.iter().map(|r| r.kp_err)),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_synthetic_object, ShapeKind, SyntheticSpec};
    use approx::assert_abs_diff_eq;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn noise_free_perturbation_is_identity() {
        let cloud = PointCloud::from_positions([p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]);
        let f = compute_votes(&cloud, &[p(0.3, 0.4, 0.0)], VoteScheme::Offset).unwrap();
        assert_eq!(perturb_votes(&f, &VoteNoiseModel::default()).unwrap(), f);
    }

    #[test]
    fn gaussian_perturbation_statistics() {
        let field = VoteField { scheme: VoteScheme::Radial, values: VoteValues::Scalar(vec![vec![1.0; 10_000]]) };
        let noise = VoteNoiseModel { gaussian_std: 0.01, rng_seed: 3, ..Default::default() };
        let out = perturb_votes(&field, &noise).unwrap();
        let VoteValues::Scalar(rows) = &out.values else { unreachable!() };
        let mad = rows[0].iter().map(|v| (v - 1.0).abs()).sum::<f64>() / 10_000.0;
        let expected = 0.01 * (2.0 / PI).sqrt();
        assert!((mad - expected).abs() < 0.2 * expected, "{mad} vs {expected}");
        assert_eq!(perturb_votes(&field, &noise).unwrap(), out);
    }

    #[test]
    fn vector_votes_stay_unit() {
        let cloud = PointCloud::from_positions((0..20).map(|i| p(i as f64 * 0.1, 0.3, -0.2)));
        let f = compute_votes(&cloud, &[p(0.5, 1.0, 0.0)], VoteScheme::Vector).unwrap();
        let noise = VoteNoiseModel { gaussian_std: 0.2, outlier_rate: 0.3, rng_seed: 1, ..Default::default() };
        let VoteValues::Vector(rows) = perturb_votes(&f, &noise).unwrap().values else { unreachable!() };
        assert!(rows[0].iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    fn sphere_points() -> PointCloud {
        PointCloud::from_positions([
            p(1.0, 0.0, 0.0),
            p(-1.0, 0.0, 0.0),
            p(0.0, 1.0, 0.0),
            p(0.0, -1.0, 0.0),
            p(0.0, 0.0, 1.0),
            p(0.0, 0.0, -1.0),
        ])
    }

    #[test]
    fn recovery_examples() {
        let cloud = sphere_points();
        let field = VoteField { scheme: VoteScheme::Radial, values: VoteValues::Scalar(vec![vec![1.0; 6]]) };
        let k = recover_keypoints(&cloud, &field).unwrap();
        assert!(k[0].norm() < 1e-9);

        let target = [p(0.2, -0.4, 0.9), p(1.5, 0.1, 0.3)];
        for scheme in [VoteScheme::Radial, VoteScheme::Offset, VoteScheme::Vector] {
            let f = compute_votes(&cloud, &target, scheme).unwrap();
            let k = recover_keypoints(&cloud, &f).unwrap();
            for (a, b) in k.iter().zip(&target) {
                assert!((a - b).norm() < 1e-9, "{scheme:?}");
            }
        }
        let f = compute_votes(&cloud, &target, VoteScheme::Offset).unwrap();
        let k = recover_keypoints(&cloud, &f).unwrap();
        assert!((k[0] - target[0]).norm() < 1e-12);

        let line = PointCloud::from_positions((0..5).map(|i| p(i as f64, 0.0, 0.0)));
        let f = compute_votes(&line, &[p(0.5, 1.0, 0.0)], VoteScheme::Radial).unwrap();
        assert!(matches!(recover_keypoints(&line, &f), Err(PoseError::DegenerateRecovery { .. })));
        let f = compute_votes(&line, &[p(9.0, 0.0, 0.0)], VoteScheme::Vector).unwrap();
        assert!(recover_keypoints(&line, &f).is_err());
    }

    fn tetra() -> Vec<Point3> {
        vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(0.0, 2.0, 0.0), p(0.3, 0.2, 1.5)]
    }

    #[test]
    fn horn_examples() {
        let m = tetra();
        let e = horn_align(&m, &m).unwrap();
        assert!(e.residual < 1e-12);
        assert!((e.transform.rotation - Matrix3::identity()).abs().max() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let gt = random_pose(&mut rng, 2.0);
            let s: Vec<Point3> = m.iter().map(|x| gt.apply(x)).collect();
            let e = horn_align(&m, &s).unwrap();
            assert!((e.transform.rotation - gt.rotation).abs().max() < 1e-6);
            assert!((e.transform.translation - gt.translation).norm() < 1e-6);
        }

        let mirrored: Vec<Point3> = m.iter().map(|x| p(-x.x, x.y, x.z)).collect();
        let e = horn_align(&m, &mirrored).unwrap();
        assert_abs_diff_eq!(e.transform.rotation.determinant(), 1.0, epsilon = 1e-9);
        assert!(e.residual > 1e-3);

        let collinear = [p(0.0, 0.0, 0.0), p(1.0, 1.0, 1.0), p(2.0, 2.0, 2.0)];
        assert!(matches!(horn_align(&collinear, &collinear), Err(PoseError::DegenerateAlignment(_))));
    }

    fn model() -> ObjectModel {
        make_synthetic_object("box", &SyntheticSpec { kind: ShapeKind::Box, extents: [1.0, 0.6, 0.4], n_points: 200 }, 1).unwrap()
    }

    #[test]
    fn add_examples() {
        let m = model();
        let gt = RigidTransform::from_axis_angle(p(0.2, 1.0, 0.1), 0.7, p(0.1, 0.2, 0.3));
        assert_eq!(add_metrics(&m, &gt, &gt, false), 0.0);
        let t = p(0.03, -0.04, 0.0);
        let shifted = RigidTransform::from_translation(t).compose(&gt);
        assert_abs_diff_eq!(add_metrics(&m, &shifted, &gt, false), 0.05, epsilon = 1e-12);

        let square = PointCloud::from_positions([p(1.0, 1.0, 0.0), p(-1.0, 1.0, 0.0), p(-1.0, -1.0, 0.0), p(1.0, -1.0, 0.0)]);
        let sq = ObjectModel::new("sq", square).unwrap();
        let quarter = gt.compose(&RigidTransform::from_axis_angle(p(0.0, 0.0, 1.0), PI / 2.0, Point3::zeros()));
        assert!(add_metrics(&sq, &quarter, &gt, true) < 1e-9);
        assert!(add_metrics(&sq, &quarter, &gt, true) <= add_metrics(&sq, &quarter, &gt, false));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(adds_auc(&[0.0, 0.0], 2.0, 0.1).unwrap(), 1.0);
        assert_eq!(adds_auc(&[0.5, 1.0], 2.0, 0.1).unwrap(), 0.0);
        assert_abs_diff_eq!(adds_auc(&[0.1], 2.0, 0.1).unwrap(), 0.5, epsilon = 1e-15);
        assert!(adds_auc(&[], 1.0, 0.1).is_err());
    }

    #[test]
    fn noiseless_experiment_is_exact_and_deterministic() {
        let m = model();
        let kps = KeypointSet::new(vec![p(0.3, 0.1, 0.1), p(-0.3, 0.2, -0.1), p(0.0, -0.25, 0.15), p(0.1, 0.1, -0.2)]).unwrap();
        let methods = [Method { name: "a".into(), keypoints: KeypointProvider::Shared(kps) }];
        for scheme in [VoteScheme::Radial, VoteScheme::Offset, VoteScheme::Vector] {
            let cfg = ExperimentConfig { scheme, noise_levels: vec![0.0], trials: 10, ..Default::default() };
            let r = run_experiment(std::slice::from_ref(&m), &methods, &cfg).unwrap();
            assert!(r.failures.is_empty());
            assert!(r.trials.iter().all(|t| t.add < 1e-6), "{scheme:?}");
            assert_eq!(r, run_experiment(std::slice::from_ref(&m), &methods, &cfg).unwrap());
        }
        let cfg = ExperimentConfig { noise_levels: vec![0.01], trials: 4, ..Default::default() };
        let r = run_experiment(&[m], &methods, &cfg).unwrap();
        assert_eq!(r.to_csv().lines().count(), 5);
        let s = r.summary("a", 0.01).unwrap();
        assert!((0.0..=1.0).contains(&s.accuracy) && (0.0..=1.0).contains(&s.auc));
    }
}
