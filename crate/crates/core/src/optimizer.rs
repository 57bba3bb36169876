//! Keypoint searches without a network: gradient descent on coordinates,
//! exhaustive bounding-box-corner subsets and a RANSAC-style sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ObjectModel, Point3};
use crate::loss::{self, LossConfig, LossError, PreparedObject};
use crate::sampling::{self, bbox_corner_keypoints, dispersion_score, KeypointSet, RandomMode, SamplingError};
use crate::votes::{axis_projections, VoteScheme};

/// Keypoints are kept inside `[−BOUND, BOUND]³`, 1.5× the normalized box.
pub const BOUND: f64 = 0.75;
pub const MAX_HALVINGS: usize = 20;
pub const MIN_STEP_NORM: f64 = 1e-8;
pub const DEFAULT_MIN_SEPARATION: f64 = 0.2;
pub const DEFAULT_W_SIM: f64 = 1.0;
pub const DEFAULT_W_DISP: f64 = 0.1;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("corner count must be within 3..=8, got {0}")]
    CornerCount(usize),
    #[error("no objects")]
    NoObjects,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub steps: usize,
    /// Initial trial step of each line search.
    pub lr: f64,
    /// Reported through [`SearchResult::valid`]; never enforced.
    pub min_separation: f64,
    /// When set, weights follow the two-phase schedule, swapping at this step.
    pub schedule_swap: Option<usize>,
    pub loss: LossConfig,
    pub rng_seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            min_separation: DEFAULT_MIN_SEPARATION,
            schedule_swap: None,
            loss: LossConfig::default(),
            rng_seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(OptimizeError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.min_separation >= 0.0) {
            return Err(OptimizeError::InvalidConfig(format!(
                "min_separation must be non-negative, got {}",
                self.min_separation
            )));
        }
        self.loss.validate()?;
        Ok(())
    }

    fn loss_at(&self, step: usize) -> LossConfig {
        match self.schedule_swap {
            Some(swap) => self.loss.with_weights(loss::weight_schedule_at(step, swap)),
            None => self.loss.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub keypoints: KeypointSet,
    pub score: f64,
    pub evaluated: usize,
    /// Best score after each iteration.
    pub trace: Vec<f64>,
    /// Corner indices for corner-subset results.
    pub subset: Option<Vec<usize>>,
    pub min_distance: f64,
    /// Whether `min_distance` meets the requested separation.
    pub valid: bool,
}

impl SearchResult {
    fn new(keypoints: KeypointSet, score: f64, evaluated: usize, trace: Vec<f64>, min_separation: f64) -> Self {
        let min_distance = keypoints.min_pairwise_distance();
        Self {
            keypoints,
            score,
            evaluated,
            trace,
            subset: None,
            min_distance,
            valid: min_distance >= min_separation,
        }
    }
}

fn clamp_to_bound(p: Point3) -> Point3 {
    p.map(|v| v.clamp(-BOUND, BOUND))
}

/// Gradient descent on keypoint coordinates with a backtracking line search.
///
/// Each step tries `lr` and halves it (up to [`MAX_HALVINGS`] times) until the
/// projected candidate does not increase the loss; if none qualifies the step
/// is skipped. The trace holds the loss after every step under that step's
/// weights, so it is non-increasing within each schedule phase.
pub fn optimize_keypoints_direct(
    init: &KeypointSet,
    objects: &[ObjectModel],
    cfg: &OptimizeConfig,
) -> Result<SearchResult, OptimizeError> {
    optimize_prepared(init, &loss::prepare_objects(objects), cfg)
}

pub fn optimize_prepared(
    init: &KeypointSet,
    objects: &[PreparedObject],
    cfg: &OptimizeConfig,
) -> Result<SearchResult, OptimizeError> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(OptimizeError::NoObjects);
    }
    let mut k: Vec<Point3> = init.coords().to_vec();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut evaluated = 0;
    let mut current = loss::combined_loss_prepared(&k, objects, &cfg.loss_at(0))?.total;

    for step in 0..cfg.steps {
        let lc = cfg.loss_at(step);
        if step > 0 && cfg.loss_at(step - 1) != lc {
            current = loss::combined_loss_prepared(&k, objects, &lc)?.total;
        }
        let (report, grad) = loss::loss_and_gradient_prepared(&k, objects, &lc)?;
        evaluated += 1;
        current = current.min(report.total);

        let mut t = cfg.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Point3> = k.iter().zip(&grad).map(|(p, g)| clamp_to_bound(p - g * t)).collect();
            if sampling::min_pairwise_distance(&trial) > sampling::COINCIDENT_EPS {
                let value = loss::combined_loss_prepared(&trial, objects, &lc)?.total;
                evaluated += 1;
                if value <= current {
                    accepted = Some((trial, value));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, value)) = accepted else {
            trace.push(current);
            continue;
        };
        let moved: f64 = k.iter().zip(&next).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        k = next;
        current = value;
        trace.push(current);
        if moved < MIN_STEP_NORM {
            break;
        }
    }
    let keypoints = KeypointSet::new(k)?;
    Ok(SearchResult::new(keypoints, current, evaluated, trace, cfg.min_separation))
}

/// Σ over keypoint pairs of exact W1, averaged over vote channels and objects.
pub fn pairwise_w1_sum(
    keypoints: &[Point3],
    objects: &[PreparedObject],
    scheme: VoteScheme,
    projections: &[Point3],
) -> Result<f64, OptimizeError> {
    let cfg = LossConfig {
        alpha: 1.0,
        beta: 0.0,
        scheme,
        projections: projections.to_vec(),
        ..LossConfig::default()
    };
    Ok(loss::combined_loss_prepared(keypoints, objects, &cfg)?.similarity_sum())
}

/// All `n`-element subsets of `0..8` in lexicographic order.
pub fn corner_subsets(n: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for c in start..8 {
            cur.push(c);
            rec(c + 1, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::with_capacity(n), &mut out);
    out
}

fn check_corner_count(n: usize) -> Result<(), OptimizeError> {
    if !(3..=8).contains(&n) {
        return Err(OptimizeError::CornerCount(n));
    }
    Ok(())
}

fn subset_result(model: &ObjectModel, subset: &[usize], score: f64, evaluated: usize, trace: Vec<f64>) -> Result<SearchResult, OptimizeError> {
    let mut r = SearchResult::new(bbox_corner_keypoints(model, subset)?, score, evaluated, trace, 0.0);
    r.subset = Some(subset.to_vec());
    Ok(r)
}

/// Scores every `n`-corner subset of the normalized bounding box by pairwise
/// W1 and returns the minimum and maximum; ties keep the earlier subset.
pub fn exhaustive_corner_search(
    model: &ObjectModel,
    n: usize,
    scheme: VoteScheme,
) -> Result<(SearchResult, SearchResult), OptimizeError> {
    check_corner_count(n)?;
    let objects = loss::prepare_objects(std::slice::from_ref(model));
    let projections = axis_projections();
    let subsets = corner_subsets(n);
    let score = |s: &Vec<usize>| -> Result<f64, OptimizeError> {
        let k = bbox_corner_keypoints(model, s)?;
        pairwise_w1_sum(k.coords(), &objects, scheme, &projections)
    };
    let scores: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            subsets.par_iter().map(score).collect::<Result<_, _>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            subsets.iter().map(score).collect::<Result<_, _>>()?
        }
    };
    let (mut best, mut worst) = (0, 0);
    let (mut best_trace, mut worst_trace) = (Vec::with_capacity(scores.len()), Vec::with_capacity(scores.len()));
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
        if s > scores[worst] {
            worst = i;
        }
        best_trace.push(scores[best]);
        worst_trace.push(scores[worst]);
    }
    Ok((
        subset_result(model, &subsets[best], scores[best], scores.len(), best_trace)?,
        subset_result(model, &subsets[worst], scores[worst], scores.len(), worst_trace)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CandidateSampler {
    Random { mode: RandomMode, region_radius: f64 },
    /// Iteration `t` takes the `t`-th corner subset in lexicographic order, cycling.
    CornerSubsets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub n: usize,
    pub iterations: usize,
    pub sampler: CandidateSampler,
    pub w_sim: f64,
    pub w_disp: f64,
    pub scheme: VoteScheme,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            n: 8,
            iterations: 100,
            sampler: CandidateSampler::Random { mode: RandomMode::BboxRegion, region_radius: sampling::DEFAULT_REGION_RADIUS },
            w_sim: DEFAULT_W_SIM,
            w_disp: DEFAULT_W_DISP,
            scheme: VoteScheme::Radial,
            rng_seed: 0,
        }
    }
}

/// `w_sim · pairwise W1 − w_disp · dispersion score`; lower is better.
pub fn ransac_score(
    keypoints: &[Point3],
    objects: &[PreparedObject],
    scheme: VoteScheme,
    w_sim: f64,
    w_disp: f64,
) -> Result<f64, OptimizeError> {
    Ok(w_sim * pairwise_w1_sum(keypoints, objects, scheme, &axis_projections())? - w_disp * dispersion_score(keypoints))
}

/// Draws `iterations` candidate sets and keeps the lowest-scoring one (first wins ties).
pub fn ransac_keypoint_search(model: &ObjectModel, cfg: &RansacConfig) -> Result<SearchResult, OptimizeError> {
    if cfg.iterations == 0 {
        return Err(OptimizeError::InvalidConfig("iterations must be at least 1".into()));
    }
    let objects = loss::prepare_objects(std::slice::from_ref(model));
    let subsets = match cfg.sampler {
        CandidateSampler::CornerSubsets => {
            check_corner_count(cfg.n)?;
            corner_subsets(cfg.n)
        }
        CandidateSampler::Random { .. } => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(KeypointSet, f64, Option<Vec<usize>>)> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (candidate, subset) = match cfg.sampler {
            CandidateSampler::Random { mode, region_radius } => {
                (sampling::random_keypoints(model, mode, cfg.n, region_radius, rng.random())?, None)
            }
            CandidateSampler::CornerSubsets => {
                let s = &subsets[t % subsets.len()];
                (bbox_corner_keypoints(model, s)?, Some(s.clone()))
            }
        };
        let score = ransac_score(candidate.coords(), &objects, cfg.scheme, cfg.w_sim, cfg.w_disp)?;
        if best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((candidate, score, subset));
        }
        trace.push(best.as_ref().unwrap().1);
    }
    let (keypoints, score, subset) = best.unwrap();
    let mut r = SearchResult::new(keypoints, score, cfg.iterations, trace, 0.0);
    r.subset = subset;
    Ok(r)
}
