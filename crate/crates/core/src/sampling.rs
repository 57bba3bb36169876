//! Heuristic and random keypoint generators.
//!
//! All samplers work in the normalized object frame (centroid at the origin,
//! diameter 1). [`denormalize_keypoints`] maps a set back to model scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, GeometryError, ObjectModel, Point3, PointCloud};

pub const MIN_KEYPOINTS: usize = 3;
/// Keypoints closer than this count as coincident.
pub const COINCIDENT_EPS: f64 = 1e-9;
pub const DEFAULT_REGION_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("fewer than {MIN_KEYPOINTS} keypoints ({0})")]
    TooFewKeypoints(usize),
    #[error("requested {requested} samples from a cloud of {available} points")]
    NotEnoughPoints { requested: usize, available: usize },
    #[error("seed index {index} out of range for {len} points")]
    SeedOutOfRange { index: usize, len: usize },
    #[error("keypoints {0} and {1} coincide")]
    Coincident(usize, usize),
    #[error("non-finite keypoint coordinate at index {0}")]
    NonFinite(usize),
    #[error("corner index {0} is not in 0..8")]
    CornerOutOfRange(usize),
    #[error("corner index {0} appears twice")]
    DuplicateCorner(usize),
    #[error("invalid sampler parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// An ordered keypoint set, normally in the normalized object frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    coords: Vec<Point3>,
}

impl KeypointSet {
    /// Checks count, finiteness and pairwise separation.
    pub fn new(coords: Vec<Point3>) -> Result<Self, SamplingError> {
        if coords.len() < MIN_KEYPOINTS {
            return Err(SamplingError::TooFewKeypoints(coords.len()));
        }
        for (i, k) in coords.iter().enumerate() {
            if !k.iter().all(|v| v.is_finite()) {
                return Err(SamplingError::NonFinite(i));
            }
        }
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                if (coords[i] - coords[j]).norm() <= COINCIDENT_EPS {
                    return Err(SamplingError::Coincident(i, j));
                }
            }
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn n_k(&self) -> usize {
        self.coords.len()
    }

    pub fn into_coords(self) -> Vec<Point3> {
        self.coords
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        min_pairwise_distance(&self.coords)
    }
}

pub fn min_pairwise_distance(coords: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            best = best.min((coords[i] - coords[j]).norm());
        }
    }
    best
}

/// Σ_{i<j} ‖k_i − k_j‖. Accepts arbitrary candidates, coincident ones included.
pub fn dispersion_score(coords: &[Point3]) -> f64 {
    let mut total = 0.0;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            total += (coords[i] - coords[j]).norm();
        }
    }
    total
}

pub fn denormalize_keypoints(keypoints: &KeypointSet, model: &ObjectModel) -> KeypointSet {
    KeypointSet {
        coords: keypoints.coords.iter().map(|k| model.from_normalized(k)).collect(),
    }
}

pub fn normalize_keypoints(keypoints: &KeypointSet, model: &ObjectModel) -> KeypointSet {
    KeypointSet {
        coords: keypoints.coords.iter().map(|k| model.to_normalized(k)).collect(),
    }
}

/// The object's cloud mapped into its normalized frame.
pub fn normalized_cloud(model: &ObjectModel) -> PointCloud {
    PointCloud {
        points: model
            .cloud
            .points
            .iter()
            .map(|p| crate::geometry::ColoredPoint {
                position: model.to_normalized(&p.position),
                color: p.color,
            })
            .collect(),
    }
}

/// Concatenation of every object's normalized cloud, in object order. A single
/// keypoint set shared by several objects is sampled from this pool.
pub fn pooled_normalized_cloud(objects: &[ObjectModel]) -> PointCloud {
    PointCloud {
        points: objects.iter().flat_map(|m| normalized_cloud(m).points).collect(),
    }
}

/// Greedy max-min selection. The first pick is `seed_index`; each later pick
/// maximizes its distance to the selected set, lowest index winning ties.
pub fn fps_indices(cloud: &PointCloud, n: usize, seed_index: usize) -> Result<Vec<usize>, SamplingError> {
    let len = cloud.len();
    if n == 0 || n > len {
        return Err(SamplingError::NotEnoughPoints {
            requested: n,
            available: len,
        });
    }
    if seed_index >= len {
        return Err(SamplingError::SeedOutOfRange { index: seed_index, len });
    }
    let pts = cloud.position_vec();
    let mut min_d2 = vec![f64::INFINITY; len];
    let mut selected = Vec::with_capacity(n);
    let mut current = seed_index;
    loop {
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        if selected.len() == n {
            break;
        }
        let anchor = pts[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d2[i] == f64::NEG_INFINITY {
                continue;
            }
            let d2 = (p - anchor).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// FPS over a cloud already expressed in the normalized frame.
pub fn fps_sample(cloud: &PointCloud, n: usize, seed_index: usize) -> Result<KeypointSet, SamplingError> {
    let idx = fps_indices(cloud, n, seed_index)?;
    KeypointSet::new(idx.iter().map(|&i| cloud.points[i].position).collect())
}

/// Bounding box of the model's cloud in its normalized frame.
pub fn normalized_aabb(model: &ObjectModel) -> Aabb {
    let mut it = model.cloud.positions().map(|p| model.to_normalized(p));
    let first = it.next().unwrap_or_else(Point3::zeros);
    let (lo, hi) = it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)));
    Aabb {
        min_corner: lo,
        max_corner: hi,
    }
}

pub fn check_corner_subset(subset: &[usize]) -> Result<(), SamplingError> {
    let mut seen = [false; 8];
    for &c in subset {
        if c >= 8 {
            return Err(SamplingError::CornerOutOfRange(c));
        }
        if seen[c] {
            return Err(SamplingError::DuplicateCorner(c));
        }
        seen[c] = true;
    }
    if subset.len() < MIN_KEYPOINTS {
        return Err(SamplingError::TooFewKeypoints(subset.len()));
    }
    Ok(())
}

/// Normalized-frame bounding-box corners picked by index (see [`Aabb::corner`]).
pub fn bbox_corner_keypoints(model: &ObjectModel, subset: &[usize]) -> Result<KeypointSet, SamplingError> {
    check_corner_subset(subset)?;
    let aabb = normalized_aabb(model);
    KeypointSet::new(subset.iter().map(|&c| aabb.corner(c)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomMode {
    /// Uniform inside the model's bounding sphere about the origin.
    Sphere,
    /// Uniform in a ball around each of a random ordering of the box corners.
    BboxRegion,
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Point3 {
    loop {
        let v = Point3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

pub fn bounding_sphere_radius(model: &ObjectModel) -> f64 {
    model
        .cloud
        .positions()
        .map(|p| model.to_normalized(p).norm())
        .fold(0.0, f64::max)
}

pub fn random_keypoints(
    model: &ObjectModel,
    mode: RandomMode,
    n: usize,
    region_radius: f64,
    rng_seed: u64,
) -> Result<KeypointSet, SamplingError> {
    if n < MIN_KEYPOINTS {
        return Err(SamplingError::TooFewKeypoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let coords = match mode {
        RandomMode::Sphere => {
            let r = bounding_sphere_radius(model);
            (0..n).map(|_| uniform_in_ball(&mut rng, r)).collect()
        }
        RandomMode::BboxRegion => {
            if !(region_radius > 0.0) || !region_radius.is_finite() {
                return Err(SamplingError::InvalidParameters(format!(
                    "region radius must be positive, got {region_radius}"
                )));
            }
            let aabb = normalized_aabb(model);
            let mut order: Vec<usize> = (0..8).collect();
            order.shuffle(&mut rng);
            (0..n)
                .map(|i| aabb.corner(order[i % 8]) + uniform_in_ball(&mut rng, region_radius))
                .collect()
        }
    };
    KeypointSet::new(coords)
}

/// Corner assignment used by [`random_keypoints`] in `BboxRegion` mode, so
/// callers can check each keypoint against its centre.
pub fn region_corner_order(rng_seed: u64) -> [usize; 8] {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..8).collect();
    order.shuffle(&mut rng);
    std::array::from_fn(|i| order[i])
}
