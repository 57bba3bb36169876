//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes a JSON request string and returns a JSON response string.
//! The object is rebuilt from its synthetic spec on every call, which is
//! deterministic, so the page only has to keep the request around.

use keyopt::geometry::{self, GeometryError, ObjectModel, Point3, ShapeKind, SyntheticSpec};
use keyopt::loss::{self, LossConfig, LossError, PairValue};
use keyopt::optimizer::{self, OptimizeConfig, OptimizeError};
use keyopt::sampling::{self, KeypointSet, RandomMode, SamplingError};
use keyopt::votes::{self, VoteError, VoteScheme};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wasm_bindgen::prelude::*;

pub const MAX_POINTS: usize = 5000;
pub const MAX_STEPS: usize = 1000;
pub const MAX_BINS: usize = 512;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("bad request: {0}")]
    Request(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Votes(#[from] VoteError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectParams {
    pub kind: ShapeKind,
    pub extents: [f64; 3],
    pub n_points: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    Fps,
    RandomSphere,
    BboxCorners,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRequest {
    pub object: ObjectParams,
    pub method: SampleMethod,
    pub n_keypoints: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneView {
    /// Surface points in the normalized frame.
    pub points: Vec<[f64; 3]>,
    pub keypoints: Vec<[f64; 3]>,
    pub w1_sum: f64,
    pub dispersion: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRequest {
    pub object: ObjectParams,
    pub keypoints: Vec<[f64; 3]>,
    pub scheme: VoteScheme,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelView {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    /// `mass[j]` is keypoint `j`'s histogram over the shared range.
    pub mass: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VoteView {
    pub channels: Vec<ChannelView>,
    /// Exact W1 per keypoint pair, averaged over channels.
    pub w1: Vec<PairValue>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeRequest {
    pub object: ObjectParams,
    pub keypoints: Vec<[f64; 3]>,
    pub scheme: VoteScheme,
    pub steps: usize,
    pub lr: f64,
    /// Swap the loss weights at step 50.
    #[serde(default)]
    pub schedule: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizeView {
    pub keypoints: Vec<[f64; 3]>,
    pub trace: Vec<f64>,
    pub w1_before: f64,
    pub w1_after: f64,
    pub min_distance: f64,
}

fn build_object(p: &ObjectParams) -> Result<ObjectModel, DemoError> {
    if p.n_points > MAX_POINTS {
        return Err(DemoError::Invalid(format!("at most {MAX_POINTS} points, got {}", p.n_points)));
    }
    let spec = SyntheticSpec { kind: p.kind, extents: p.extents, n_points: p.n_points };
    Ok(geometry::make_synthetic_object("demo", &spec, p.seed)?)
}

fn to_arrays(points: &[Point3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn to_keypoints(coords: &[[f64; 3]]) -> Result<KeypointSet, DemoError> {
    Ok(KeypointSet::new(coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect())?)
}

fn w1_sum(keypoints: &[Point3], object: &ObjectModel, scheme: VoteScheme) -> Result<f64, DemoError> {
    let prepared = loss::prepare_objects(std::slice::from_ref(object));
    Ok(optimizer::pairwise_w1_sum(keypoints, &prepared, scheme, &votes::axis_projections())?)
}

pub fn sample_scene(req: &SceneRequest) -> Result<SceneView, DemoError> {
    let object = build_object(&req.object)?;
    let cloud = sampling::normalized_cloud(&object);
    let n = req.n_keypoints;
    let keypoints = match req.method {
        SampleMethod::Fps => sampling::fps_sample(&cloud, n, 0)?,
        SampleMethod::RandomSphere => sampling::random_keypoints(&object, RandomMode::Sphere, n, 0.0, req.seed)?,
        SampleMethod::BboxCorners => {
            if n > 8 {
                return Err(DemoError::Invalid(format!("a box has 8 corners, asked for {n}")));
            }
            sampling::bbox_corner_keypoints(&object, &(0..n).collect::<Vec<_>>())?
        }
    };
    Ok(SceneView {
        points: to_arrays(&cloud.position_vec()),
        keypoints: to_arrays(keypoints.coords()),
        w1_sum: w1_sum(keypoints.coords(), &object, VoteScheme::Radial)?,
        dispersion: sampling::dispersion_score(keypoints.coords()),
    })
}

pub fn vote_histograms(req: &VoteRequest) -> Result<VoteView, DemoError> {
    if req.bins == 0 || req.bins > MAX_BINS {
        return Err(DemoError::Invalid(format!("bins must be in 1..={MAX_BINS}, got {}", req.bins)));
    }
    let object = build_object(&req.object)?;
    let keypoints = to_keypoints(&req.keypoints)?;
    let cloud = sampling::normalized_cloud(&object);
    let field = votes::compute_votes(&cloud, keypoints.coords(), req.scheme)?;
    let projections = votes::axis_projections();
    let channels = votes::scalar_channels(&field, &projections)?;
    let labels: &[&str] = if channels.len() == 1 { &["distance"] } else { &["x", "y", "z"] };

    let mut views = Vec::with_capacity(channels.len());
    for (channel, label) in channels.iter().zip(labels) {
        let (lo, hi) = votes::joint_range(channel.iter().map(Vec::as_slice));
        let mass = channel
            .iter()
            .map(|samples| Ok(votes::build_histogram(samples, req.bins, lo, hi)?.mass))
            .collect::<Result<Vec<_>, DemoError>>()?;
        views.push(ChannelView { label: label.to_string(), lo, hi, mass });
    }

    let cfg = LossConfig { alpha: 1.0, beta: 0.0, scheme: req.scheme, ..LossConfig::default() };
    let report = loss::combined_loss(keypoints.coords(), std::slice::from_ref(&object), &cfg)?;
    Ok(VoteView { channels: views, w1: report.wass_pairs })
}

pub fn optimize_direct(req: &OptimizeRequest) -> Result<OptimizeView, DemoError> {
    if req.steps > MAX_STEPS {
        return Err(DemoError::Invalid(format!("at most {MAX_STEPS} steps, got {}", req.steps)));
    }
    let object = build_object(&req.object)?;
    let init = to_keypoints(&req.keypoints)?;
    let cfg = OptimizeConfig {
        steps: req.steps,
        lr: req.lr,
        schedule_swap: req.schedule.then_some(50),
        loss: LossConfig { scheme: req.scheme, ..LossConfig::default() },
        ..OptimizeConfig::default()
    };
    let result = optimizer::optimize_keypoints_direct(&init, std::slice::from_ref(&object), &cfg)?;
    Ok(OptimizeView {
        keypoints: to_arrays(result.keypoints.coords()),
        trace: result.trace,
        w1_before: w1_sum(init.coords(), &object, req.scheme)?,
        w1_after: w1_sum(result.keypoints.coords(), &object, req.scheme)?,
        min_distance: result.min_distance,
    })
}

fn call<Req, Resp>(request: &str, op: impl FnOnce(&Req) -> Result<Resp, DemoError>) -> Result<String, DemoError>
where
    Req: for<'de> Deserialize<'de>,
    Resp: Serialize,
{
    let req: Req = serde_json::from_str(request)?;
    Ok(serde_json::to_string(&op(&req)?)?)
}

fn js(r: Result<String, DemoError>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = sampleScene)]
pub fn sample_scene_js(request: &str) -> Result<String, JsError> {
    js(call(request, sample_scene))
}

#[wasm_bindgen(js_name = voteHistograms)]
pub fn vote_histograms_js(request: &str) -> Result<String, JsError> {
    js(call(request, vote_histograms))
}

#[wasm_bindgen(js_name = optimizeDirect)]
pub fn optimize_direct_js(request: &str) -> Result<String, JsError> {
    js(call(request, optimize_direct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_round_trips_json() {
        let out = call(
            r#"{"object":{"kind":"box","extents":[1,1,1],"n_points":50,"seed":1},"method":"fps","n_keypoints":3}"#,
            sample_scene,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["points"].as_array().unwrap().len(), 50);
        assert!(matches!(call("{}", sample_scene), Err(DemoError::Request(_))));
    }
}
