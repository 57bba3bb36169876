use std::fmt::Write as _;
use std::path::Path;

use keyopt::distances;
use keyopt::encoder::{self, Checkpoint, GraphEncoder, TrainConfig};
use keyopt::geometry::{self, CloudFormat, ObjectModel, Point3, SyntheticSpec};
use keyopt::loss;
use keyopt::optimizer::{self, CandidateSampler, OptimizeConfig, RansacConfig, SearchResult};
use keyopt::posesim::{self, ExperimentConfig, KeypointProvider, Method};
use keyopt::sampling::{self, KeypointSet, RandomMode};
use keyopt::votes::{self, VoteScheme};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, MethodSource, RunConfig, SampleMethod, SearchMode, Stream};
use crate::error::{runtime, CliError};
use crate::output::Output;

/// Keypoints JSON: normalized-frame coordinates plus the objects they were selected for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub scheme: VoteScheme,
    pub objects: Vec<String>,
    pub keypoints: Vec<[f64; 3]>,
}

impl KeypointFile {
    fn new(scheme: VoteScheme, objects: Vec<String>, set: &KeypointSet) -> Self {
        Self { scheme, objects, keypoints: set.coords().iter().map(|p| [p.x, p.y, p.z]).collect() }
    }

    pub fn read(path: &Path) -> Result<KeypointSet, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read keypoints {}: {e}", path.display())))?;
        let file: KeypointFile =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        KeypointSet::new(file.keypoints.iter().map(|k| Point3::new(k[0], k[1], k[2])).collect())
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
struct ObjectSummary {
    id: String,
    n_points: usize,
    diameter: f64,
    centroid: [f64; 3],
    symmetric: bool,
    file: String,
}

fn value_name<T: clap::ValueEnum>(v: T) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

pub fn load_objects(cfg: &RunConfig) -> Result<Vec<ObjectModel>, CliError> {
    let base = derive_seed(cfg.seed, Stream::Objects);
    cfg.objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let id = cfg.object_id(i);
            match (&o.kind, &o.path) {
                (Some(kind), None) => {
                    let spec = SyntheticSpec { kind: *kind, extents: o.extents.unwrap_or_default(), n_points: o.n_points.unwrap_or_default() };
                    let seed = o.seed.unwrap_or(base.wrapping_add(i as u64));
                    geometry::make_synthetic_object(id, &spec, seed).map_err(|e| CliError::Validation(format!("objects[{i}]: {e}")))
                }
                (None, Some(path)) => {
                    let format = CloudFormat::from_path(path)
                        .ok_or_else(|| CliError::Validation(format!("objects[{i}]: unknown cloud format for {}", path.display())))?;
                    let cloud = geometry::load_point_cloud(path, format).map_err(runtime)?;
                    ObjectModel::new(id, cloud).map_err(runtime)
                }
                _ => Err(CliError::Validation(format!("objects[{i}]: give exactly one of kind or path"))),
            }
        })
        .collect()
}

fn object_ids(objects: &[ObjectModel]) -> Vec<String> {
    objects.iter().map(|o| o.id.clone()).collect()
}

fn find_object<'a>(objects: &'a [ObjectModel], id: Option<&str>) -> Result<&'a ObjectModel, CliError> {
    match id {
        None => Ok(&objects[0]),
        Some(id) => objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| CliError::Validation(format!("unknown object id '{id}'"))),
    }
}

fn sample_keypoints(cfg: &RunConfig, objects: &[ObjectModel], method: SampleMethod, n: usize) -> Result<KeypointSet, CliError> {
    let seed = derive_seed(cfg.seed, Stream::Sample);
    let set = match method {
        SampleMethod::Fps => sampling::fps_sample(&sampling::pooled_normalized_cloud(objects), n, 0),
        SampleMethod::RandomSphere => sampling::random_keypoints(&objects[0], RandomMode::Sphere, n, 0.0, seed),
        SampleMethod::BboxRegion => {
            sampling::random_keypoints(&objects[0], RandomMode::BboxRegion, n, cfg.sample.region_radius, seed)
        }
        SampleMethod::BboxCorners => {
            let corners: Vec<usize> = if cfg.sample.corners.is_empty() { (0..n.min(8)).collect() } else { cfg.sample.corners.clone() };
            sampling::bbox_corner_keypoints(&objects[0], &corners)
        }
    };
    set.map_err(|e| CliError::Validation(e.to_string()))
}

pub fn synth(cfg: &RunConfig, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let mut summaries = Vec::new();
    for (o, entry) in objects.iter().zip(&cfg.objects) {
        let file = format!("objects/{}.ply", o.id);
        out.write(&file, geometry::write_ply_ascii(&o.cloud).as_bytes())?;
        summaries.push(ObjectSummary {
            id: o.id.clone(),
            n_points: o.cloud.len(),
            diameter: o.diameter,
            centroid: [o.centroid.x, o.centroid.y, o.centroid.z],
            symmetric: entry.symmetric,
            file,
        });
    }
    out.json("objects.json", &summaries)?;
    let points: usize = objects.iter().map(|o| o.cloud.len()).sum();
    Ok(format!("synth: {} objects, {points} points", objects.len()))
}

pub fn sample(cfg: &RunConfig, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let set = sample_keypoints(cfg, &objects, cfg.sample.method, cfg.n_keypoints())?;
    let report = loss::combined_loss(set.coords(), &objects, &cfg.loss_config()).map_err(runtime)?;
    out.json("keypoints.json", &KeypointFile::new(cfg.scheme, object_ids(&objects), &set))?;
    out.json("loss_report.json", &report)?;
    Ok(format!(
        "sample: {} keypoints by {}, loss {:.6}, min distance {:.4}",
        set.n_k(),
        value_name(cfg.sample.method),
        report.total,
        set.min_pairwise_distance()
    ))
}

fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

pub fn optimize(cfg: &RunConfig, init: Option<&Path>, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let start = match init {
        Some(path) => KeypointFile::read(path)?,
        None => sample_keypoints(cfg, &objects, cfg.sample.method, cfg.n_keypoints())?,
    };
    let opt = OptimizeConfig {
        steps: cfg.optimize.steps,
        lr: cfg.optimize.lr,
        min_separation: cfg.optimize.min_separation,
        schedule_swap: cfg.optimize.schedule.then_some(cfg.optimize.swap_step),
        loss: cfg.loss_config(),
        rng_seed: derive_seed(cfg.seed, Stream::Sample),
    };
    let initial = loss::combined_loss(start.coords(), &objects, &opt.loss).map_err(runtime)?.total;
    let result = optimizer::optimize_keypoints_direct(&start, &objects, &opt).map_err(runtime)?;
    let report = loss::combined_loss(result.keypoints.coords(), &objects, &opt.loss).map_err(runtime)?;
    out.json("keypoints.json", &KeypointFile::new(cfg.scheme, object_ids(&objects), &result.keypoints))?;
    out.json("result.json", &result)?;
    out.json("loss_report.json", &report)?;
    out.write("trace.csv", trace_csv(&result.trace).as_bytes())?;
    Ok(format!(
        "optimize: loss {initial:.6} -> {:.6} over {} steps, min distance {:.4}{}",
        result.score,
        result.trace.len(),
        result.min_distance,
        if result.valid { "" } else { " (below min_separation)" }
    ))
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    mode: SearchMode,
    object: &'a str,
    best: &'a SearchResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    worst: Option<&'a SearchResult>,
}

pub fn search(cfg: &RunConfig, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let model = find_object(&objects, cfg.search.object.as_deref())?;
    let n = cfg.n_keypoints();
    let (best, worst) = match cfg.search.mode {
        SearchMode::Exhaustive => {
            if !(3..=8).contains(&n) {
                return Err(CliError::Validation(format!("exhaustive corner search needs 3..=8 keypoints, got {n}")));
            }
            let (b, w) = optimizer::exhaustive_corner_search(model, n, cfg.scheme).map_err(runtime)?;
            (b, Some(w))
        }
        SearchMode::Ransac => {
            let sampler = match RunConfig::random_mode(cfg.search.sampler) {
                Some(mode) => CandidateSampler::Random { mode, region_radius: cfg.search.region_radius },
                None => CandidateSampler::CornerSubsets,
            };
            let rc = RansacConfig {
                n,
                iterations: cfg.search.iterations,
                sampler,
                w_sim: cfg.search.w_sim,
                w_disp: cfg.search.w_disp,
                scheme: cfg.scheme,
                rng_seed: derive_seed(cfg.seed, Stream::Search),
            };
            (optimizer::ransac_keypoint_search(model, &rc).map_err(runtime)?, None)
        }
    };
    out.json("search.json", &SearchOutput { mode: cfg.search.mode, object: &model.id, best: &best, worst: worst.as_ref() })?;
    out.json("keypoints.json", &KeypointFile::new(cfg.scheme, vec![model.id.clone()], &best.keypoints))?;
    let mut line = format!("search: {} over {} candidates on '{}', best score {:.6}", value_name(cfg.search.mode), best.evaluated, model.id, best.score);
    if let Some(w) = &worst {
        let _ = write!(line, ", worst {:.6}", w.score);
    }
    Ok(line)
}

fn predict(enc: &GraphEncoder, model: &ObjectModel, max_points: usize) -> Result<KeypointSet, CliError> {
    let input = encoder::encoder_input(&sampling::normalized_cloud(model), max_points).map_err(runtime)?;
    encoder::encoder_forward(enc, &input).map_err(runtime)
}

pub fn train_encoder(cfg: &RunConfig, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        lr0: t.lr0,
        k: t.k,
        hidden: t.hidden,
        n_k: cfg.n_keypoints(),
        use_color: t.use_color,
        max_points: t.max_points,
        schedule: t.schedule,
        loss: cfg.loss_config(),
        rng_seed: derive_seed(cfg.seed, Stream::Train),
    };
    let (enc, records) = encoder::train_encoder(&objects, &tc).map_err(runtime)?;
    out.json("checkpoint.json", &Checkpoint::from(&enc))?;
    let mut csv = String::from("epoch,lr,alpha,beta,loss\n");
    for r in &records {
        let _ = writeln!(csv, "{},{},{},{},{}", r.epoch, r.lr, r.alpha, r.beta, r.loss);
    }
    out.write("training.csv", csv.as_bytes())?;
    for o in &objects {
        let set = predict(&enc, o, t.max_points)?;
        out.json(&format!("keypoints_{}.json", o.id), &KeypointFile::new(cfg.scheme, vec![o.id.clone()], &set))?;
    }
    let (first, last) = (records[0].loss, records[records.len() - 1].loss);
    Ok(format!("train-encoder: {} epochs, loss {first:.6} -> {last:.6}", records.len()))
}

fn method_keypoints(cfg: &RunConfig, objects: &[ObjectModel], source: &MethodSource) -> Result<KeypointProvider, CliError> {
    let n = cfg.n_keypoints();
    let shared = |m: SampleMethod, c: &RunConfig| sample_keypoints(c, objects, m, n).map(KeypointProvider::Shared);
    match source {
        MethodSource::Fps => shared(SampleMethod::Fps, cfg),
        MethodSource::RandomSphere => shared(SampleMethod::RandomSphere, cfg),
        MethodSource::BboxRegion { region_radius } => {
            let mut c = cfg.clone();
            c.sample.region_radius = *region_radius;
            shared(SampleMethod::BboxRegion, &c)
        }
        MethodSource::BboxCorners { corners } => {
            let mut c = cfg.clone();
            c.sample.corners = corners.clone();
            shared(SampleMethod::BboxCorners, &c)
        }
        MethodSource::File { path } => Ok(KeypointProvider::Shared(KeypointFile::read(path)?)),
        MethodSource::Checkpoint { path } => {
            let enc = encoder::load_checkpoint(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let sets = objects.iter().map(|o| predict(&enc, o, cfg.train.max_points)).collect::<Result<_, _>>()?;
            Ok(KeypointProvider::PerObject(sets))
        }
    }
}

pub fn eval(cfg: &RunConfig, extra_keypoints: Option<&Path>, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let mut entries = cfg.eval.methods.clone();
    if entries.is_empty() && extra_keypoints.is_none() {
        entries.push(crate::config::MethodEntry { name: "fps".into(), source: MethodSource::Fps });
    }
    let mut methods = Vec::new();
    for m in &entries {
        methods.push(Method { name: m.name.clone(), keypoints: method_keypoints(cfg, &objects, &m.source)? });
    }
    if let Some(path) = extra_keypoints {
        methods.push(Method { name: "keypoints".into(), keypoints: KeypointProvider::Shared(KeypointFile::read(path)?) });
    }
    let e = &cfg.eval;
    let ec = ExperimentConfig {
        scheme: cfg.scheme,
        noise_levels: e.noise_levels.clone(),
        outlier_rate: e.outlier_rate,
        outlier_spread: e.outlier_spread,
        trials: e.trials,
        translation_range: e.translation_range,
        symmetric: cfg.objects.iter().map(|o| o.symmetric).collect(),
        threshold_frac: e.threshold_frac,
        rng_seed: derive_seed(cfg.seed, Stream::Eval),
    };
    let report = posesim::run_experiment(&objects, &methods, &ec).map_err(runtime)?;
    out.json("report.json", &report)?;
    out.write("trials.csv", report.to_csv().as_bytes())?;
    let mut csv = String::from("method,noise_std,completed,failed,mean_add,accuracy,auc,mean_rot_err_deg,mean_trans_err,mean_kp_err\n");
    for s in &report.summaries {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            s.method, s.noise_std, s.completed, s.failed, s.mean_add, s.accuracy, s.auc, s.mean_rot_err_deg, s.mean_trans_err, s.mean_kp_err
        );
    }
    out.write("summary.csv", csv.as_bytes())?;

    let top = *e.noise_levels.last().expect("validated non-empty");
    let parts: Vec<String> = methods
        .iter()
        .filter_map(|m| report.summary(&m.name, top))
        .map(|s| format!("{} AUC {:.4}", s.method, s.auc))
        .collect();
    Ok(format!(
        "eval: {} trials, {} failed; at noise {top}: {}",
        report.trials.len(),
        report.failures.len(),
        parts.join(", ")
    ))
}

pub fn hist_export(cfg: &RunConfig, keypoints: Option<&Path>, out: &mut Output) -> Result<String, CliError> {
    let objects = load_objects(cfg)?;
    let model = find_object(&objects, cfg.hist.object.as_deref())?;
    let set = match keypoints {
        Some(path) => KeypointFile::read(path)?,
        None => sample_keypoints(cfg, &objects, cfg.sample.method, cfg.n_keypoints())?,
    };
    let field = votes::compute_votes(&sampling::normalized_cloud(model), set.coords(), cfg.scheme).map_err(runtime)?;
    let channels = votes::scalar_channels(&field, &cfg.loss_config().projections).map_err(runtime)?;
    let mut w1 = String::from("channel,i,j,w1\n");
    let mut files = 0;
    for (c, rows) in channels.iter().enumerate() {
        let (lo, hi) = votes::joint_range(rows.iter().map(Vec::as_slice));
        for (j, row) in rows.iter().enumerate() {
            let h = votes::build_histogram(row, cfg.hist.bins, lo, hi).map_err(runtime)?;
            let name = if channels.len() == 1 { format!("hist/{}_k{j}.csv", model.id) } else { format!("hist/{}_k{j}_c{c}.csv", model.id) };
            out.write(&name, h.to_csv().as_bytes())?;
            files += 1;
        }
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d = distances::wasserstein1_exact(&rows[i], &rows[j]).map_err(runtime)?;
                let _ = writeln!(w1, "{c},{i},{j},{d}");
            }
        }
    }
    out.write("w1.csv", w1.as_bytes())?;
    out.json("keypoints.json", &KeypointFile::new(cfg.scheme, vec![model.id.clone()], &set))?;
    Ok(format!("hist-export: {files} histograms for '{}' ({} bins, {} channels)", model.id, cfg.hist.bins, channels.len()))
}
