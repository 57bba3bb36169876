//! Run configuration: one TOML or JSON document shared by every subcommand.

use std::path::{Path, PathBuf};

use keyopt::geometry::{Point3, ShapeKind};
use keyopt::loss::{CriticSettings, LossConfig, Similarity};
use keyopt::sampling::{self, RandomMode};
use keyopt::votes::VoteScheme;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: VoteScheme,
    /// Defaults to 3 for radial votes and 8 otherwise.
    #[serde(default)]
    pub n_keypoints: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub objects: Vec<ObjectEntry>,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub hist: HistSection,
}

fn default_scheme() -> VoteScheme {
    VoteScheme::Radial
}

/// A synthetic shape (`kind`, `extents`, `n_points`) or a point-cloud file (`path`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub kind: Option<ShapeKind>,
    #[serde(default)]
    pub extents: Option<[f64; 3]>,
    #[serde(default)]
    pub n_points: Option<usize>,
    /// Synthetic sampling seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Score with ADD-S instead of ADD.
    #[serde(default)]
    pub symmetric: bool,
}

/// Loss settings; the vote scheme and critic seed come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub similarity: Similarity,
    pub projections: Vec<[f64; 3]>,
    pub bins: usize,
    pub critic_steps: usize,
    pub critic_lr: f64,
    pub critic_lambda: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            similarity: d.similarity,
            projections: d.projections.iter().map(|p| [p.x, p.y, p.z]).collect(),
            bins: d.bins,
            critic_steps: d.critic.steps,
            critic_lr: d.critic.lr,
            critic_lambda: d.critic.lambda,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    Fps,
    RandomSphere,
    BboxRegion,
    BboxCorners,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub method: SampleMethod,
    pub region_radius: f64,
    /// Corner indices for `bbox-corners`; the first `n` corners when empty.
    pub corners: Vec<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { method: SampleMethod::Fps, region_radius: sampling::DEFAULT_REGION_RADIUS, corners: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub steps: usize,
    pub lr: f64,
    pub min_separation: f64,
    /// Swap the loss weights at `swap_step`.
    pub schedule: bool,
    pub swap_step: usize,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let d = keyopt::optimizer::OptimizeConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            min_separation: d.min_separation,
            schedule: false,
            swap_step: keyopt::loss::SCHEDULE_SWAP_EPOCH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    Exhaustive,
    Ransac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchSampler {
    RandomSphere,
    BboxRegion,
    CornerSubsets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub mode: SearchMode,
    /// Object searched; the first object when absent.
    pub object: Option<String>,
    pub iterations: usize,
    pub sampler: SearchSampler,
    pub region_radius: f64,
    pub w_sim: f64,
    pub w_disp: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = keyopt::optimizer::RansacConfig::default();
        Self {
            mode: SearchMode::Exhaustive,
            object: None,
            iterations: d.iterations,
            sampler: SearchSampler::BboxRegion,
            region_radius: sampling::DEFAULT_REGION_RADIUS,
            w_sim: d.w_sim,
            w_disp: d.w_disp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr0: f64,
    pub k: usize,
    pub hidden: usize,
    pub use_color: bool,
    pub max_points: usize,
    pub schedule: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = keyopt::encoder::TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr0: d.lr0,
            k: d.k,
            hidden: d.hidden,
            use_color: d.use_color,
            max_points: d.max_points,
            schedule: d.schedule,
        }
    }
}

/// Where an evaluated method's keypoints come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSource {
    Fps,
    RandomSphere,
    BboxRegion { region_radius: f64 },
    BboxCorners { corners: Vec<usize> },
    /// A keypoints JSON file written by `sample`, `optimize` or `search`.
    File { path: PathBuf },
    /// An encoder checkpoint; keypoints are predicted per object.
    Checkpoint { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: String,
    pub source: MethodSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub noise_levels: Vec<f64>,
    pub outlier_rate: f64,
    pub outlier_spread: f64,
    pub trials: usize,
    pub translation_range: f64,
    pub threshold_frac: f64,
    /// Defaults to a single FPS method.
    pub methods: Vec<MethodEntry>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = keyopt::posesim::ExperimentConfig::default();
        Self {
            noise_levels: d.noise_levels,
            outlier_rate: d.outlier_rate,
            outlier_spread: d.outlier_spread,
            trials: d.trials,
            translation_range: d.translation_range,
            threshold_frac: d.threshold_frac,
            methods: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistSection {
    pub bins: usize,
    /// Object exported; the first object when absent.
    pub object: Option<String>,
}

impl Default for HistSection {
    fn default() -> Self {
        Self { bins: keyopt::votes::DEFAULT_BINS, object: None }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else) and validates it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let config: RunConfig = if is_toml {
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let config = config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Makes relative object, keypoint and checkpoint paths relative to the config file.
    fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for o in &mut self.objects {
            if let Some(p) = o.path.as_mut() {
                fix(p);
            }
        }
        for m in &mut self.eval.methods {
            match &mut m.source {
                MethodSource::File { path } | MethodSource::Checkpoint { path } => fix(path),
                _ => {}
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.objects.is_empty() {
            return bad("config lists no objects".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            match (&o.kind, &o.path) {
                (Some(_), None) => {
                    if o.extents.is_none() || o.n_points.is_none() {
                        return bad(format!("objects[{i}]: synthetic objects need extents and n_points"));
                    }
                }
                (None, Some(_)) => {
                    if o.extents.is_some() || o.n_points.is_some() || o.seed.is_some() {
                        return bad(format!("objects[{i}]: extents, n_points and seed apply only to synthetic objects"));
                    }
                }
                _ => return bad(format!("objects[{i}]: give exactly one of kind or path")),
            }
            if !ids.insert(self.object_id(i)) {
                return bad(format!("objects[{i}]: duplicate id '{}'", self.object_id(i)));
            }
        }
        if let Some(n) = self.n_keypoints {
            if n < sampling::MIN_KEYPOINTS {
                return bad(format!("n_keypoints must be at least {}, got {n}", sampling::MIN_KEYPOINTS));
            }
        }
        self.loss_config().validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.optimize.lr > 0.0) || !(self.optimize.min_separation >= 0.0) {
            return bad("optimize.lr must be positive and optimize.min_separation non-negative".into());
        }
        if self.search.iterations == 0 && self.search.mode == SearchMode::Ransac {
            return bad("search.iterations must be at least 1".into());
        }
        if self.train.epochs == 0 || self.train.k == 0 || self.train.hidden == 0 || self.train.max_points == 0 {
            return bad("train.epochs, k, hidden and max_points must be positive".into());
        }
        if self.eval.trials == 0 || self.eval.noise_levels.is_empty() {
            return bad("eval needs at least one trial and one noise level".into());
        }
        if self.hist.bins == 0 {
            return bad("hist.bins must be at least 1".into());
        }
        for name in [&self.search.object, &self.hist.object].into_iter().flatten() {
            if !ids.contains(name) {
                return bad(format!("unknown object id '{name}'"));
            }
        }
        Ok(())
    }

    pub fn object_id(&self, index: usize) -> String {
        let o = &self.objects[index];
        if let Some(id) = &o.id {
            return id.clone();
        }
        match (&o.kind, &o.path) {
            (_, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("object{index}")),
            (Some(kind), None) => format!("{kind}{index}"),
            (None, None) => format!("object{index}"),
        }
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints.unwrap_or_else(|| self.scheme.default_keypoints())
    }

    pub fn loss_config(&self) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            alpha: l.alpha,
            beta: l.beta,
            gamma: l.gamma,
            similarity: l.similarity,
            scheme: self.scheme,
            projections: l.projections.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            bins: l.bins,
            critic: CriticSettings {
                steps: l.critic_steps,
                lr: l.critic_lr,
                lambda: l.critic_lambda,
                seed: derive_seed(self.seed, Stream::Critic),
            },
        }
    }

    pub fn random_mode(sampler: SearchSampler) -> Option<RandomMode> {
        match sampler {
            SearchSampler::RandomSphere => Some(RandomMode::Sphere),
            SearchSampler::BboxRegion => Some(RandomMode::BboxRegion),
            SearchSampler::CornerSubsets => None,
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Objects,
    Sample,
    Critic,
    Search,
    Train,
    Eval,
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
