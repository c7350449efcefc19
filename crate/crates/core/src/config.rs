//! Experiment configuration file.
//!
//! The file is sectioned `key = value` text: `[sim]`, `[model]`, `[train]`,
//! `[eval]` and an optional `[sweep]`, with scalars and bracketed lists.
//! Every key has a default; the defaults describe the acceptance benchmark.
//!
//! ```text
//! output_dir = "runs/default"
//!
//! [train]
//! beta = 0.05
//! frames = 3          # T
//! range = 9           # R, or "inf"
//! percentile = [40, 60]
//!
//! [sweep]
//! axis = "beta"
//! values = [0.03, 0.04, 0.05, 0.06, 0.07]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distill::PercentileWindow;
use crate::error::{Error, Result};
use crate::metrics::Method;
use crate::model::{Activation, ModelDims};
use crate::sim::{GaussianMode, ObjectnessModel, SamplingRange, SimSpec, UniformBox};
use crate::train::{EncoderGrad, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodModeConfig {
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Training videos; evaluation videos are drawn after these.
    pub videos: usize,
    pub frames_per_video: usize,
    pub proposals_per_frame: usize,
    /// Explicit class means; when absent, K orthogonal directions of length `id_cluster_radius`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id_cluster_means: Option<Vec<Vec<f64>>>,
    pub id_cluster_radius: f64,
    pub id_cluster_scale: f64,
    /// Explicit Gaussian OOD modes; when absent, `ood_gaussian_modes` random ones are drawn.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_modes: Option<Vec<OodModeConfig>>,
    pub ood_gaussian_modes: usize,
    /// Distance of each generated OOD mode from the span of the class means.
    pub ood_mode_radius: f64,
    /// Fraction of one class mean added to each generated OOD mode.
    pub ood_class_shift: f64,
    pub ood_mode_scale: f64,
    pub ood_box: BoxConfig,
    pub ood_fraction: f64,
    pub temporal_noise_scale: f64,
    pub objectness: ObjectnessModel,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_classes: 4,
            feature_dim: 16,
            videos: 40,
            frames_per_video: 30,
            proposals_per_frame: 24,
            id_cluster_means: None,
            id_cluster_radius: 3.0,
            id_cluster_scale: 0.6,
            ood_modes: None,
            ood_gaussian_modes: 3,
            ood_mode_radius: 8.0,
            ood_class_shift: 0.6,
            ood_mode_scale: 0.6,
            ood_box: BoxConfig { low: -1.5, high: 1.5 },
            ood_fraction: 0.3,
            temporal_noise_scale: 0.2,
            objectness: ObjectnessModel::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_dim: usize,
    pub activation: Activation,
    pub theta_u_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_dim: 8,
            activation: Activation::Tanh,
            theta_u_init: 1.0,
        }
    }
}

/// `R` in the config file: a positive integer or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeSetting(pub SamplingRange);

impl Serialize for RangeSetting {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        match self.0 {
            SamplingRange::Finite(r) => s.serialize_u64(r as u64),
            SamplingRange::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for RangeSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(r) => Ok(RangeSetting(SamplingRange::Finite(r as usize))),
            Raw::Float(f) if f.is_infinite() && f > 0.0 => Ok(RangeSetting(SamplingRange::Infinite)),
            Raw::Str(s) if s == "inf" => Ok(RangeSetting(SamplingRange::Infinite)),
            _ => Err(serde::de::Error::custom(
                "range must be a non-negative integer or \"inf\"",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beta: f64,
    pub frames: usize,
    pub range: RangeSetting,
    pub percentile: [u32; 2],
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_key_frames: usize,
    pub objectness_threshold: f64,
    pub encoder_grad: EncoderGrad,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            beta: t.beta,
            frames: t.frames,
            range: RangeSetting(t.range),
            percentile: [t.percentile.lower, t.percentile.upper],
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_key_frames: t.batch_key_frames,
            objectness_threshold: t.objectness_threshold,
            encoder_grad: t.encoder_grad,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            beta: self.beta,
            frames: self.frames,
            range: self.range.0,
            percentile: PercentileWindow {
                lower: self.percentile[0],
                upper: self.percentile[1],
            },
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_key_frames: self.batch_key_frames,
            objectness_threshold: self.objectness_threshold,
            encoder_grad: self.encoder_grad,
            uncertainty_branch: true,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub videos: usize,
    pub methods: Vec<Method>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            videos: 10,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "T")]
    Frames,
    #[serde(rename = "R")]
    Range,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "percentile")]
    Percentile,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Frames => "T",
            SweepAxis::Range => "R",
            SweepAxis::Beta => "beta",
            SweepAxis::Percentile => "percentile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Integers for T, integers or `"inf"` for R, reals for beta, `"p-q"` strings for percentile.
    pub values: Vec<toml::Value>,
}

/// One parsed sweep value; `Display` gives its label in summaries and directory names.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Frames(usize),
    Range(SamplingRange),
    Beta(f64),
    Percentile(PercentileWindow),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Frames(t) => write!(f, "{t}"),
            SweepValue::Range(r) => write!(f, "{r}"),
            SweepValue::Beta(b) => write!(f, "{b}"),
            SweepValue::Percentile(w) => write!(f, "{w}"),
        }
    }
}

impl SweepConfig {
    pub fn parsed_values(&self) -> Result<Vec<SweepValue>> {
        let key = "sweep.values";
        if self.values.is_empty() {
            return Err(Error::config(key, "sweep needs at least one value"));
        }
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let bad = |what: &str| Error::config(key, format!("value #{i} ({v}) is not {what}"));
                match self.axis {
                    SweepAxis::Frames => match v.as_integer() {
                        Some(t) if t >= 1 => Ok(SweepValue::Frames(t as usize)),
                        _ => Err(bad("a positive integer T")),
                    },
                    SweepAxis::Range => match (v.as_integer(), v.as_str(), v.as_float()) {
                        (Some(r), _, _) if r >= 1 => Ok(SweepValue::Range(SamplingRange::Finite(r as usize))),
                        (_, Some("inf"), _) => Ok(SweepValue::Range(SamplingRange::Infinite)),
                        (_, _, Some(f)) if f.is_infinite() && f > 0.0 => Ok(SweepValue::Range(SamplingRange::Infinite)),
                        _ => Err(bad("a positive integer R or \"inf\"")),
                    },
                    SweepAxis::Beta => match v.as_float().or_else(|| v.as_integer().map(|x| x as f64)) {
                        Some(b) if b.is_finite() && b >= 0.0 => Ok(SweepValue::Beta(b)),
                        _ => Err(bad("a non-negative beta")),
                    },
                    SweepAxis::Percentile => {
                        let s = v.as_str().ok_or_else(|| bad("a \"p-q\" string"))?;
                        let (p, q) = s.split_once('-').ok_or_else(|| bad("a \"p-q\" string"))?;
                        let (p, q) = (
                            p.trim().parse().map_err(|_| bad("a \"p-q\" string"))?,
                            q.trim().parse().map_err(|_| bad("a \"p-q\" string"))?,
                        );
                        PercentileWindow::new(p, q)
                            .map(SweepValue::Percentile)
                            .map_err(|e| Error::config(key, format!("value #{i}: {e}")))
                    }
                }
            })
            .collect()
    }
}

/// Typed settings for a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub sim: SimSpec<f64>,
    pub train_videos: usize,
    pub eval_videos: usize,
    pub model_dims: ModelDims,
    pub activation: Activation,
    pub theta_u_init: f64,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
}

fn gram_schmidt(vectors: &mut [Vec<f64>]) {
    for i in 0..vectors.len() {
        for j in 0..i {
            let proj: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vectors.split_at_mut(i);
            for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                *x -= proj * y;
            }
        }
        let norm = vectors[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        vectors[i].iter_mut().for_each(|x| *x /= norm);
    }
}

impl SimConfig {
    /// Draws class means and OOD modes when they are not given explicitly.
    pub fn to_spec(&self) -> Result<SimSpec<f64>> {
        let m = self.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let mut gaussian = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        };

        let id_cluster_means = match &self.id_cluster_means {
            Some(means) => means.clone(),
            None => {
                if self.num_classes > m {
                    return Err(Error::config(
                        "sim.id_cluster_means",
                        "generated means need num_classes <= feature_dim; list them explicitly",
                    ));
                }
                let mut dirs = gaussian(self.num_classes);
                gram_schmidt(&mut dirs);
                dirs.into_iter()
                    .map(|d| d.into_iter().map(|x| x * self.id_cluster_radius).collect())
                    .collect()
            }
        };
        let ood_modes = match &self.ood_modes {
            Some(modes) => modes
                .iter()
                .map(|g| GaussianMode {
                    mean: g.mean.clone(),
                    scale: g.scale,
                })
                .collect(),
            None => {
                let n = self.ood_gaussian_modes;
                if id_cluster_means.len() + n > m {
                    return Err(Error::config(
                        "sim.ood_modes",
                        "generated modes need num_classes + ood_gaussian_modes <= feature_dim; list them explicitly",
                    ));
                }
                // directions orthogonal to every class mean, then shifted toward one class each
                let mut dirs = id_cluster_means.clone();
                dirs.extend(gaussian(n));
                gram_schmidt(&mut dirs);
                dirs.split_off(id_cluster_means.len())
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let anchor = &id_cluster_means[i % id_cluster_means.len()];
                        GaussianMode {
                            mean: d
                                .iter()
                                .zip(anchor)
                                .map(|(x, a)| x * self.ood_mode_radius + a * self.ood_class_shift)
                                .collect(),
                            scale: self.ood_mode_scale,
                        }
                    })
                    .collect()
            }
        };
        Ok(SimSpec {
            num_classes: self.num_classes,
            feature_dim: m,
            frames_per_video: self.frames_per_video,
            proposals_per_frame: self.proposals_per_frame,
            id_cluster_means,
            id_cluster_scale: self.id_cluster_scale,
            ood_modes,
            ood_box: UniformBox {
                low: self.ood_box.low,
                high: self.ood_box.high,
            },
            ood_fraction_per_frame: self.ood_fraction,
            temporal_noise_scale: self.temporal_noise_scale,
            objectness: self.objectness,
            seed: self.seed,
        })
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                source_name: source.to_string(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Sets both the simulator and the trainer seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Returns a copy with one sweep value substituted and the sweep removed.
    pub fn with_sweep_value(&self, value: SweepValue) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        match value {
            SweepValue::Frames(t) => c.train.frames = t,
            SweepValue::Range(r) => c.train.range = RangeSetting(r),
            SweepValue::Beta(b) => c.train.beta = b,
            SweepValue::Percentile(w) => c.train.percentile = [w.lower, w.upper],
        }
        c
    }

    /// Replaces generated means and modes by their drawn values.
    pub fn resolved(&self) -> Result<Self> {
        let spec = self.sim.to_spec()?;
        let mut c = self.clone();
        c.sim.id_cluster_means = Some(spec.id_cluster_means);
        c.sim.ood_modes = Some(
            spec.ood_modes
                .into_iter()
                .map(|g| OodModeConfig {
                    mean: g.mean,
                    scale: g.scale,
                })
                .collect(),
        );
        Ok(c)
    }

    pub fn resolve_run(&self) -> Result<ResolvedRun> {
        let sim = self.sim.to_spec()?;
        sim.validate()?;
        let train = self.train.to_train_config();
        train.validate()?;
        if self.model.enc_dim == 0 {
            return Err(Error::config("model.enc_dim", "must be at least 1"));
        }
        if !(self.model.theta_u_init.is_finite() && self.model.theta_u_init > 0.0) {
            return Err(Error::config("model.theta_u_init", "theta_u must be positive"));
        }
        Ok(ResolvedRun {
            model_dims: ModelDims {
                feature_dim: sim.feature_dim,
                enc_dim: self.model.enc_dim,
                num_classes: sim.num_classes,
            },
            sim,
            train_videos: self.sim.videos,
            eval_videos: self.eval.videos,
            activation: self.model.activation,
            theta_u_init: self.model.theta_u_init,
            train,
            methods: self.eval.methods.clone(),
        })
    }

    /// Every invariant violation (errors) and suspicious setting (warnings), without running.
    pub fn check(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut error = |e: Error| report.errors.push(e.to_string());

        match self.sim.to_spec() {
            Ok(spec) => {
                if let Err(e) = spec.validate() {
                    error(e);
                }
            }
            Err(e) => error(e),
        }
        if self.sim.videos == 0 {
            error(Error::config("sim.videos", "need at least one training video"));
        }
        if self.sim.videos * self.sim.frames_per_video < 2 {
            error(Error::config("sim", "training needs at least 2 frames"));
        }
        for e in self.train.to_train_config().violations() {
            error(e);
        }
        if self.model.enc_dim == 0 {
            error(Error::config("model.enc_dim", "must be at least 1"));
        }
        if !(self.model.theta_u_init.is_finite() && self.model.theta_u_init > 0.0) {
            error(Error::config("model.theta_u_init", "theta_u must be positive"));
        }
        if self.eval.videos == 0 {
            error(Error::config("eval.videos", "need at least one evaluation video"));
        }
        if self.eval.methods.is_empty() {
            error(Error::config("eval.methods", "list at least one scoring method"));
        }
        if let Some(sweep) = &self.sweep {
            if let Err(e) = sweep.parsed_values() {
                error(e);
            }
        }

        let warn = &mut report.warnings;
        if self.train.learning_rate == 0.0 {
            warn.push("train.learning_rate = 0: parameters will not change".into());
        }
        let obj = &self.sim.objectness;
        if self.train.objectness_threshold > obj.id_mean.max(obj.ood_mean) {
            warn.push(
                "train.objectness_threshold exceeds both objectness means; few proposals will be collected".into(),
            );
        }
        if let SamplingRange::Finite(r) = self.train.range.0 {
            if self.train.frames > 2 * r {
                warn.push(format!(
                    "train.frames = {} exceeds the {} frames inside range R = {r}",
                    self.train.frames,
                    2 * r
                ));
            }
        }
        if self.train.beta == 0.0 {
            warn.push("train.beta = 0: the uncertainty branch has no effect".into());
        }
        report
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}
