//! Seeded synthetic proposal streams.
//!
//! A video is a sequence of frames, each holding a fixed number of object
//! proposals. In-distribution objects are persistent tracks: a class mean plus
//! a per-track latent offset, perturbed by fresh noise every frame. OOD objects
//! are redrawn every frame from a set of Gaussian modes and one uniform box.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ground truth attached to a simulated proposal. Never read by the loss for OOD objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Truth {
    /// In-distribution object of class `0..K`.
    Id(usize),
    Ood,
}

impl Truth {
    pub fn is_id(self) -> bool {
        matches!(self, Truth::Id(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox<S> {
    pub x1: S,
    pub y1: S,
    pub x2: S,
    pub y2: S,
}

impl<S: Scalar> BoundingBox<S> {
    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectProposal<S> {
    pub feature: Vec<S>,
    pub bbox: BoundingBox<S>,
    pub objectness: S,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameProposals<S> {
    pub frame_index: usize,
    pub proposals: Vec<ObjectProposal<S>>,
}

/// One video's frames, in increasing `frame_index` order.
pub type Video<S> = Vec<FrameProposals<S>>;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode<S> {
    pub mean: Vec<S>,
    pub scale: S,
}

/// Axis-aligned box `[low, high]^m` from which one OOD mode samples uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformBox<S> {
    pub low: S,
    pub high: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessModel {
    pub id_mean: f64,
    pub ood_mean: f64,
    pub noise_scale: f64,
}

impl Default for ObjectnessModel {
    fn default() -> Self {
        ObjectnessModel {
            id_mean: 0.85,
            ood_mean: 0.7,
            noise_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec<S> {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    pub proposals_per_frame: usize,
    pub id_cluster_means: Vec<Vec<S>>,
    pub id_cluster_scale: S,
    pub ood_modes: Vec<GaussianMode<S>>,
    pub ood_box: UniformBox<S>,
    pub ood_fraction_per_frame: f64,
    pub temporal_noise_scale: S,
    pub objectness: ObjectnessModel,
    pub seed: u64,
}

impl<S: Scalar> SimSpec<S> {
    /// Checks every invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("sim.num_classes", "K must be at least 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("sim.feature_dim", "m must be at least 2"));
        }
        if self.frames_per_video == 0 {
            return Err(Error::config("sim.frames_per_video", "must be at least 1"));
        }
        if self.proposals_per_frame == 0 {
            return Err(Error::config("sim.proposals_per_frame", "must be at least 1"));
        }
        if self.id_cluster_means.len() != self.num_classes {
            return Err(Error::config(
                "sim.id_cluster_means",
                format!(
                    "expected {} cluster means, found {}",
                    self.num_classes,
                    self.id_cluster_means.len()
                ),
            ));
        }
        for (k, mean) in self.id_cluster_means.iter().enumerate() {
            if mean.len() != self.feature_dim {
                return Err(Error::config(
                    "sim.id_cluster_means",
                    format!("mean {k} has dimension {}, expected {}", mean.len(), self.feature_dim),
                ));
            }
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("sim.id_cluster_means", format!("mean {k} is not finite")));
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.id_cluster_means[a] == self.id_cluster_means[b] {
                    return Err(Error::config(
                        "sim.id_cluster_means",
                        format!("cluster means {a} and {b} must be pairwise distinct"),
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.ood_fraction_per_frame) {
            return Err(Error::config("sim.ood_fraction", "must lie in [0, 1]"));
        }
        let nonneg = |x: S| x.is_finite() && x >= S::zero();
        if !nonneg(self.id_cluster_scale) {
            return Err(Error::config("sim.id_cluster_scale", "scales must be finite and >= 0"));
        }
        if !nonneg(self.temporal_noise_scale) {
            return Err(Error::config(
                "sim.temporal_noise_scale",
                "scales must be finite and >= 0",
            ));
        }
        if !(self.objectness.noise_scale.is_finite() && self.objectness.noise_scale >= 0.0) {
            return Err(Error::config(
                "sim.objectness.noise_scale",
                "scales must be finite and >= 0",
            ));
        }
        for (i, mode) in self.ood_modes.iter().enumerate() {
            if mode.mean.len() != self.feature_dim {
                return Err(Error::config(
                    "sim.ood_modes",
                    format!(
                        "mode {i} has dimension {}, expected {}",
                        mode.mean.len(),
                        self.feature_dim
                    ),
                ));
            }
            if mode.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("sim.ood_modes", format!("mode {i} mean is not finite")));
            }
            if !nonneg(mode.scale) {
                return Err(Error::config(
                    "sim.ood_modes",
                    format!("mode {i}: scales must be finite and >= 0"),
                ));
            }
        }
        if !(self.ood_box.low.is_finite() && self.ood_box.high.is_finite() && self.ood_box.low <= self.ood_box.high) {
            return Err(Error::config("sim.ood_box", "requires finite low <= high"));
        }
        Ok(())
    }

    pub fn ood_per_frame(&self) -> usize {
        (self.ood_fraction_per_frame * self.proposals_per_frame as f64).round() as usize
    }
}

/// Generator for one video: the spec's seed selects the key, the video index the stream.
fn video_rng(seed: u64, video_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video_index);
    rng
}

fn normal_vec<S: Scalar, R: Rng>(rng: &mut R, dim: usize, scale: S) -> Vec<S> {
    (0..dim)
        .map(|_| S::lit(rng.sample::<f64, _>(StandardNormal)) * scale)
        .collect()
}

fn objectness<R: Rng>(rng: &mut R, mean: f64, noise: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (mean + noise * z).clamp(0.0, 1.0)
}

struct Track<S> {
    class: usize,
    offset: Vec<S>,
    origin: (f64, f64),
    size: (f64, f64),
}

fn random_box<R: Rng>(rng: &mut R) -> ((f64, f64), (f64, f64)) {
    let origin = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
    let size = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    (origin, size)
}

fn to_box<S: Scalar>(origin: (f64, f64), size: (f64, f64)) -> BoundingBox<S> {
    BoundingBox {
        x1: S::lit(origin.0),
        y1: S::lit(origin.1),
        x2: S::lit(origin.0 + size.0),
        y2: S::lit(origin.1 + size.1),
    }
}

/// Generates video number `video_index` of the stream described by `spec`.
///
/// The output is a pure function of `(spec, video_index)`.
pub fn generate_video<S: Scalar>(spec: &SimSpec<S>, video_index: u64) -> Result<Video<S>> {
    spec.validate()?;
    let mut rng = video_rng(spec.seed, video_index);
    let m = spec.feature_dim;
    let n_ood = spec.ood_per_frame();
    let n_id = spec.proposals_per_frame - n_ood;

    let tracks: Vec<Track<S>> = (0..n_id)
        .map(|_| {
            let class = rng.random_range(0..spec.num_classes);
            let offset = normal_vec(&mut rng, m, spec.id_cluster_scale);
            let (origin, size) = random_box(&mut rng);
            Track {
                class,
                offset,
                origin,
                size,
            }
        })
        .collect();

    let n_modes = spec.ood_modes.len() + 1;
    let obj = spec.objectness;
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let mut proposals = Vec::with_capacity(spec.proposals_per_frame);
        for track in &tracks {
            let noise = normal_vec(&mut rng, m, spec.temporal_noise_scale);
            let feature = spec.id_cluster_means[track.class]
                .iter()
                .zip(&track.offset)
                .zip(&noise)
                .map(|((&mu, &off), &eps)| mu + off + eps)
                .collect();
            let drift = 0.002 * t as f64;
            let origin = ((track.origin.0 + drift).min(0.69), track.origin.1);
            proposals.push(ObjectProposal {
                feature,
                bbox: to_box(origin, track.size),
                objectness: S::lit(objectness(&mut rng, obj.id_mean, obj.noise_scale)),
                truth: Truth::Id(track.class),
            });
        }
        for _ in 0..n_ood {
            let mode = rng.random_range(0..n_modes);
            let feature = match spec.ood_modes.get(mode) {
                Some(g) => {
                    let noise = normal_vec(&mut rng, m, g.scale);
                    g.mean.iter().zip(&noise).map(|(&mu, &eps)| mu + eps).collect()
                }
                None => {
                    let (lo, hi) = (spec.ood_box.low.as_f64(), spec.ood_box.high.as_f64());
                    (0..m).map(|_| S::lit(lo + (hi - lo) * rng.random::<f64>())).collect()
                }
            };
            let (origin, size) = random_box(&mut rng);
            proposals.push(ObjectProposal {
                feature,
                bbox: to_box(origin, size),
                objectness: S::lit(objectness(&mut rng, obj.ood_mean, obj.noise_scale)),
                truth: Truth::Ood,
            });
        }
        proposals.shuffle(&mut rng);
        frames.push(FrameProposals {
            frame_index: t,
            proposals,
        });
    }
    Ok(frames)
}

/// Generates `count` videos starting at `first_index`, in parallel.
pub fn generate_stream<S: Scalar>(spec: &SimSpec<S>, first_index: u64, count: usize) -> Result<Vec<Video<S>>> {
    spec.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_video(spec, first_index + i))
        .collect()
}

/// Proposals whose objectness reaches the threshold, in original order.
pub fn collect_proposals<S: Scalar>(
    frame: &FrameProposals<S>,
    objectness_threshold: S,
) -> impl Iterator<Item = (usize, &ObjectProposal<S>)> {
    frame
        .proposals
        .iter()
        .enumerate()
        .filter(move |(_, p)| p.objectness >= objectness_threshold)
}

pub fn collect_features<S: Scalar>(frame: &FrameProposals<S>, objectness_threshold: S) -> Vec<(usize, &[S])> {
    collect_proposals(frame, objectness_threshold)
        .map(|(i, p)| (i, p.feature.as_slice()))
        .collect()
}

/// Half-width of the reference-frame window around a key frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingRange {
    Finite(usize),
    /// Whole video eligible.
    Infinite,
}

impl std::fmt::Display for SamplingRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingRange::Finite(r) => write!(f, "{r}"),
            SamplingRange::Infinite => f.write_str("inf"),
        }
    }
}

/// Draws up to `count` distinct reference frames from the window around `key_index`.
///
/// The window `[key - R, key + R]` is clipped to the video and excludes the
/// key frame itself. When fewer than `count` frames are eligible, all of them
/// are returned. The result is sorted ascending.
pub fn sample_reference_frames<R: Rng>(
    video_len: usize,
    key_index: usize,
    count: usize,
    range: SamplingRange,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::config("train.frames", "T must be at least 1"));
    }
    if key_index >= video_len {
        return Err(Error::config(
            "key_index",
            format!("key index {key_index} outside video of length {video_len}"),
        ));
    }
    let (lo, hi) = match range {
        SamplingRange::Finite(0) => return Err(Error::config("train.range", "R must be at least 1")),
        SamplingRange::Finite(r) => (key_index.saturating_sub(r), (key_index + r).min(video_len - 1)),
        SamplingRange::Infinite => (0, video_len - 1),
    };
    let eligible: Vec<usize> = (lo..=hi).filter(|&i| i != key_index).collect();
    if eligible.is_empty() {
        return Err(Error::DistillationUnavailable("no reference frame within range"));
    }
    if eligible.len() <= count {
        return Ok(eligible);
    }
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
