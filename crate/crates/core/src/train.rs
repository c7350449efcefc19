//! Joint training: classification loss on labeled key-frame objects plus the
//! energy-contrastive uncertainty loss against distilled unknowns.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_backward_through_weights, distill_unknowns, CandidateSet, PercentileWindow};
use crate::error::{Error, Result};
use crate::model::{energy, energy_backward, Gradients, ModelParams};
use crate::scalar::{logsumexp, sigmoid, softmax, softplus, Scalar};
use crate::sim::{collect_proposals, sample_reference_frames, SamplingRange, Truth, Video};

/// Whether the uncertainty loss trains the encoder through the mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderGrad {
    #[default]
    None,
    ThroughWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    /// Reference frames per key frame (T).
    pub frames: usize,
    /// Sampling half-width (R).
    pub range: SamplingRange,
    pub percentile: PercentileWindow,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_key_frames: usize,
    pub objectness_threshold: f64,
    pub encoder_grad: EncoderGrad,
    /// When false no unknowns are distilled and only the classification loss is trained.
    pub uncertainty_branch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.05,
            frames: 3,
            range: SamplingRange::Finite(9),
            percentile: PercentileWindow::default(),
            learning_rate: 0.01,
            epochs: 5,
            batch_key_frames: 1,
            objectness_threshold: 0.5,
            encoder_grad: EncoderGrad::None,
            uncertainty_branch: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// All violated invariants, in field order.
    pub fn violations(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            out.push(Error::config("train.beta", "beta must be finite and >= 0"));
        }
        if self.frames == 0 {
            out.push(Error::config("train.frames", "T must be at least 1"));
        }
        if self.range == SamplingRange::Finite(0) {
            out.push(Error::config("train.range", "R must be at least 1"));
        }
        if let Err(e) = self.percentile.validate() {
            out.push(e);
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            out.push(Error::config(
                "train.learning_rate",
                "learning rate must be finite and >= 0",
            ));
        }
        if self.batch_key_frames == 0 {
            out.push(Error::config("train.batch_key_frames", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.objectness_threshold) {
            out.push(Error::config("train.objectness_threshold", "must lie in [0, 1]"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<S> {
    pub step: usize,
    pub epoch: usize,
    pub loss_det: S,
    pub loss_unc: S,
    pub mean_energy_id: S,
    /// NaN when the step distilled no unknowns.
    pub mean_energy_unknown: S,
    pub theta_u: S,
    pub n_id: usize,
    pub n_unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog<S> {
    pub records: Vec<StepRecord<S>>,
}

/// Per-epoch averages of the logged energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_energy_id: f64,
    pub mean_energy_unknown: f64,
    pub mean_loss_unc: f64,
}

impl EpochSummary {
    pub fn energy_gap(&self) -> f64 {
        self.mean_energy_unknown - self.mean_energy_id
    }
}

impl<S: Scalar> TrainLog<S> {
    pub fn epochs(&self) -> Vec<EpochSummary> {
        let n_epochs = self.records.last().map_or(0, |r| r.epoch + 1);
        (0..n_epochs)
            .filter_map(|epoch| {
                let recs: Vec<_> = self.records.iter().filter(|r| r.epoch == epoch).collect();
                let with_unknowns: Vec<_> = recs.iter().filter(|r| r.n_unknown > 0).collect();
                if recs.is_empty() || with_unknowns.is_empty() {
                    return None;
                }
                let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
                Some(EpochSummary {
                    epoch,
                    mean_energy_id: mean(&mut recs.iter().map(|r| r.mean_energy_id.as_f64()), recs.len()),
                    mean_energy_unknown: mean(
                        &mut with_unknowns.iter().map(|r| r.mean_energy_unknown.as_f64()),
                        with_unknowns.len(),
                    ),
                    mean_loss_unc: mean(
                        &mut with_unknowns.iter().map(|r| r.loss_unc.as_f64()),
                        with_unknowns.len(),
                    ),
                })
            })
            .collect()
    }
}

/// A labeled in-distribution object: raw feature and class in `0..K`.
pub type LabeledObject<'a, S> = (&'a [S], usize);

/// Mean cross-entropy of the head's logits against the labels.
pub fn detection_loss<S: Scalar>(
    params: &ModelParams<S>,
    id_objects: &[LabeledObject<'_, S>],
) -> Result<(S, Gradients<S>)> {
    if id_objects.is_empty() {
        return Err(Error::EmptyBatch("no labeled objects"));
    }
    let n = S::lit(id_objects.len() as f64);
    let mut grads = Gradients::zeros(params.dims());
    let mut total = S::zero();
    for &(h, label) in id_objects {
        let logits = params.class_logits(h);
        total = total + logsumexp(&logits) - logits[label];
        let mut upstream = softmax(&logits);
        upstream[label] = upstream[label] - S::one();
        upstream.iter_mut().for_each(|g| *g = *g / n);
        params.class_logits_backward(h, &upstream, &mut grads);
    }
    Ok((total / n, grads))
}

/// Loss value, parameter gradients and `∂L/∂ô` for each unknown.
pub struct UncertaintyTerms<S> {
    pub loss: S,
    pub grads: Gradients<S>,
    pub unknown_feature_grads: Vec<Vec<S>>,
    pub mean_energy_id: S,
    pub mean_energy_unknown: S,
}

/// Logistic loss on `theta_u · E`: ID objects toward low energy, unknowns toward high.
///
/// Each set is averaged separately and the two means are summed.
pub fn uncertainty_terms<S: Scalar>(
    params: &ModelParams<S>,
    id_features: &[&[S]],
    unknown_features: &[&[S]],
) -> Result<UncertaintyTerms<S>> {
    if id_features.is_empty() || unknown_features.is_empty() {
        return Err(Error::EmptyBatch("uncertainty loss needs ID objects and unknowns"));
    }
    let theta = params.theta_u;
    let mut grads = Gradients::zeros(params.dims());
    let mut loss = S::zero();
    let mut unknown_feature_grads = Vec::with_capacity(unknown_features.len());
    let mut energy_sums = [S::zero(), S::zero()];

    // sign = +1: ID term softplus(θE); sign = -1: unknown term softplus(-θE)
    for (set, sign) in [(id_features, S::one()), (unknown_features, -S::one())] {
        let n = S::lit(set.len() as f64);
        let mut set_loss = S::zero();
        for &h in set {
            let logits = params.class_logits(h);
            let e = energy(&logits);
            let slot = usize::from(sign < S::zero());
            energy_sums[slot] = energy_sums[slot] + e;
            let z = sign * theta * e;
            set_loss = set_loss + softplus(z);
            let dz = sigmoid(z) / n;
            grads.theta_u = grads.theta_u + dz * sign * e;
            let d_logits = energy_backward(&logits, dz * sign * theta);
            let d_h = params.class_logits_backward(h, &d_logits, &mut grads);
            if sign < S::zero() {
                unknown_feature_grads.push(d_h);
            }
        }
        loss = loss + set_loss / n;
    }
    Ok(UncertaintyTerms {
        loss,
        grads,
        unknown_feature_grads,
        mean_energy_id: energy_sums[0] / S::lit(id_features.len() as f64),
        mean_energy_unknown: energy_sums[1] / S::lit(unknown_features.len() as f64),
    })
}

pub fn uncertainty_loss<S: Scalar>(
    params: &ModelParams<S>,
    id_features: &[&[S]],
    unknown_features: &[&[S]],
) -> Result<(S, Gradients<S>)> {
    let t = uncertainty_terms(params, id_features, unknown_features)?;
    Ok((t.loss, t.grads))
}

/// Total number of frames across all videos.
fn frame_count<S>(stream: &[Video<S>]) -> usize {
    stream.iter().map(Vec::len).sum()
}

struct KeyBatch<'a, S> {
    labeled: Vec<LabeledObject<'a, S>>,
    unknowns: Vec<Vec<S>>,
    /// For encoder gradients: key feature, its pooled candidates and mixing weights.
    sources: Vec<(&'a [S], usize, Vec<S>)>,
    pools: Vec<CandidateSet<S>>,
}

/// Runs the training loop and returns the final parameters with a per-step log.
///
/// Every epoch visits all frames of all videos as key frames in a seeded
/// shuffled order. Identical `(stream, init, config)` yield bit-identical output.
pub fn train<S: Scalar>(
    stream: &[Video<S>],
    init: ModelParams<S>,
    config: &TrainConfig,
) -> Result<(ModelParams<S>, TrainLog<S>)> {
    config.validate()?;
    if frame_count(stream) < 2 {
        return Err(Error::config("stream", "training needs at least 2 frames"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reference_rng = ChaCha8Rng::seed_from_u64(config.seed);
    reference_rng.set_stream(1);

    let threshold = S::lit(config.objectness_threshold);
    let beta = S::lit(config.beta);
    let lr = S::lit(config.learning_rate);
    let mut params = init;
    let mut log = TrainLog::default();

    let mut keys: Vec<(usize, usize)> = stream
        .iter()
        .enumerate()
        .flat_map(|(v, video)| (0..video.len()).map(move |t| (v, t)))
        .collect();

    for epoch in 0..config.epochs {
        keys.shuffle(&mut shuffle_rng);
        for chunk in keys.chunks(config.batch_key_frames) {
            let mut batch = KeyBatch {
                labeled: Vec::new(),
                unknowns: Vec::new(),
                sources: Vec::new(),
                pools: Vec::new(),
            };
            for &(v, t) in chunk {
                let video = &stream[v];
                let key_frame = &video[t];
                let key_objects: Vec<(usize, &[S], usize)> = collect_proposals(key_frame, threshold)
                    .filter_map(|(i, p)| match p.truth {
                        Truth::Id(class) => Some((i, p.feature.as_slice(), class)),
                        Truth::Ood => None,
                    })
                    .collect();
                if key_objects.is_empty() {
                    continue;
                }
                batch.labeled.extend(key_objects.iter().map(|&(_, h, c)| (h, c)));
                if !config.uncertainty_branch {
                    continue;
                }
                let refs =
                    match sample_reference_frames(video.len(), t, config.frames, config.range, &mut reference_rng) {
                        Ok(r) => r,
                        Err(Error::DistillationUnavailable(_)) => continue,
                        Err(e) => return Err(e),
                    };
                let ref_frames: Vec<_> = refs.iter().map(|&i| &video[i]).collect();
                let pool = CandidateSet::select(&params, &ref_frames, threshold, config.percentile)?;
                let anchors: Vec<(usize, &[S])> = key_objects.iter().map(|&(i, h, _)| (i, h)).collect();
                let distilled = match distill_unknowns(&params, &anchors, &pool) {
                    Ok(d) => d,
                    Err(Error::DistillationUnavailable(_)) => continue,
                    Err(e) => return Err(e),
                };
                let pool_index = batch.pools.len();
                for (u, &(_, h, _)) in distilled.into_iter().zip(&key_objects) {
                    batch.unknowns.push(u.feature);
                    batch.sources.push((h, pool_index, u.weights));
                }
                batch.pools.push(pool);
            }
            if batch.labeled.is_empty() {
                continue;
            }

            let (loss_det, mut grads) = detection_loss(&params, &batch.labeled)?;
            let id_features: Vec<&[S]> = batch.labeled.iter().map(|&(h, _)| h).collect();
            let (loss_unc, mean_energy_id, mean_energy_unknown) = if batch.unknowns.is_empty() {
                let e_id = id_features
                    .iter()
                    .fold(S::zero(), |acc, h| acc + params.feature_energy(h));
                (S::zero(), e_id / S::lit(id_features.len() as f64), S::nan())
            } else {
                let unknown_features: Vec<&[S]> = batch.unknowns.iter().map(Vec::as_slice).collect();
                let terms = uncertainty_terms(&params, &id_features, &unknown_features)?;
                if config.beta > 0.0 {
                    grads.add_scaled(&terms.grads, beta);
                    if config.encoder_grad == EncoderGrad::ThroughWeights {
                        for ((h_key, pool, weights), d_o) in batch.sources.iter().zip(&terms.unknown_feature_grads) {
                            let upstream: Vec<S> = d_o.iter().map(|&g| g * beta).collect();
                            distill_backward_through_weights(
                                &params,
                                h_key,
                                &batch.pools[*pool],
                                weights,
                                &upstream,
                                &mut grads,
                            );
                        }
                    }
                }
                (terms.loss, terms.mean_energy_id, terms.mean_energy_unknown)
            };

            params.sgd_step(&grads, lr);
            log.records.push(StepRecord {
                step: log.records.len(),
                epoch,
                loss_det,
                loss_unc,
                mean_energy_id,
                mean_energy_unknown,
                theta_u: params.theta_u,
                n_id: batch.labeled.len(),
                n_unknown: batch.unknowns.len(),
            });
        }
        log::debug!("epoch {epoch} done, {} steps logged", log.records.len());
    }
    Ok((params, log))
}
