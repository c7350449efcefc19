//! Unknown distillation from reference frames.
//!
//! For every labeled object in a key frame, reference-frame proposals with
//! mid-ranked energy are pooled across frames, weighted by a softmax over
//! their encoded squared distance to the key object, and averaged in raw
//! feature space. The result is a synthetic outlier feature placed away
//! from the key object.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Gradients, ModelParams};
use crate::scalar::{softmax, Scalar};
use crate::sim::{collect_proposals, FrameProposals};

/// Inclusive energy-rank window `[lower%, upper%]`, in whole percents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PercentileWindow {
    pub lower: u32,
    pub upper: u32,
}

impl PercentileWindow {
    pub const ALL: PercentileWindow = PercentileWindow { lower: 0, upper: 100 };

    pub fn new(lower: u32, upper: u32) -> Result<Self> {
        let w = PercentileWindow { lower, upper };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upper > 100 {
            return Err(Error::config("train.percentile", "percentiles must lie in [0, 100]"));
        }
        if self.lower >= self.upper {
            return Err(Error::config(
                "train.percentile",
                format!(
                    "lower percentile p = {} must be strictly below upper q = {}",
                    self.lower, self.upper
                ),
            ));
        }
        Ok(())
    }

    /// Whether 1-based rank `rank` out of `n` satisfies `p·n/100 <= rank <= q·n/100`.
    pub fn admits(&self, rank: usize, n: usize) -> bool {
        let (r, n) = (rank as u64 * 100, n as u64);
        self.lower as u64 * n <= r && r <= self.upper as u64 * n
    }
}

impl Default for PercentileWindow {
    fn default() -> Self {
        PercentileWindow { lower: 40, upper: 60 }
    }
}

impl std::fmt::Display for PercentileWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.lower, self.upper)
    }
}

/// Indices whose ascending-energy rank falls inside `window`.
///
/// Ranks are 1-based; ties are broken by original index. The returned
/// indices are in ascending original order.
pub fn filter_candidates<S: Scalar>(energies: &[S], window: PercentileWindow) -> Result<Vec<usize>> {
    window.validate()?;
    let n = energies.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        energies[a]
            .partial_cmp(&energies[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order
        .into_iter()
        .enumerate()
        .filter(|&(pos, _)| window.admits(pos + 1, n))
        .map(|(_, idx)| idx)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `‖a − b‖²`
pub fn dissimilarity<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Softmax of dissimilarity scores.
pub fn distill_weights<S: Scalar>(scores: &[S]) -> Vec<S> {
    softmax(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<S> {
    pub frame_index: usize,
    pub proposal_index: usize,
    pub feature: Vec<S>,
    pub energy: S,
}

/// Filtered candidates pooled over all reference frames, in frame order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet<S> {
    pub candidates: Vec<Candidate<S>>,
}

impl<S: Scalar> CandidateSet<S> {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Collects proposals of each frame above the objectness threshold, scores
    /// them with the current head and keeps the per-frame percentile window.
    pub fn select(
        params: &ModelParams<S>,
        frames: &[&FrameProposals<S>],
        objectness_threshold: S,
        window: PercentileWindow,
    ) -> Result<Self> {
        let mut candidates = Vec::new();
        for frame in frames {
            let collected: Vec<_> = collect_proposals(frame, objectness_threshold).collect();
            let energies: Vec<S> = collected
                .iter()
                .map(|(_, p)| params.feature_energy(&p.feature))
                .collect();
            for i in filter_candidates(&energies, window)? {
                let (proposal_index, proposal) = collected[i];
                candidates.push(Candidate {
                    frame_index: frame.frame_index,
                    proposal_index,
                    feature: proposal.feature.clone(),
                    energy: energies[i],
                });
            }
        }
        Ok(CandidateSet { candidates })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledUnknown<S> {
    /// Position of the anchoring object within the key frame's proposal list.
    pub key_index: usize,
    pub feature: Vec<S>,
    /// One weight per pooled candidate; non-negative, summing to one.
    pub weights: Vec<S>,
    /// `(frame_index, proposal_index)` of each pooled candidate.
    pub provenance: Vec<(usize, usize)>,
}

/// Distills one unknown per key object from a pooled candidate set.
///
/// `key_objects` pairs each object's proposal index with its raw feature.
pub fn distill_unknowns<S: Scalar>(
    params: &ModelParams<S>,
    key_objects: &[(usize, &[S])],
    candidates: &CandidateSet<S>,
) -> Result<Vec<DistilledUnknown<S>>> {
    if candidates.is_empty() {
        return Err(Error::DistillationUnavailable("no candidates survived filtering"));
    }
    let encoded: Vec<Vec<S>> = candidates
        .candidates
        .iter()
        .map(|c| params.encode(&c.feature))
        .collect();
    let provenance: Vec<(usize, usize)> = candidates
        .candidates
        .iter()
        .map(|c| (c.frame_index, c.proposal_index))
        .collect();
    let m = candidates.candidates[0].feature.len();

    Ok(key_objects
        .iter()
        .map(|&(key_index, h_key)| {
            let e_key = params.encode(h_key);
            let scores: Vec<S> = encoded.iter().map(|e| dissimilarity(&e_key, e)).collect();
            let weights = distill_weights(&scores);
            let mut feature = vec![S::zero(); m];
            for (w, c) in weights.iter().zip(&candidates.candidates) {
                for (o, &x) in feature.iter_mut().zip(&c.feature) {
                    *o = *o + *w * x;
                }
            }
            DistilledUnknown {
                key_index,
                feature,
                weights,
                provenance: provenance.clone(),
            }
        })
        .collect())
}

/// Propagates `∂L/∂ô` through the mixing weights into the encoder.
///
/// Candidate features themselves are treated as constants.
pub fn distill_backward_through_weights<S: Scalar>(
    params: &ModelParams<S>,
    key_feature: &[S],
    candidates: &CandidateSet<S>,
    weights: &[S],
    upstream: &[S],
    grads: &mut Gradients<S>,
) {
    let key_trace = params.encode_traced(key_feature);
    let traces: Vec<_> = candidates
        .candidates
        .iter()
        .map(|c| params.encode_traced(&c.feature))
        .collect();

    let g: Vec<S> = candidates
        .candidates
        .iter()
        .map(|c| dot(upstream, &c.feature))
        .collect();
    let g_mean = weights.iter().zip(&g).fold(S::zero(), |acc, (&a, &gj)| acc + a * gj);

    let two = S::lit(2.0);
    let mut d_key = vec![S::zero(); key_trace.output.len()];
    for ((c, trace), (&a, &gj)) in candidates.candidates.iter().zip(&traces).zip(weights.iter().zip(&g)) {
        let ds = a * (gj - g_mean);
        let diff: Vec<S> = key_trace
            .output
            .iter()
            .zip(&trace.output)
            .map(|(&x, &y)| two * (x - y) * ds)
            .collect();
        for (dk, &d) in d_key.iter_mut().zip(&diff) {
            *dk = *dk + d;
        }
        let d_ref: Vec<S> = diff.into_iter().map(|d| -d).collect();
        params.encode_backward(&c.feature, trace, &d_ref, grads);
    }
    params.encode_backward(key_feature, &key_trace, &d_key, grads);
}
