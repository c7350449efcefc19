//! Test-time OOD scoring and rank-based evaluation metrics.
//!
//! All scores follow the convention "higher means more in-distribution".

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{energy, ood_probability, ModelParams};
use crate::scalar::{logsumexp, softmax, Scalar};
use crate::sim::{collect_proposals, Truth, Video};

pub const DEFAULT_TPR: f64 = 0.95;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Logistic uncertainty branch `sigmoid(-theta_u · E)`.
    Stud,
    /// Maximum softmax probability.
    Msp,
    /// Negative energy.
    Energy,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Stud, Method::Msp, Method::Energy];

    pub fn name(self) -> &'static str {
        match self {
            Method::Stud => "stud",
            Method::Msp => "msp",
            Method::Energy => "energy",
        }
    }

    pub fn score<S: Scalar>(self, params: &ModelParams<S>, h: &[S]) -> S {
        match self {
            Method::Stud => stud_score(params, h),
            Method::Msp => baseline_scores(params, h).msp,
            Method::Energy => baseline_scores(params, h).energy_score,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::config(
                "eval.methods",
                format!("unknown method {s:?} (expected stud, msp or energy)"),
            )
        })
    }
}

pub fn stud_score<S: Scalar>(params: &ModelParams<S>, h: &[S]) -> S {
    ood_probability(params.feature_energy(h), params.theta_u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineScores<S> {
    pub msp: S,
    pub energy_score: S,
}

pub fn baseline_scores<S: Scalar>(params: &ModelParams<S>, h: &[S]) -> BaselineScores<S> {
    let logits = params.class_logits(h);
    let msp = softmax(&logits).into_iter().fold(S::neg_infinity(), S::max);
    BaselineScores {
        msp,
        energy_score: logsumexp(&logits),
    }
}

/// Number of ID scores that must stay at or above the threshold.
fn required_id_count(n_id: usize, tpr_target: f64) -> usize {
    let raw = tpr_target * n_id as f64;
    // 0.95 · 20 evaluates to 19.000000000000004 in binary; snap near-integers first.
    let k = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, n_id)
}

fn desc<S: Scalar>(a: &S, b: &S) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

/// The ⌈tpr·n⌉-th largest ID score: the largest γ keeping that many ID scores `>= γ`.
pub fn choose_threshold<S: Scalar>(id_scores: &[S], tpr_target: f64) -> Result<S> {
    if id_scores.is_empty() {
        return Err(Error::Evaluation("threshold needs at least one ID score".into()));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::config("tpr_target", "must lie in (0, 1]"));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(desc);
    Ok(sorted[required_id_count(sorted.len(), tpr_target) - 1])
}

/// Thresholded decision: `true` (ID) when `score >= gamma`.
pub fn classify<S: Scalar>(score: S, gamma: S) -> bool {
    score >= gamma
}

/// Fraction of OOD scores accepted as ID at the threshold reaching `tpr_target`.
pub fn fpr_at_tpr<S: Scalar>(id_scores: &[S], ood_scores: &[S], tpr_target: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::Evaluation("FPR needs at least one OOD score".into()));
    }
    let gamma = choose_threshold(id_scores, tpr_target)?;
    let accepted = ood_scores.iter().filter(|&&s| classify(s, gamma)).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// Mann–Whitney estimate of P(id > ood), ties counted as one half.
pub fn auroc<S: Scalar>(id_scores: &[S], ood_scores: &[S]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Evaluation("AUROC needs ID and OOD scores".into()));
    }
    let mut all: Vec<(S, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    // twice the pair count: 2·#(id > ood) + #(id == ood)
    let mut doubled: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let ids = all[i..j].iter().filter(|x| x.1).count() as u128;
        let oods = (j - i) as u128 - ids;
        doubled += 2 * ids * ood_below + ids * oods;
        ood_below += oods;
        i = j;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(doubled as f64 / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count_id: usize,
    pub count_ood: usize,
}

/// Equal-width bins spanning the observed range of both classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn build<S: Scalar>(id: &[S], ood: &[S], n_bins: usize) -> Histogram {
        let values = || id.iter().chain(ood).map(|x| x.as_f64());
        let lo = values().fold(f64::INFINITY, f64::min);
        let hi = values().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) || n_bins == 0 {
            return Histogram { bins: Vec::new() };
        }
        let width = (hi - lo) / n_bins as f64;
        let mut bins: Vec<HistogramBin> = (0..n_bins)
            .map(|b| HistogramBin {
                left: lo + width * b as f64,
                right: if b + 1 == n_bins {
                    hi
                } else {
                    lo + width * (b + 1) as f64
                },
                count_id: 0,
                count_ood: 0,
            })
            .collect();
        let slot = |x: f64| {
            if width > 0.0 {
                (((x - lo) / width) as usize).min(n_bins - 1)
            } else {
                0
            }
        };
        for x in id.iter().map(|x| x.as_f64()) {
            bins[slot(x)].count_id += 1;
        }
        for x in ood.iter().map(|x| x.as_f64()) {
            bins[slot(x)].count_ood += 1;
        }
        Histogram { bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count_id + b.count_ood).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredObject<S> {
    pub score: S,
    pub energy: S,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<S> {
    pub method: Method,
    pub tpr_target: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub gamma: S,
    pub n_id: usize,
    pub n_ood: usize,
    pub score_histogram: Histogram,
    /// Histogram of the negative energy, per class.
    pub energy_histogram: Histogram,
    pub objects: Vec<ScoredObject<S>>,
}

/// Scores every collected proposal of the evaluation stream and summarizes the ID/OOD split.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    eval_stream: &[Video<S>],
    method: Method,
    objectness_threshold: S,
) -> Result<MetricsReport<S>> {
    let objects: Vec<ScoredObject<S>> = eval_stream
        .iter()
        .flatten()
        .flat_map(|frame| collect_proposals(frame, objectness_threshold))
        .map(|(_, p)| ScoredObject {
            score: method.score(params, &p.feature),
            energy: energy(&params.class_logits(&p.feature)),
            truth: p.truth,
        })
        .collect();
    report_from_objects(method, objects, DEFAULT_TPR)
}

pub fn report_from_objects<S: Scalar>(
    method: Method,
    objects: Vec<ScoredObject<S>>,
    tpr_target: f64,
) -> Result<MetricsReport<S>> {
    let split = |want_id: bool, f: fn(&ScoredObject<S>) -> S| -> Vec<S> {
        objects.iter().filter(|o| o.truth.is_id() == want_id).map(f).collect()
    };
    let id_scores = split(true, |o| o.score);
    let ood_scores = split(false, |o| o.score);
    if id_scores.is_empty() {
        return Err(Error::Evaluation(
            "no ID objects collected from the evaluation stream".into(),
        ));
    }
    if ood_scores.is_empty() {
        return Err(Error::Evaluation(
            "no OOD objects collected from the evaluation stream".into(),
        ));
    }
    let neg_id = split(true, |o| -o.energy);
    let neg_ood = split(false, |o| -o.energy);
    Ok(MetricsReport {
        method,
        tpr_target,
        fpr95: fpr_at_tpr(&id_scores, &ood_scores, tpr_target)?,
        auroc: auroc(&id_scores, &ood_scores)?,
        gamma: choose_threshold(&id_scores, tpr_target)?,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        score_histogram: Histogram::build(&id_scores, &ood_scores, HISTOGRAM_BINS),
        energy_histogram: Histogram::build(&neg_id, &neg_ood, HISTOGRAM_BINS),
        objects,
    })
}
