//! Shared test support: random instances, finite differences and brute-force oracles.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stud::sim::{BoundingBox, ObjectProposal};
use stud::{Activation, FrameProposals, ModelDims, ModelParams, PercentileWindow, Truth};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Small random dimensions: `m <= 8`, `K <= 4`.
pub fn random_dims<R: Rng>(rng: &mut R) -> ModelDims {
    ModelDims {
        feature_dim: rng.random_range(2..=8),
        enc_dim: rng.random_range(1..=6),
        num_classes: rng.random_range(2..=4),
    }
}

/// Every tensor uniform in `[-1, 1]`, `theta_u` in `[0.2, 2]`.
pub fn random_params<R: Rng>(rng: &mut R, dims: ModelDims) -> ModelParams<f64> {
    let activation = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Identity
    };
    let mut p = ModelParams::zeros(dims, activation);
    for t in p.tensors_mut() {
        t.values.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0));
    }
    p.theta_u = rng.random_range(0.2..=2.0);
    p
}

/// `|a - b|` relative to the larger magnitude, with magnitudes below `1e-4` treated as `1e-4`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central-difference gradient of `loss` with respect to every parameter, tensor by tensor.
pub fn numeric_gradient(
    params: &ModelParams<f64>,
    loss: impl Fn(&ModelParams<f64>) -> f64,
) -> Vec<(&'static str, Vec<f64>)> {
    let mut work = params.clone();
    let shapes: Vec<(&'static str, usize)> = params.tensors().iter().map(|t| (t.name, t.values.len())).collect();
    shapes
        .into_iter()
        .enumerate()
        .map(|(ti, (name, len))| {
            let grad = (0..len)
                .map(|i| {
                    let orig = work.tensors()[ti].values[i];
                    work.tensors_mut()[ti].values[i] = orig + FD_STEP;
                    let up = loss(&work);
                    work.tensors_mut()[ti].values[i] = orig - FD_STEP;
                    let down = loss(&work);
                    work.tensors_mut()[ti].values[i] = orig;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect();
            (name, grad)
        })
        .collect()
}

/// Central-difference gradient of `f` with respect to its vector argument.
pub fn numeric_input_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + FD_STEP;
            let up = f(&work);
            work[i] = x[i] - FD_STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between an analytic gradient and its finite-difference estimate.
pub fn max_param_error(analytic: &stud::Gradients<f64>, numeric: &[(&'static str, Vec<f64>)]) -> f64 {
    analytic
        .tensors()
        .iter()
        .zip(numeric)
        .flat_map(|(a, (name, n))| {
            assert_eq!(a.name, *name);
            a.values.iter().zip(n).map(|(&x, &y)| rel_err(x, y)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn max_vec_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A frame of `n` proposals with random features, objectness and truth tags.
pub fn random_frame<R: Rng>(rng: &mut R, frame_index: usize, n: usize, m: usize, k: usize) -> FrameProposals<f64> {
    let proposals = (0..n)
        .map(|_| ObjectProposal {
            feature: random_vec(rng, m, 2.0),
            bbox: BoundingBox {
                x1: 0.0,
                y1: 0.0,
                x2: 1.0,
                y2: 1.0,
            },
            objectness: rng.random_range(0.0..=1.0),
            truth: if rng.random_bool(0.7) {
                Truth::Id(rng.random_range(0..k))
            } else {
                Truth::Ood
            },
        })
        .collect();
    FrameProposals { frame_index, proposals }
}

// ---- oracles, written independently of the library code paths ----

pub fn oracle_logits(p: &ModelParams<f64>, h: &[f64]) -> Vec<f64> {
    let k = p.head_b.len();
    (0..k)
        .map(|r| p.head_b[r] + (0..h.len()).map(|c| p.head_w.get(r, c) * h[c]).sum::<f64>())
        .collect()
}

pub fn oracle_energy(logits: &[f64]) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(mx + logits.iter().map(|f| (f - mx).exp()).sum::<f64>().ln())
}

pub fn oracle_encode(p: &ModelParams<f64>, h: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..p.enc_b1.len())
        .map(|r| {
            let z = p.enc_b1[r] + (0..h.len()).map(|c| p.enc_w1.get(r, c) * h[c]).sum::<f64>();
            match p.activation {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            }
        })
        .collect();
    (0..p.enc_b2.len())
        .map(|r| p.enc_b2[r] + (0..hidden.len()).map(|c| p.enc_w2.get(r, c) * hidden[c]).sum::<f64>())
        .collect()
}

/// Indices with `p·N <= 100·r <= q·N`, by brute-force rank counting.
pub fn oracle_filter(energies: &[f64], window: PercentileWindow) -> Vec<usize> {
    let n = energies.len();
    (0..n)
        .filter(|&i| {
            let below = (0..n)
                .filter(|&j| energies[j] < energies[i] || (energies[j] == energies[i] && j < i))
                .count();
            let rank = below + 1;
            window.lower as usize * n <= 100 * rank && 100 * rank <= window.upper as usize * n
        })
        .collect()
}

/// Straight-line unknown synthesis: filter each reference frame, pool, weigh by softmax of
/// squared encoded distance, mix raw features. Returns `(feature, weights)` per key object.
pub fn oracle_distill(
    p: &ModelParams<f64>,
    key_features: &[Vec<f64>],
    references: &[FrameProposals<f64>],
    threshold: f64,
    window: PercentileWindow,
) -> Option<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for frame in references {
        let kept: Vec<&Vec<f64>> = frame
            .proposals
            .iter()
            .filter(|q| q.objectness >= threshold)
            .map(|q| &q.feature)
            .collect();
        let energies: Vec<f64> = kept.iter().map(|h| oracle_energy(&oracle_logits(p, h))).collect();
        for i in oracle_filter(&energies, window) {
            pool.push(kept[i].clone());
        }
    }
    if pool.is_empty() {
        return None;
    }
    let encoded: Vec<Vec<f64>> = pool.iter().map(|h| oracle_encode(p, h)).collect();
    Some(
        key_features
            .iter()
            .map(|key| {
                let ek = oracle_encode(p, key);
                let s: Vec<f64> = encoded
                    .iter()
                    .map(|e| ek.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let alpha: Vec<f64> = ex.iter().map(|x| x / z).collect();
                let m = key.len();
                let mut o = vec![0.0; m];
                for (a, h) in alpha.iter().zip(&pool) {
                    for c in 0..m {
                        o[c] += a * h[c];
                    }
                }
                (o, alpha)
            })
            .collect(),
    )
}

/// Pairwise Mann–Whitney count, `(2·wins + ties) / (2·n_id·n_ood)`.
pub fn oracle_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut doubled: u128 = 0;
    for &a in id {
        for &b in ood {
            doubled += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64
}

/// Tries every ID score as threshold and keeps the largest one that accepts at least
/// `tpr_percent`% of ID scores (exact integer comparison); returns `(gamma, fpr)`.
pub fn oracle_fpr(id: &[f64], ood: &[f64], tpr_percent: usize) -> (f64, f64) {
    let n = id.len();
    let gamma = id
        .iter()
        .cloned()
        .filter(|&g| 100 * id.iter().filter(|&&s| s >= g).count() >= tpr_percent * n)
        .fold(f64::NEG_INFINITY, f64::max);
    let accepted = ood.iter().filter(|&&s| s >= gamma).count();
    (gamma, accepted as f64 / ood.len() as f64)
}

/// Scores of either a continuous or a heavily tied distribution.
pub fn random_scores<R: Rng>(rng: &mut R, n: usize, shift: f64) -> Vec<f64> {
    if rng.random_bool(0.5) {
        (0..n)
            .map(|_| (rng.random_range(0..6) as f64) * 0.5 + shift.round())
            .collect()
    } else {
        (0..n).map(|_| rng.random_range(-1.0..1.0) + shift).collect()
    }
}

/// Benchmark config shrunk to a few short videos.
pub fn small_config() -> stud::ExperimentConfig {
    let mut c = stud::ExperimentConfig::default();
    c.sim.videos = 4;
    c.sim.frames_per_video = 10;
    c.sim.proposals_per_frame = 12;
    c.eval.videos = 3;
    c.train.epochs = 2;
    c
}
