//! Randomized check suites. Each returns the number of instances and the worst error seen.

use rand::Rng;
use stud::distill::distill_backward_through_weights;
use stud::model::{energy_backward, ood_probability_backward};
use stud::train::uncertainty_terms;
use stud::{
    detection_loss, distill_unknowns, distill_weights, energy, ood_probability, uncertainty_loss, Candidate,
    CandidateSet, Error, Gradients, PercentileWindow,
};

use super::*;

#[derive(Debug, Clone, Copy, Default)]
pub struct Outcome {
    pub instances: usize,
    pub worst: f64,
}

impl Outcome {
    fn record(&mut self, err: f64) {
        self.instances += 1;
        self.worst = self.worst.max(err);
    }

    pub fn merge(self, other: Outcome) -> Outcome {
        Outcome {
            instances: self.instances + other.instances,
            worst: self.worst.max(other.worst),
        }
    }
}

fn labeled<R: Rng>(rng: &mut R, m: usize, k: usize, n: usize) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| (random_vec(rng, m, 2.0), rng.random_range(0..k)))
        .collect()
}

fn features<R: Rng>(rng: &mut R, m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| random_vec(rng, m, 2.0)).collect()
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

// ---------------------------------------------------------------- gradients

pub fn gradient_detection_loss(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let n = rng.random_range(1..=5);
        let objs = labeled(&mut rng, dims.feature_dim, dims.num_classes, n);
        let batch: Vec<(&[f64], usize)> = objs.iter().map(|(h, y)| (h.as_slice(), *y)).collect();
        let (_, analytic) = detection_loss(&p, &batch).unwrap();
        let numeric = numeric_gradient(&p, |q| detection_loss(q, &batch).unwrap().0);
        out.record(max_param_error(&analytic, &numeric));
    }
    out
}

pub fn gradient_uncertainty_loss(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let n_id = rng.random_range(1..=4);
        let id = features(&mut rng, dims.feature_dim, n_id);
        let n_unknown = rng.random_range(1..=4);
        let unknown = features(&mut rng, dims.feature_dim, n_unknown);
        let (ids, unk) = (slices(&id), slices(&unknown));
        let terms = uncertainty_terms(&p, &ids, &unk).unwrap();
        let numeric = numeric_gradient(&p, |q| uncertainty_loss(q, &ids, &unk).unwrap().0);
        let mut err = max_param_error(&terms.grads, &numeric);
        // gradient with respect to each unknown feature
        for (j, g) in terms.unknown_feature_grads.iter().enumerate() {
            let num = numeric_input_gradient(&unknown[j], |x| {
                let mut moved = unk.clone();
                moved[j] = x;
                uncertainty_loss(&p, &ids, &moved).unwrap().0
            });
            err = err.max(max_vec_error(g, &num));
        }
        out.record(err);
    }
    out
}

pub fn gradient_encode(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let h = random_vec(&mut rng, dims.feature_dim, 2.0);
        let up = random_vec(&mut rng, dims.enc_dim, 1.0);
        let mut analytic = Gradients::zeros(dims);
        let d_h = p.encode_backward(&h, &p.encode_traced(&h), &up, &mut analytic);
        let numeric = numeric_gradient(&p, |q| dot(&up, &q.encode(&h)));
        let num_h = numeric_input_gradient(&h, |x| dot(&up, &p.encode(x)));
        out.record(max_param_error(&analytic, &numeric).max(max_vec_error(&d_h, &num_h)));
    }
    out
}

pub fn gradient_class_logits(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let h = random_vec(&mut rng, dims.feature_dim, 2.0);
        let up = random_vec(&mut rng, dims.num_classes, 1.0);
        let mut analytic = Gradients::zeros(dims);
        let d_h = p.class_logits_backward(&h, &up, &mut analytic);
        let numeric = numeric_gradient(&p, |q| dot(&up, &q.class_logits(&h)));
        let num_h = numeric_input_gradient(&h, |x| dot(&up, &p.class_logits(x)));
        out.record(max_param_error(&analytic, &numeric).max(max_vec_error(&d_h, &num_h)));
    }
    out
}

pub fn gradient_energy(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let k = rng.random_range(1..=4);
        let logits = random_vec(&mut rng, k, 5.0);
        let up: f64 = rng.random_range(-2.0..=2.0);
        let analytic = energy_backward(&logits, up);
        let numeric = numeric_input_gradient(&logits, |f| up * energy(f));
        out.record(max_vec_error(&analytic, &numeric));
    }
    out
}

pub fn gradient_ood_probability(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let e: f64 = rng.random_range(-6.0..=6.0);
        let theta: f64 = rng.random_range(0.1..=3.0);
        let up: f64 = rng.random_range(-2.0..=2.0);
        let (d_e, d_theta) = ood_probability_backward(e, theta, up);
        let num = numeric_input_gradient(&[e, theta], |x| up * ood_probability(x[0], x[1]));
        out.record(rel_err(d_e, num[0]).max(rel_err(d_theta, num[1])));
    }
    out
}

/// Random candidate pool with hand-built provenance; energies are irrelevant to mixing.
pub fn random_pool<R: Rng>(rng: &mut R, m: usize, n: usize) -> CandidateSet<f64> {
    CandidateSet {
        candidates: (0..n)
            .map(|j| Candidate {
                frame_index: j / 2,
                proposal_index: j,
                feature: random_vec(rng, m, 1.0),
                energy: 0.0,
            })
            .collect(),
    }
}

pub fn gradient_through_weights(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    for i in 0..instances {
        let mut rng = rng(seed + i as u64);
        let dims = random_dims(&mut rng);
        let mut p = random_params(&mut rng, dims);
        // keep the softmax away from saturation so differences stay well conditioned
        for t in p.tensors_mut().into_iter().take(4) {
            t.values.iter_mut().for_each(|x| *x *= 0.5);
        }
        let n_pool = rng.random_range(1..=5);
        let pool = random_pool(&mut rng, dims.feature_dim, n_pool);
        let key = random_vec(&mut rng, dims.feature_dim, 1.0);
        let up = random_vec(&mut rng, dims.feature_dim, 1.0);
        let mix = |q: &stud::ModelParams<f64>| {
            let u = distill_unknowns(q, &[(0, key.as_slice())], &pool).unwrap();
            dot(&up, &u[0].feature)
        };
        let weights = distill_unknowns(&p, &[(0, key.as_slice())], &pool).unwrap()[0]
            .weights
            .clone();
        let mut analytic = Gradients::zeros(dims);
        distill_backward_through_weights(&p, &key, &pool, &weights, &up, &mut analytic);
        out.record(max_param_error(&analytic, &numeric_gradient(&p, mix)));
    }
    out
}

/// Every gradient family, `per_family` instances each.
pub fn gradient_suite(per_family: usize) -> Vec<(&'static str, Outcome)> {
    vec![
        ("detection loss", gradient_detection_loss(1_000, per_family)),
        ("uncertainty loss", gradient_uncertainty_loss(2_000, per_family)),
        ("encode", gradient_encode(3_000, per_family)),
        ("class logits", gradient_class_logits(4_000, per_family)),
        ("energy", gradient_energy(5_000, per_family)),
        ("ood probability", gradient_ood_probability(6_000, per_family)),
        ("mixing weights", gradient_through_weights(7_000, per_family)),
    ]
}

// ---------------------------------------------------------------- identities

/// `energy(f + c) = energy(f) - c`, relative to the largest magnitude involved.
pub fn identity_energy_shift(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    let mut rng = rng(seed);
    for _ in 0..instances {
        let k = rng.random_range(1..=8);
        let f = random_vec(&mut rng, k, 20.0);
        let c: f64 = rng.random_range(-100.0..=100.0);
        let shifted: Vec<f64> = f.iter().map(|x| x + c).collect();
        let (lhs, rhs) = (energy(&shifted), energy(&f) - c);
        let scale = lhs.abs().max(rhs.abs()).max(c.abs()).max(1.0);
        out.record((lhs - rhs).abs() / scale);
    }
    out
}

/// Softmax weights unchanged by a common shift of all scores.
pub fn identity_weight_shift(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    let mut rng = rng(seed);
    for _ in 0..instances {
        let n = rng.random_range(1..=10);
        let s = random_vec(&mut rng, n, 10.0);
        let c: f64 = rng.random_range(-50.0..=50.0);
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let (a, b) = (distill_weights(&s), distill_weights(&shifted));
        let err = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        out.record(err);
    }
    out
}

/// Absolute deviation of `Σα` from one for distilled unknowns.
pub fn identity_weight_sum(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    let mut rng = rng(seed);
    for _ in 0..instances {
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let n_pool = rng.random_range(1..=12);
        let pool = random_pool(&mut rng, dims.feature_dim, n_pool);
        let n_keys = rng.random_range(1..=3);
        let keys = features(&mut rng, dims.feature_dim, n_keys);
        let key_objects: Vec<(usize, &[f64])> = keys.iter().enumerate().map(|(i, h)| (i, h.as_slice())).collect();
        let err = distill_unknowns(&p, &key_objects, &pool)
            .unwrap()
            .iter()
            .map(|u| (u.weights.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        out.record(err);
    }
    out
}

/// Worst violation of convex-hull membership: negative weight, bounding-box excess,
/// or mismatch between `ô` and its weighted provenance.
pub fn identity_convex_hull(seed: u64, instances: usize) -> Outcome {
    let mut out = Outcome::default();
    let mut rng = rng(seed);
    for _ in 0..instances {
        let dims = random_dims(&mut rng);
        let p = random_params(&mut rng, dims);
        let n_pool = rng.random_range(1..=12);
        let pool = random_pool(&mut rng, dims.feature_dim, n_pool);
        let key = random_vec(&mut rng, dims.feature_dim, 1.0);
        let u = distill_unknowns(&p, &[(0, key.as_slice())], &pool).unwrap().remove(0);
        let mut err: f64 = u.weights.iter().map(|&a| (-a).max(0.0)).fold(0.0, f64::max);
        for c in 0..dims.feature_dim {
            let column = pool.candidates.iter().map(|x| x.feature[c]);
            let lo = column.clone().fold(f64::INFINITY, f64::min);
            let hi = column.fold(f64::NEG_INFINITY, f64::max);
            err = err.max(lo - u.feature[c]).max(u.feature[c] - hi);
            let rebuilt: f64 = u
                .weights
                .iter()
                .zip(&pool.candidates)
                .map(|(a, x)| a * x.feature[c])
                .sum();
            err = err.max((rebuilt - u.feature[c]).abs());
        }
        out.record(err.max(0.0));
    }
    out
}

// ---------------------------------------------------------------- metrics

/// Number of mismatches against the pairwise AUROC and brute-force threshold oracles.
pub fn metric_oracles(seed: u64, instances: usize) -> (Outcome, usize) {
    let mut out = Outcome::default();
    let mut mismatches = 0;
    let mut rng = rng(seed);
    for _ in 0..instances {
        let n_id = rng.random_range(1..=50);
        let id = random_scores(&mut rng, n_id, 0.5);
        let n_ood = rng.random_range(1..=50);
        let ood = random_scores(&mut rng, n_ood, 0.0);
        let a = stud::auroc(&id, &ood).unwrap();
        let mut err = (a - oracle_auroc(&id, &ood)).abs();
        for percent in [95, 90, 80, 50] {
            let target = percent as f64 / 100.0;
            let (gamma, fpr) = oracle_fpr(&id, &ood, percent);
            err = err
                .max((stud::choose_threshold(&id, target).unwrap() - gamma).abs())
                .max((stud::fpr_at_tpr(&id, &ood, target).unwrap() - fpr).abs());
        }
        if err != 0.0 {
            mismatches += 1;
        }
        out.record(err);
    }
    (out, mismatches)
}

// ---------------------------------------------------------------- distillation

/// Library distillation against the straight-line oracle, coordinate-wise.
pub fn distill_oracle(seed: u64, instances: usize) -> (Outcome, usize) {
    let mut out = Outcome::default();
    let mut unavailable = 0;
    let mut rng = rng(seed);
    let windows = [(40, 60), (0, 100), (0, 20), (80, 100)];
    while out.instances < instances {
        let dims = ModelDims {
            feature_dim: rng.random_range(2..=4),
            enc_dim: rng.random_range(1..=4),
            num_classes: rng.random_range(2..=4),
        };
        let p = random_params(&mut rng, dims);
        let window = if rng.random_bool(0.5) {
            let (a, b) = windows[rng.random_range(0..windows.len())];
            PercentileWindow::new(a, b).unwrap()
        } else {
            let lower = rng.random_range(0..100);
            PercentileWindow::new(lower, rng.random_range(lower + 1..=100)).unwrap()
        };
        let t = rng.random_range(1..=3);
        let references: Vec<_> = (0..t)
            .map(|f| {
                let n = rng.random_range(1..=5);
                random_frame(&mut rng, f + 1, n, dims.feature_dim, dims.num_classes)
            })
            .collect();
        let threshold = rng.random_range(0.0..=0.5);
        let n_keys = rng.random_range(1..=3);
        let keys = features(&mut rng, dims.feature_dim, n_keys);
        let key_objects: Vec<(usize, &[f64])> = keys.iter().enumerate().map(|(i, h)| (i, h.as_slice())).collect();

        let refs: Vec<&_> = references.iter().collect();
        let pool = CandidateSet::select(&p, &refs, threshold, window).unwrap();
        let expected = oracle_distill(&p, &keys, &references, threshold, window);
        match (distill_unknowns(&p, &key_objects, &pool), expected) {
            (Err(Error::DistillationUnavailable(_)), None) => unavailable += 1,
            (Ok(got), Some(want)) => {
                assert_eq!(got.len(), want.len());
                let mut err: f64 = 0.0;
                for (u, (feature, weights)) in got.iter().zip(&want) {
                    assert_eq!(u.weights.len(), weights.len());
                    assert_eq!(u.provenance.len(), weights.len());
                    for (a, b) in u.feature.iter().zip(feature).chain(u.weights.iter().zip(weights)) {
                        err = err.max((a - b).abs());
                    }
                }
                out.record(err);
            }
            (got, want) => panic!(
                "availability disagrees: library {:?}, oracle {:?}",
                got.map(|u| u.len()),
                want.map(|w| w.len())
            ),
        }
    }
    (out, unavailable)
}
