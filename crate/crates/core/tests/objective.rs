//! The total objective on hand-built predictions, against a plain-f64
//! reference written from the formulas.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvdistill::combinator::{enumerate_combinations, SetPredictions, SubsetPrediction};
use mvdistill::distill::{total_loss, ObjectiveConfig};
use mvdistill::tensor::{Tape, Tensor};
use mvdistill::trainkit::ablation_settings;

const TOL: f64 = 1e-10;

fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ce(z: &[f64], label: usize) -> f64 {
    -softmax(z, 1.0)[label].ln()
}

fn kl(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let (p, q) = (softmax(teacher, tau), softmax(student, tau));
    p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

fn u_score(p: &[f64], label: usize) -> f64 {
    let ent: f64 = -p.iter().map(|x| x * (x + 1e-8).ln()).sum::<f64>();
    (-(p[label] + 1e-8).ln() + ent).max(1e-6)
}

/// `logits[k - 1][j]` is element `j` of cardinality `k`.
fn reference(logits: &[Vec<Vec<f64>>], label: usize, o: &ObjectiveConfig) -> f64 {
    let n = logits.len();
    let ks = o.cardinalities(n);
    let mean_ce = |k: usize| {
        let set = &logits[k - 1];
        set.iter().map(|z| ce(z, label)).sum::<f64>() / set.len() as f64
    };
    let mut total: f64 = ks.iter().map(|&k| mean_ce(k)).sum();

    let log_fused = |k: usize| -> Vec<f64> {
        let probs: Vec<Vec<f64>> = logits[k - 1].iter().map(|z| softmax(z, 1.0)).collect();
        let raw: Vec<f64> = if o.uw {
            probs.iter().map(|p| 1.0 / u_score(p, label)).collect()
        } else {
            vec![1.0; probs.len()]
        };
        let s: f64 = raw.iter().sum();
        (0..probs[0].len())
            .map(|c| probs.iter().zip(&raw).map(|(p, w)| w / s * p[c]).sum::<f64>().ln())
            .collect()
    };
    let repr = |k: usize| if k == n { logits[n - 1][0].clone() } else { log_fused(k) };
    for (a, b) in o.edges(n) {
        let t = a.min(b) as f64;
        let (tau, lambda) = if o.adaptive {
            (o.schedule.tau_base / t.sqrt(), o.schedule.lambda_base * t.powf(1.2))
        } else {
            (o.schedule.tau_base, o.schedule.lambda_base)
        };
        let (x, y) = (repr(a), repr(b));
        total += lambda * tau * tau * 0.5 * (kl(&x, &y, tau) + kl(&y, &x, tau));
    }
    total
}

fn check(n: usize, k: usize, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let sets = enumerate_combinations(n, 5).unwrap();
    let logits: Vec<Vec<Vec<f64>>> = sets
        .iter()
        .map(|s| s.elements.iter().map(|_| (0..k).map(|_| r.gen_range(-3.0..3.0)).collect()).collect())
        .collect();
    let label = r.gen_range(0..k);
    for o in ablation_settings(&ObjectiveConfig::default()) {
        let tape = Tape::new();
        let preds: Vec<SetPredictions<'_>> = sets
            .iter()
            .zip(&logits)
            .map(|(s, zs)| SetPredictions {
                k: s.k,
                n: s.n,
                elements: s
                    .elements
                    .iter()
                    .zip(zs)
                    .map(|(sub, z)| SubsetPrediction {
                        subset: sub.clone(),
                        logits: tape.leaf(Tensor::vector(z)),
                    })
                    .collect(),
            })
            .collect();
        let got = total_loss(&preds, label, &o).unwrap();
        let want = reference(&logits, label, &o);
        assert!((got.total.item() - want).abs() < TOL, "{o:?}: {} vs {want}", got.total.item());
        assert!((got.breakdown.l_total - want).abs() < TOL);
    }
}

#[test]
fn three_view_batch_matches_reference_under_every_setting() {
    for seed in 0..16 {
        check(3, 6, seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_view_count_matches_reference(n in 2usize..=5, k in 2usize..=9, seed in any::<u64>()) {
        check(n, k, seed);
    }
}
