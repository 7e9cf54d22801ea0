//! Uncertainty-weighted score fusion within a combination set.
//!
//! Each element's uncertainty is the cross-entropy of its prediction against
//! the one-hot label plus the entropy of the prediction, both with `ε` inside
//! the logarithms:
//!
//! ```text
//! U = −Σ_c q_c ln(p_c + ε) − Σ_c p_c ln(p_c + ε)
//! ```
//!
//! Weights are normalized inverse uncertainties and the set's aggregated
//! distribution is the weighted average of its elements. Because `U` needs
//! the ground-truth label, this path exists only during training.
//!
//! A confident, correct prediction drives both terms to zero (and `ε` can push
//! the sum slightly negative), so `U` is clamped at [`U_FLOOR`] before
//! inversion.

use crate::combinator::ViewSubset;
use crate::error::{Error, Result};
use crate::tensor::{check_distribution, cross_entropy_value, entropy_value, Tensor, Var, EPS};

/// Lower clamp applied to uncertainties before they are inverted.
pub const U_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub raw: f64,
    pub clamped: f64,
}

/// An element's τ=1 softmax distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementPrediction {
    pub subset: ViewSubset,
    pub distribution: Vec<f64>,
}

/// Uncertainty-weighted average distribution `p̂_k` of one combination set.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub k: usize,
    pub weights: Vec<f64>,
    pub distribution: Vec<f64>,
}

pub fn uncertainty(p: &[f64], label: usize) -> Result<UncertaintyScore> {
    check_distribution(p, "prediction")?;
    let onehot = Tensor::one_hot(label, p.len())?;
    let raw = cross_entropy_value(p, onehot.data(), EPS) + entropy_value(p, EPS);
    Ok(UncertaintyScore {
        raw,
        clamped: raw.max(U_FLOOR),
    })
}

/// `w_i = (1/U_i) / Σ_j (1/U_j)`.
pub fn element_weights(scores: &[UncertaintyScore]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("no uncertainty scores to weight".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(s.clamped > 0.0) || !s.clamped.is_finite()) {
        return Err(Error::Contract(format!("uncertainty {} is not positive and finite", s.clamped)));
    }
    let inv: Vec<f64> = scores.iter().map(|s| 1.0 / s.clamped).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

/// Equal weights for `m` elements, used when uncertainty weighting is off.
pub fn uniform_weights(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

fn check_weights(weights: &[f64], count: usize) -> Result<()> {
    if weights.len() != count {
        return Err(Error::Contract(format!("{} weights for {count} elements", weights.len())));
    }
    check_distribution(weights, "weights")
}

/// `p̂_k = Σ_i w_i p_i`.
pub fn weighted_fuse(k: usize, elements: &[ElementPrediction], weights: &[f64]) -> Result<AggregatedPrediction> {
    check_weights(weights, elements.len())?;
    let classes = elements[0].distribution.len();
    let mut out = vec![0.0; classes];
    for (e, &w) in elements.iter().zip(weights) {
        if e.distribution.len() != classes {
            return Err(Error::Contract("element distributions differ in length".into()));
        }
        check_distribution(&e.distribution, "element distribution")?;
        for (o, p) in out.iter_mut().zip(&e.distribution) {
            *o += w * p;
        }
    }
    Ok(AggregatedPrediction {
        k,
        weights: weights.to_vec(),
        distribution: out,
    })
}

/// Tape version of [`weighted_fuse`]: weights are constants, so gradient
/// reaches each element distribution but not the weights.
pub fn weighted_fuse_on_tape<'t>(distributions: &[Var<'t>], weights: &[f64]) -> Result<Var<'t>> {
    check_weights(weights, distributions.len())?;
    let mut acc = distributions[0].scale(weights[0]);
    for (p, &w) in distributions.iter().zip(weights).skip(1) {
        acc = acc.add(p.scale(w))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_values;

    fn elem(p: &[f64]) -> ElementPrediction {
        ElementPrediction {
            subset: ViewSubset::new(vec![0]).unwrap(),
            distribution: p.to_vec(),
        }
    }

    #[test]
    fn uniform_prediction() {
        let u = uncertainty(&[0.25; 4], 2).unwrap();
        assert!((u.raw - 2.0 * 4f64.ln()).abs() < 1e-6);
        assert!((u.raw - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_is_clamped() {
        let u = uncertainty(&[0.0, 1.0, 0.0], 1).unwrap();
        assert!(u.raw.abs() <= 2.0 * EPS);
        assert_eq!(u.clamped, U_FLOOR);
    }

    #[test]
    fn confident_wrong_is_uncertain() {
        let u = uncertainty(&[0.99, 0.01], 1).unwrap();
        let ce = -(0.01f64 + EPS).ln();
        assert!((ce - 4.6052).abs() < 1e-4);
        assert!((u.raw - 4.661).abs() < 1e-3, "{}", u.raw);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(uncertainty(&[0.5, 0.5], 2), Err(Error::Index(_))));
    }

    #[test]
    fn weights_examples() {
        let s = |u: f64| UncertaintyScore { raw: u, clamped: u };
        assert_eq!(element_weights(&[s(2.0); 4]).unwrap(), vec![0.25; 4]);
        let w = element_weights(&[s(1.0), s(3.0)]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(element_weights(&[s(0.4)]).unwrap(), vec![1.0]);
        assert!(matches!(element_weights(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_examples() {
        let a = elem(&[0.2, 0.8]);
        let b = elem(&[0.6, 0.4]);
        let sel = weighted_fuse(1, &[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        assert_eq!(sel.distribution, a.distribution);
        let mean = weighted_fuse(1, &[a, b], &[0.5, 0.5]).unwrap();
        assert!((mean.distribution[0] - 0.4).abs() < 1e-15);
        assert!((mean.distribution[1] - 0.6).abs() < 1e-15);
        assert!(weighted_fuse(1, &[elem(&[0.5, 0.5])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn single_element_keeps_the_full_distribution() {
        let p = softmax_values(&[0.3, -1.2, 2.0], 1.0);
        let agg = weighted_fuse(3, &[elem(&p)], &uniform_weights(1)).unwrap();
        assert_eq!(agg.distribution, p);
    }

    proptest::proptest! {
        #[test]
        fn weights_are_a_distribution_favouring_certainty(
            logits in proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, 4), 1..6),
            label in 0usize..4,
        ) {
            let scores: Vec<_> = logits.iter().map(|z| uncertainty(&softmax_values(z, 1.0), label).unwrap()).collect();
            let w = element_weights(&scores).unwrap();
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..w.len() {
                proptest::prop_assert!(w[i] > 0.0);
                for j in 0..w.len() {
                    if scores[i].clamped < scores[j].clamped {
                        proptest::prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }
    }
}
