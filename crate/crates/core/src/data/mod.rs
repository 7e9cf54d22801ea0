//! Datasets: the MVDS file format, synthetic generation, and the view
//! sampling protocol.
//!
//! Training draws `n` distinct images of one class uniformly without
//! replacement. Evaluation enumerates every `n`-combination of a class's
//! images in lexicographic order, optionally capped per class. Classes with
//! fewer than `n` images are left out of both.

mod format;
mod synth;

pub use format::{Dataset, DatasetHeader, SampleRecord, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{generate_synthetic, prototypes, Image, Split, SyntheticSpec};

use itertools::Itertools;
use rand::seq::index;

use crate::rng::Rng;

/// Default per-class cap on evaluation combinations.
pub const DEFAULT_EVAL_CAP: usize = 20;

/// `n` distinct images from `class_images`, or `None` when the class is too
/// small to take part.
pub fn sample_training_views(class_images: &[usize], n: usize, rng: &mut Rng) -> Option<Vec<usize>> {
    if n == 0 || class_images.len() < n {
        return None;
    }
    Some(
        index::sample(rng, class_images.len(), n)
            .into_iter()
            .map(|i| class_images[i])
            .collect(),
    )
}

/// Evaluation tuples for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCombinations {
    pub tuples: Vec<Vec<usize>>,
    /// True when the cap cut the list short.
    pub capped: bool,
}

/// All `C(m, n)` combinations of `class_images`, lexicographic, truncated to
/// `cap` when given.
pub fn enumerate_eval_combinations(class_images: &[usize], n: usize, cap: Option<usize>) -> EvalCombinations {
    if n == 0 || class_images.len() < n {
        return EvalCombinations {
            tuples: vec![],
            capped: false,
        };
    }
    let limit = cap.unwrap_or(usize::MAX);
    let mut tuples: Vec<Vec<usize>> = class_images.iter().copied().combinations(n).take(limit.saturating_add(1)).collect();
    let capped = tuples.len() > limit;
    tuples.truncate(limit);
    EvalCombinations { tuples, capped }
}

/// Classes with at least `n` images.
pub fn eligible_classes(by_class: &[Vec<usize>], n: usize) -> Vec<usize> {
    by_class
        .iter()
        .enumerate()
        .filter(|(_, imgs)| imgs.len() >= n)
        .map(|(c, _)| c)
        .collect()
}

/// Per-class split of image indices into training and held-out parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

/// Holds out `round(fraction · m)` images of every class (the last ones in
/// file order), so the split is deterministic and stratified.
pub fn stratified_split(by_class: &[Vec<usize>], fraction: f64) -> ClassSplit {
    let mut train = Vec::with_capacity(by_class.len());
    let mut val = Vec::with_capacity(by_class.len());
    for imgs in by_class {
        let held = ((imgs.len() as f64 * fraction).round() as usize).min(imgs.len());
        let (a, b) = imgs.split_at(imgs.len() - held);
        train.push(a.to_vec());
        val.push(b.to_vec());
    }
    ClassSplit { train, val }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::HashMap;

    #[test]
    fn forced_and_excluded_classes() {
        let mut r = rng::stream(0, "sampling");
        let mut v = sample_training_views(&[4, 7, 9], 3, &mut r).unwrap();
        v.sort();
        assert_eq!(v, vec![4, 7, 9]);
        assert!(sample_training_views(&[1, 2], 3, &mut r).is_none());
        assert_eq!(eligible_classes(&[vec![0, 1], vec![2, 3, 4]], 3), vec![1]);
    }

    #[test]
    fn subsets_are_drawn_uniformly() {
        let mut r = rng::stream(1, "sampling");
        let class: Vec<usize> = (0..5).collect();
        let draws = 10_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            let mut s = sample_training_views(&class, 3, &mut r).unwrap();
            assert_eq!(s.iter().unique().count(), 3);
            s.sort();
            *counts.entry(s).or_default() += 1;
        }
        assert_eq!(counts.len(), 10);
        for (subset, c) in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.02, "{subset:?}: {freq}");
        }
    }

    #[test]
    fn eval_combinations() {
        let class: Vec<usize> = (10..15).collect();
        let all = enumerate_eval_combinations(&class, 3, None);
        assert_eq!(all.tuples.len(), 10);
        assert!(!all.capped);
        assert_eq!(all.tuples[0], vec![10, 11, 12]);
        assert_eq!(all.tuples[9], vec![12, 13, 14]);
        assert!(all.tuples.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(enumerate_eval_combinations(&class, 3, None), all);

        let forced = enumerate_eval_combinations(&[1, 2, 3], 3, Some(20));
        assert_eq!(forced.tuples, vec![vec![1, 2, 3]]);

        let capped = enumerate_eval_combinations(&class, 3, Some(4));
        assert_eq!(capped.tuples, all.tuples[..4].to_vec());
        assert!(capped.capped);
        let exact = enumerate_eval_combinations(&class, 3, Some(10));
        assert!(!exact.capped);
    }

    #[test]
    fn split_is_stratified() {
        let by_class: Vec<Vec<usize>> = (0..3).map(|c| (c * 10..c * 10 + 10).collect()).collect();
        let s = stratified_split(&by_class, 0.1);
        for (t, v) in s.train.iter().zip(&s.val) {
            assert_eq!(t.len(), 9);
            assert_eq!(v.len(), 1);
        }
        assert_eq!(s.val[2], vec![29]);
        assert_eq!(stratified_split(&by_class, 0.1), s);
    }
}
