use log::debug;

use crate::combinator::{enumerate_combinations, predict_sets, DEFAULT_MAX_VIEWS};
use crate::data::{eligible_classes, enumerate_eval_combinations, Dataset};
use crate::distill::{total_loss, LossBreakdown, ObjectiveConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::{softmax_values, Tape};

use super::MetricsRow;

/// Position of `label` when classes are ranked by score, ties going to the
/// lower class index.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Scores `encoder` on every (capped) `n`-combination of each class in
/// `by_class`. Classes with fewer than `n` images are skipped.
///
/// The loss columns hold the mean training objective on these tuples, which
/// makes them comparable from epoch to epoch.
pub fn evaluate_classes(
    encoder: &Encoder,
    dataset: &Dataset,
    by_class: &[Vec<usize>],
    n: usize,
    cap: Option<usize>,
    objective: &ObjectiveConfig,
) -> Result<MetricsRow> {
    let sets = enumerate_combinations(n, DEFAULT_MAX_VIEWS.max(n))?;
    let mut breakdowns = Vec::new();
    let (mut top1, mut top5) = (0usize, 0usize);
    let mut per_k = vec![0usize; n];
    let mut capped = false;
    for class in eligible_classes(by_class, n) {
        let combos = enumerate_eval_combinations(&by_class[class], n, cap);
        capped |= combos.capped;
        for tuple in &combos.tuples {
            let tape = Tape::inference();
            let bound = encoder.bind(&tape, false);
            let views: Vec<_> = tuple.iter().map(|&i| tape.constant(dataset.image(i))).collect();
            let preds = predict_sets(encoder, &bound, &views, &sets)?;
            breakdowns.push(total_loss(&preds, class, objective)?.breakdown);

            let full = preds[n - 1].elements[0].logits.tensor();
            let rank = rank_of(full.data(), class);
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);

            for set in &preds {
                let mut avg = vec![0.0; full.len()];
                for e in &set.elements {
                    for (a, p) in avg.iter_mut().zip(softmax_values(e.logits.value().data(), 1.0)) {
                        *a += p / set.elements.len() as f64;
                    }
                }
                per_k[set.k - 1] += usize::from(rank_of(&avg, class) == 0);
            }
        }
    }
    let total = breakdowns.len();
    if total == 0 {
        return Err(Error::Config(format!("no class has at least {n} evaluation images")));
    }
    if capped {
        debug!("evaluation combinations capped at {cap:?} per class");
    }
    let frac = |c: usize| c as f64 / total as f64;
    Ok(MetricsRow {
        epoch: 0,
        loss: LossBreakdown::mean(&breakdowns),
        top1_full: frac(top1),
        top5_full: frac(top5),
        top1_per_k: per_k.into_iter().map(frac).collect(),
        train_loss: 0.0,
        epoch_seconds: 0.0,
        samples: total,
    })
}

/// [`evaluate_classes`] over every image of `dataset`.
pub fn evaluate(
    encoder: &Encoder,
    dataset: &Dataset,
    n: usize,
    cap: Option<usize>,
    objective: &ObjectiveConfig,
) -> Result<MetricsRow> {
    check_compatible(encoder, dataset)?;
    evaluate_classes(encoder, dataset, &dataset.class_indices(), n, cap, objective)
}

/// Rejects datasets whose image geometry or class count differs from the model's.
pub fn check_compatible(encoder: &Encoder, dataset: &Dataset) -> Result<()> {
    let c = encoder.config();
    let h = &dataset.header;
    if h.channels as usize != c.in_channels
        || h.height as usize != c.image_size
        || h.width as usize != c.image_size
        || h.num_classes as usize != c.num_classes
    {
        return Err(Error::Dimension(format!(
            "dataset {}×{}×{} with {} classes does not fit a model for {}×{}×{} with {} classes",
            h.channels, h.height, h.width, h.num_classes, c.in_channels, c.image_size, c.image_size, c.num_classes
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_of(&[0.1, 0.5, 0.2], 1), 0);
        assert_eq!(rank_of(&[0.1, 0.5, 0.2], 0), 2);
        assert_eq!(rank_of(&[0.3, 0.3], 0), 0);
        assert_eq!(rank_of(&[0.3, 0.3], 1), 1);
    }
}
