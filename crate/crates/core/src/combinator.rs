//! All-subsets view fusion.
//!
//! For `n` views every nonempty subset is enumerated, grouped by cardinality
//! `k`. Each view is encoded once; a subset's input to the transformer is the
//! concatenation of its members' token sequences in ascending view order.

use std::fmt;

use itertools::Itertools;

use crate::encoder::{BoundParams, Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Default cap on the number of views, bounding the `2ⁿ − 1` subset count.
pub const DEFAULT_MAX_VIEWS: usize = 5;

/// Strictly increasing, nonempty list of 0-based view indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewSubset(Vec<usize>);

impl ViewSubset {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("view subsets must be nonempty".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!("view subset {indices:?} is not strictly increasing")));
        }
        Ok(ViewSubset(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ViewSubset {
    /// 1-based, e.g. `{1,3}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.0.iter().map(|i| i + 1).join(","))
    }
}

/// Whether a cardinality is single-view, partial multi-view or full multi-view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Single,
    Partial,
    Full,
}

/// All subsets of one cardinality `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinationSet {
    pub k: usize,
    pub n: usize,
    pub elements: Vec<ViewSubset>,
}

impl CombinationSet {
    /// Every size-`k` subset of `n` views, lexicographic.
    pub fn of_size(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::Parameter(format!("subset size {k} invalid for {n} views")));
        }
        let elements = (0..n).combinations(k).map(ViewSubset).collect();
        Ok(CombinationSet { k, n, elements })
    }

    /// Full multi-view takes precedence, so `n = 1` is `Full`.
    pub fn level(&self) -> Level {
        if self.k == self.n {
            Level::Full
        } else if self.k == 1 {
            Level::Single
        } else {
            Level::Partial
        }
    }
}

/// `C_1 … C_n` for `n` views, refusing `n > max_views`.
pub fn enumerate_combinations(n: usize, max_views: usize) -> Result<Vec<CombinationSet>> {
    if n == 0 {
        return Err(Error::Parameter("at least one view is required".into()));
    }
    if n > max_views {
        return Err(Error::Capacity(format!(
            "{n} views exceed the configured maximum of {max_views} ({} subsets)",
            (1u64 << n.min(63)) - 1
        )));
    }
    (1..=n).map(|k| CombinationSet::of_size(n, k)).collect()
}

/// Concatenates the token sequences of `subset`'s views in subset order.
pub fn fuse_tokens<'t>(subset: &ViewSubset, sequences: &[TokenSequence<'t>]) -> Result<Var<'t>> {
    let parts = subset
        .indices()
        .iter()
        .map(|&i| {
            sequences
                .iter()
                .find(|s| s.view == i)
                .map(|s| s.tokens)
                .ok_or_else(|| Error::Lookup(format!("no tokens for view {}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tape = parts[0].tape();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_rows(&parts)
}

/// Logits for one subset.
#[derive(Debug, Clone)]
pub struct SubsetPrediction<'t> {
    pub subset: ViewSubset,
    pub logits: Var<'t>,
}

/// Predictions for every element of one combination set.
#[derive(Debug, Clone)]
pub struct SetPredictions<'t> {
    pub k: usize,
    pub n: usize,
    pub elements: Vec<SubsetPrediction<'t>>,
}

impl SetPredictions<'_> {
    pub fn level(&self) -> Level {
        CombinationSet {
            k: self.k,
            n: self.n,
            elements: vec![],
        }
        .level()
    }
}

/// Encodes each view once, then runs the transformer on every subset in `sets`.
pub fn predict_sets<'t>(
    encoder: &Encoder,
    bound: &BoundParams<'t>,
    views: &[Var<'t>],
    sets: &[CombinationSet],
) -> Result<Vec<SetPredictions<'t>>> {
    let sequences = views
        .iter()
        .enumerate()
        .map(|(i, &img)| encoder.encode_view(bound, i, img))
        .collect::<Result<Vec<_>>>()?;
    sets.iter()
        .map(|set| {
            if set.n != views.len() {
                return Err(Error::Contract(format!(
                    "combination set for {} views applied to {}",
                    set.n,
                    views.len()
                )));
            }
            let elements = set
                .elements
                .iter()
                .map(|subset| {
                    let fused = fuse_tokens(subset, &sequences)?;
                    Ok(SubsetPrediction {
                        subset: subset.clone(),
                        logits: encoder.transform_predict(bound, fused)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SetPredictions {
                k: set.k,
                n: set.n,
                elements,
            })
        })
        .collect()
}

/// [`predict_sets`] over all `2ⁿ − 1` subsets.
pub fn predict_all<'t>(
    encoder: &Encoder,
    bound: &BoundParams<'t>,
    views: &[Var<'t>],
    max_views: usize,
) -> Result<Vec<SetPredictions<'t>>> {
    let sets = enumerate_combinations(views.len(), max_views)?;
    predict_sets(encoder, bound, views, &sets)
}
