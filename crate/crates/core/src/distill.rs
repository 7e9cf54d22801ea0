//! Training objective: per-level classification losses plus hierarchical
//! mutual distillation between the aggregated per-cardinality distributions
//! `p̂_1 … p̂_{n−1}` and the full multi-view prediction `p_n`.
//!
//! ```text
//! L      = L_s + Σ_k L_p(k) + L_f + L_hmd
//! L_hmd  = Σ_edges λ(t) · ½ τ(t)² · (KD(x, y; τ(t)) + KD(y, x; τ(t)))
//! KD(t, s; τ) = KL(softmax(t/τ) ‖ softmax(s/τ)),  teacher side detached
//! τ(t) = τ_base / √t,   λ(t) = λ_base · t^1.2
//! ```
//!
//! `t` is the smaller cardinality of an edge. The λ of each edge is folded
//! into `L_hmd` itself, so the total adds `L_hmd` with unit weight.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::combinator::{Level, SetPredictions};
use crate::error::{Error, Result};
use crate::tensor::Var;
use crate::uncertainty::{element_weights, uncertainty, uniform_weights, weighted_fuse_on_tape};

/// Which pairs of cardinalities distill into each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Topology {
    /// Chain of adjacent cardinalities.
    A,
    /// Every lower cardinality paired with full multi-view.
    #[default]
    B,
    /// Single-view paired with every higher cardinality.
    C,
    /// All pairs.
    D,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Topology::A, Topology::B, Topology::C, Topology::D];

    /// Ordered `(smaller, larger)` cardinality pairs for `n` views.
    pub fn edges(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            Topology::A => (1..n).map(|k| (k, k + 1)).collect(),
            Topology::B => (1..n).map(|k| (k, n)).collect(),
            Topology::C => (2..=n).map(|k| (1, k)).collect(),
            Topology::D => (1..=n).flat_map(|a| (a + 1..=n).map(move |b| (a, b))).collect(),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Topology::A => "a",
            Topology::B => "b",
            Topology::C => "c",
            Topology::D => "d",
        };
        f.write_str(c)
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Topology::A),
            "b" => Ok(Topology::B),
            "c" => Ok(Topology::C),
            "d" => Ok(Topology::D),
            other => Err(Error::Config(format!("unknown distillation topology {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub tau_base: f64,
    pub lambda_base: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            tau_base: 4.0,
            lambda_base: 0.1,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_base > 0.0) || !(self.lambda_base > 0.0) {
            return Err(Error::Config(format!(
                "distill.tau_base and distill.lambda_base must be positive, got {} and {}",
                self.tau_base, self.lambda_base
            )));
        }
        Ok(())
    }
}

/// `(τ, λ)` for an edge whose smaller side has `t` views.
pub fn adaptive_params(schedule: &ScheduleParams, t: usize) -> Result<(f64, f64)> {
    if t < 1 {
        return Err(Error::Parameter("view count t must be at least 1".into()));
    }
    let t = t as f64;
    Ok((schedule.tau_base / t.sqrt(), schedule.lambda_base * t.powf(1.2)))
}

/// KL between temperature-softened teacher and student; the teacher is detached.
pub fn kd_loss<'t>(teacher_logits: Var<'t>, student_logits: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let teacher = teacher_logits.detach()?.softmax(tau)?;
    let student = student_logits.softmax(tau)?;
    teacher.kl_div(student)
}

/// Switches and hyperparameters shaping the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub topology: Topology,
    pub schedule: ScheduleParams,
    /// Include partial multi-view subsets (1 < k < n).
    pub pmv: bool,
    /// τ and λ follow the view count; otherwise they stay at the base values.
    pub adaptive: bool,
    /// Uncertainty weights inside each combination set; otherwise uniform.
    pub uw: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            topology: Topology::B,
            schedule: ScheduleParams::default(),
            pmv: true,
            adaptive: true,
            uw: true,
        }
    }
}

impl ObjectiveConfig {
    /// `(τ, λ)` for an edge with smaller cardinality `t`.
    pub fn edge_params(&self, t: usize) -> Result<(f64, f64)> {
        if self.adaptive {
            adaptive_params(&self.schedule, t)
        } else {
            if t < 1 {
                return Err(Error::Parameter("view count t must be at least 1".into()));
            }
            Ok((self.schedule.tau_base, self.schedule.lambda_base))
        }
    }

    /// Distillation edges for `n` views; without partial multi-view only the
    /// single-to-full edge remains.
    pub fn edges(&self, n: usize) -> Vec<(usize, usize)> {
        if n < 2 {
            vec![]
        } else if self.pmv {
            self.topology.edges(n)
        } else {
            vec![(1, n)]
        }
    }

    /// Cardinalities whose predictions the objective needs.
    pub fn cardinalities(&self, n: usize) -> Vec<usize> {
        if self.pmv || n < 3 {
            (1..=n).collect()
        } else {
            vec![1, n]
        }
    }
}

/// Hierarchical mutual distillation over `edges`.
///
/// `logits[k - 1]` holds the logits standing for cardinality `k` (the log of
/// `p̂_k` for `k < n`, the raw full multi-view logits for `k = n`).
pub fn hmd_loss<'t>(
    logits: &[Option<Var<'t>>],
    edges: &[(usize, usize)],
    objective: &ObjectiveConfig,
) -> Result<Var<'t>> {
    if edges.is_empty() {
        return Err(Error::Contract("hierarchical distillation needs at least one edge".into()));
    }
    let get = |k: usize| {
        logits
            .get(k.wrapping_sub(1))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("no distribution for cardinality {k}")))
    };
    let mut total: Option<Var<'t>> = None;
    for &(a, b) in edges {
        let (x, y) = (get(a)?, get(b)?);
        let (tau, lambda) = objective.edge_params(a.min(b))?;
        let pair = kd_loss(x, y, tau)?.add(kd_loss(y, x, tau)?)?;
        let term = pair.scale(lambda * 0.5 * tau * tau);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("edges nonempty"))
}

/// Scalar values of each loss component for reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p_sum: f64,
    pub l_f: f64,
    pub l_hmd: f64,
    pub l_total: f64,
    /// Mean classification loss per cardinality.
    pub per_cardinality: BTreeMap<usize, f64>,
}

impl LossBreakdown {
    /// Mean of several breakdowns (per-cardinality entries averaged where present).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_s += b.l_s / n;
            out.l_p_sum += b.l_p_sum / n;
            out.l_f += b.l_f / n;
            out.l_hmd += b.l_hmd / n;
            out.l_total += b.l_total / n;
            for (&k, &v) in &b.per_cardinality {
                *out.per_cardinality.entry(k).or_insert(0.0) += v / n;
            }
        }
        out
    }
}

/// Differentiable total loss together with its reported components.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Builds `L` for one sample from its per-cardinality predictions.
pub fn total_loss<'t>(sets: &[SetPredictions<'t>], label: usize, objective: &ObjectiveConfig) -> Result<Objective<'t>> {
    let n = sets.first().map(|s| s.n).ok_or_else(|| Error::Contract("no predictions".into()))?;
    let needed = objective.cardinalities(n);
    let by_k: BTreeMap<usize, &SetPredictions<'t>> = sets.iter().map(|s| (s.k, s)).collect();
    for k in &needed {
        if !by_k.contains_key(k) {
            return Err(Error::Contract(format!("missing predictions for cardinality {k}")));
        }
    }

    let mut breakdown = LossBreakdown::default();
    let mut class_terms: BTreeMap<usize, Var<'t>> = BTreeMap::new();
    for &k in &needed {
        let set = by_k[&k];
        if set.elements.is_empty() {
            return Err(Error::Contract(format!("cardinality {k} has no elements")));
        }
        let mut sum: Option<Var<'t>> = None;
        for e in &set.elements {
            let ce = e.logits.cross_entropy_logits(label)?;
            sum = Some(match sum {
                Some(s) => s.add(ce)?,
                None => ce,
            });
        }
        let mean = sum.unwrap().scale(1.0 / set.elements.len() as f64);
        breakdown.per_cardinality.insert(k, mean.item());
        class_terms.insert(k, mean);
    }

    let l_f = class_terms[&n];
    breakdown.l_f = l_f.item();
    breakdown.l_s = class_terms[&1].item();
    let mut total = l_f;
    if n > 1 {
        total = total.add(class_terms[&1])?;
        for (&k, term) in class_terms.range(2..n) {
            breakdown.l_p_sum += term.item();
            total = total.add(*term)?;
            debug_assert_eq!(by_k[&k].level(), Level::Partial);
        }
    }

    let edges = objective.edges(n);
    if !edges.is_empty() {
        let mut logits: Vec<Option<Var<'t>>> = vec![None; n];
        for &k in &needed {
            let set = by_k[&k];
            logits[k - 1] = Some(if k == n {
                set.elements[0].logits
            } else {
                aggregate_log_distribution(set, label, objective.uw)?
            });
        }
        let hmd = hmd_loss(&logits, &edges, objective)?;
        breakdown.l_hmd = hmd.item();
        total = total.add(hmd)?;
    }
    breakdown.l_total = total.item();
    Ok(Objective { total, breakdown })
}

/// `ln p̂_k` for one combination set, with constant element weights.
fn aggregate_log_distribution<'t>(set: &SetPredictions<'t>, label: usize, uw: bool) -> Result<Var<'t>> {
    let probs = set
        .elements
        .iter()
        .map(|e| e.logits.softmax(1.0))
        .collect::<Result<Vec<_>>>()?;
    let weights = if uw {
        let scores = probs
            .iter()
            .map(|p| uncertainty(p.detach()?.value().data(), label))
            .collect::<Result<Vec<_>>>()?;
        element_weights(&scores)?
    } else {
        uniform_weights(probs.len())
    };
    Ok(weighted_fuse_on_tape(&probs, &weights)?.log())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn schedule_values() {
        let s = ScheduleParams::default();
        assert_eq!(adaptive_params(&s, 1).unwrap(), (4.0, 0.1));
        assert_eq!(adaptive_params(&s, 4).unwrap().0, 2.0);
        assert!((adaptive_params(&s, 2).unwrap().1 - 0.229_739_670_999_407).abs() < 1e-12);
        assert!(matches!(adaptive_params(&s, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn tau_scales_linearly_with_base() {
        let s = ScheduleParams::default();
        let scaled = ScheduleParams {
            tau_base: 3.0 * s.tau_base,
            ..s
        };
        for t in 1..=5 {
            let (a, _) = adaptive_params(&s, t).unwrap();
            let (b, _) = adaptive_params(&scaled, t).unwrap();
            assert!((b - 3.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn topology_edges() {
        assert_eq!(Topology::B.edges(3), vec![(1, 3), (2, 3)]);
        assert_eq!(Topology::A.edges(3), vec![(1, 2), (2, 3)]);
        assert_eq!(Topology::C.edges(3), vec![(1, 2), (1, 3)]);
        assert_eq!(Topology::D.edges(3), vec![(1, 2), (1, 3), (2, 3)]);
        assert_eq!(Topology::D.edges(4).len(), 6);
        assert_eq!(Topology::A.edges(2), Topology::B.edges(2));
        assert_eq!("C".parse::<Topology>().unwrap(), Topology::C);
        assert!("e".parse::<Topology>().is_err());
    }

    #[test]
    fn kd_examples() {
        let tape = Tape::new();
        let t = tape.leaf(Tensor::vector(&[2.0, 0.0]));
        let s = tape.leaf(Tensor::vector(&[0.0, 2.0]));
        assert!(kd_loss(t, t, 1.0).unwrap().item().abs() < 1e-12);
        let v = kd_loss(t, s, 1.0).unwrap().item();
        let p = 2f64.exp() / (2f64.exp() + 1.0);
        let expected = p * (p / (1.0 - p)).ln() + (1.0 - p) * ((1.0 - p) / p).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.5232).abs() < 1e-4);
        assert!(kd_loss(t, s, 1e6).unwrap().item() < 1e-6);
        assert!(matches!(kd_loss(t, s, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn kd_teacher_is_detached() {
        let tape = Tape::new();
        let t = tape.leaf(Tensor::vector(&[1.0, -1.0, 0.5]));
        let s = tape.leaf(Tensor::vector(&[0.0, 0.3, 0.1]));
        let grads = tape.backward(kd_loss(t, s, 2.0).unwrap()).unwrap();
        assert!(grads.wrt(t).is_none());
        assert!(grads.wrt(s).is_some());
    }

    #[test]
    fn hmd_is_zero_for_identical_distributions() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(&[0.4, -0.2, 1.0]));
        let obj = ObjectiveConfig::default();
        let loss = hmd_loss(&[Some(z), Some(z), Some(z)], &Topology::D.edges(3), &obj).unwrap();
        assert!(loss.item().abs() < 1e-12);
        assert!(matches!(hmd_loss(&[Some(z)], &[], &obj), Err(Error::Contract(_))));
        assert!(hmd_loss(&[Some(z), None, Some(z)], &[(2, 3)], &obj).is_err());
    }

    #[test]
    fn pmv_off_keeps_single_edge() {
        let obj = ObjectiveConfig {
            pmv: false,
            topology: Topology::D,
            ..Default::default()
        };
        assert_eq!(obj.edges(3), vec![(1, 3)]);
        assert_eq!(obj.cardinalities(3), vec![1, 3]);
        assert_eq!(obj.edges(1), vec![]);
    }
}
