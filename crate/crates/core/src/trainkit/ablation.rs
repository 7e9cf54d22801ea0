use std::time::Instant;

use log::info;

use crate::data::Dataset;
use crate::distill::{ObjectiveConfig, Topology};
use crate::encoder::ModelConfig;
use crate::error::Result;

use super::{fit, MetricsRow, TrainConfig};

/// Final metrics of one ablation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub objective: ObjectiveConfig,
    pub metrics: MetricsRow,
    /// Wall time of the whole run, evaluation included. Repeated settings
    /// carry the time of the run they reuse.
    pub run_seconds: f64,
}

/// The five switch settings followed by the four topologies with every
/// switch on. Schedule bases come from `base`.
///
/// | row | pmv | τ, λ     | uw  |
/// |-----|-----|----------|-----|
/// | 1   | off | fixed    | on  |
/// | 2   | on  | fixed    | off |
/// | 3   | on  | adaptive | off |
/// | 4   | on  | fixed    | on  |
/// | 5   | on  | adaptive | on  |
pub fn ablation_settings(base: &ObjectiveConfig) -> Vec<ObjectiveConfig> {
    let switches = [
        (false, false, true),
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (true, true, true),
    ];
    let mut out: Vec<ObjectiveConfig> = switches
        .into_iter()
        .map(|(pmv, adaptive, uw)| ObjectiveConfig {
            topology: Topology::B,
            pmv,
            adaptive,
            uw,
            ..*base
        })
        .collect();
    out.extend(Topology::ALL.into_iter().map(|topology| ObjectiveConfig {
        topology,
        pmv: true,
        adaptive: true,
        uw: true,
        ..*base
    }));
    out
}

/// Trains one model per setting with the same seed and data. Settings that
/// repeat an earlier one reuse its result.
pub fn run_ablation(
    base: &TrainConfig,
    model: &ModelConfig,
    train: &Dataset,
    validation: Option<&Dataset>,
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for objective in ablation_settings(&base.objective) {
        if let Some(done) = rows.iter().find(|r| r.objective == objective) {
            rows.push(done.clone());
            continue;
        }
        info!(
            "ablation: pmv={} adaptive={} uw={} topology={}",
            objective.pmv, objective.adaptive, objective.uw, objective.topology
        );
        let cfg = TrainConfig {
            objective,
            ..base.clone()
        };
        let start = Instant::now();
        let run = fit(&cfg, model, train, validation)?;
        let metrics = match run.rows.last() {
            Some(row) => row.clone(),
            None => super::Trainer::with_encoder(cfg, run.encoder, train, validation)?.evaluate()?,
        };
        rows.push(AblationRow {
            objective,
            metrics,
            run_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
