//! CSV output for metrics and ablation tables.
//!
//! Floats use Rust's shortest round-trip formatting, so equal values always
//! produce equal bytes.

use std::io::Write;

use crate::error::{Error, Result};

use super::{AblationRow, MetricsRow};

pub const ABLATION_KEY_COLUMNS: [&str; 4] = ["pmv", "adaptive", "uw", "topology"];

fn metric_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "loss_total", "loss_s", "loss_p", "loss_f", "loss_hmd", "top1_full", "top5_full"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=n).map(|k| format!("top1_k{k}")));
    h.push("epoch_seconds".into());
    h
}

fn metric_fields(row: &MetricsRow, n: usize) -> Result<Vec<String>> {
    if row.top1_per_k.len() != n {
        return Err(Error::Contract(format!(
            "row has {} per-cardinality accuracies, header expects {n}",
            row.top1_per_k.len()
        )));
    }
    let l = &row.loss;
    let mut f = vec![row.epoch.to_string()];
    f.extend([l.l_total, l.l_s, l.l_p_sum, l.l_f, l.l_hmd, row.top1_full, row.top5_full].map(|v| v.to_string()));
    f.extend(row.top1_per_k.iter().map(f64::to_string));
    f.push(row.epoch_seconds.to_string());
    Ok(f)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("csv output failed: {e}"))
}

/// One line per epoch for `n` views.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metric_header(n)).map_err(csv_err)?;
    for row in rows {
        w.write_record(metric_fields(row, n)?).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

/// Ablation rows: the switch and topology keys followed by the final metrics.
pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ABLATION_KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metric_header(n));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        let o = &row.objective;
        let mut fields = vec![o.pmv.to_string(), o.adaptive.to_string(), o.uw.to_string(), o.topology.to_string()];
        fields.extend(metric_fields(&row.metrics, n)?);
        w.write_record(fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::LossBreakdown;

    #[test]
    fn header_and_row() {
        let row = MetricsRow {
            epoch: 3,
            loss: LossBreakdown {
                l_total: 1.5,
                ..Default::default()
            },
            top1_full: 0.25,
            top5_full: 1.0,
            top1_per_k: vec![0.125, 0.25],
            train_loss: 0.0,
            epoch_seconds: 0.0,
            samples: 8,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row.clone()], 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,loss_total,loss_s,loss_p,loss_f,loss_hmd,top1_full,top5_full,top1_k1,top1_k2,epoch_seconds\n\
             3,1.5,0,0,0,0,0.25,1,0.125,0.25,0\n"
        );
        assert!(write_metrics_csv(Vec::new(), &[row], 3).is_err());
    }
}
