//! Trains every mode on the same data and seed and compares detection mAP.

use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalResult};
use crate::infer::{detect, Detection};
use crate::network::Network;
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::train::train;

/// Detections on `data` and their evaluation against its annotations.
pub fn evaluate_params(
    cfg: &RunConfig,
    mode: Mode,
    params: &ParamStore,
    data: &Dataset,
    exec: Exec,
) -> Result<(Vec<Detection>, EvalResult)> {
    let net = Network::new(cfg, mode)?;
    let dets = detect(&net, params, &data.windows, &cfg.infer, exec)?;
    let result = evaluate(&dets, &data.annotations, &cfg.infer.eval_thresholds, exec);
    Ok((dets, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    /// mAP at each of the table thresholds.
    pub map: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn map_at(&self, mode: Mode, threshold: f64) -> Option<f64> {
        let t = self.thresholds.iter().position(|&x| (x - threshold).abs() < 1e-12)?;
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.map[t])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "mode");
        for t in &self.thresholds {
            s.push_str(&format!("  mAP@{t:.1}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<12}", r.mode.name()));
            for m in &r.map {
                s.push_str(&format!("  {m:>7.4}"));
            }
            s.push('\n');
        }
        s
    }
}

/// One row per mode, in table order. `progress` is called after each mode.
pub fn run_ablation(
    cfg: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    exec: Exec,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Mode::ALL.len());
    for mode in Mode::ALL {
        let mut c = cfg.clone();
        c.train.mode = mode;
        let (params, records) = train(&c, train_data, exec, |_, _, _| Ok(()))?;
        let (_, result) = evaluate_params(&c, mode, &params, eval_data, exec)?;
        let row = AblationRow {
            mode,
            map: result.map,
            final_loss: records.last().map_or(f64::NAN, |r| r.total),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable {
        thresholds: cfg.infer.eval_thresholds.clone(),
        rows,
    })
}
