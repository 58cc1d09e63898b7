//! Central finite-difference verification of every parameter gradient of the
//! composed network and loss.
//!
//! Targets and mined samples are fixed at the unperturbed point, so the checked
//! function is the loss on a fixed sample set. Entries whose ±h perturbation
//! changes a piecewise branch (a ReLU sign, a max-pool winner or a Smooth-L1
//! regime) sit on a kink where the central difference is not a derivative; they
//! are counted as skipped instead of compared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{build_loss, build_targets, Targets};
use crate::network::Network;
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::synth::{render_window, PlacedAction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub mode: Mode,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Negative control: scale the analytic gradient of one parameter.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
    pub loss: f64,
    pub positives: usize,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<28} {:>7} {:>7} {:>7} {:>12}\n",
            "parameter", "size", "checked", "skipped", "max rel err"
        );
        for b in &self.blocks {
            let flag = if b.max_rel_error < self.tolerance { "" } else { "  FAIL" };
            s.push_str(&format!(
                "{:<28} {:>7} {:>7} {:>7} {:>12.3e}{flag}\n",
                b.name, b.entries, b.checked, b.skipped, b.max_rel_error
            ));
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!(
            "{verdict}: max relative error {:.3e} (tolerance {:.0e}, h = {:.0e})\n",
            self.max_rel_error(),
            self.tolerance,
            self.step
        ));
        s
    }
}

/// A noisy window with one action aligned to an anchor of the first layer and one
/// straddling two layers, so the regression terms have positives.
pub fn probe_window(cfg: &RunConfig, seed: u64) -> Result<(Tensor, Vec<(crate::geometry::Segment, usize)>)> {
    let t = cfg.network.window_length;
    let l0 = cfg.anchors.layer_lengths[0];
    let cell = t / l0;
    let mut actions = vec![PlacedAction { start: cell, end: 2 * cell, class: 1 }];
    let second = (5 * t / 8, (7 * t / 8).max(5 * t / 8 + 1));
    actions.push(PlacedAction {
        start: second.0,
        end: second.1,
        class: cfg.network.num_classes.min(2),
    });
    let x = render_window(&cfg.network, &cfg.synth, &actions, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let gts = actions
        .iter()
        .map(|a| {
            let seg = crate::geometry::Segment::from_bounds(a.start as f64 / t as f64, a.end as f64 / t as f64)?;
            Ok((seg, a.class))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((x, gts))
}

fn loss_at(net: &Network, params: &ParamStore, x: &Tensor, targets: &Targets, cfg: &RunConfig) -> Result<(f64, Vec<u64>)> {
    let mut g = Graph::new();
    let fw = net.forward(&mut g, params, x)?;
    let vars = build_loss(&mut g, net, &fw, targets, &cfg.loss)?;
    Ok((g.value(vars.total).item(), g.branch_signature()))
}

pub fn gradcheck(cfg: &RunConfig, seed: u64, opts: &GradcheckOptions, exec: Exec) -> Result<GradcheckReport> {
    cfg.validate()?;
    let net = Network::new(cfg, opts.mode)?;
    let params = net.init_params(seed)?;
    if let Some((name, _)) = &opts.corrupt {
        if !params.contains(name) {
            return Err(Error::invalid(format!("no parameter named `{name}`")));
        }
    }
    let (x, gts) = probe_window(cfg, seed)?;

    let mut g = Graph::new();
    let fw = net.forward(&mut g, &params, &x)?;
    let ov = g.value(fw.fused.overlap.expect("fused overlap")).row(0).to_vec();
    let targets = build_targets(&net, &gts, &ov, &cfg.loss, seed)?;
    let vars = build_loss(&mut g, &net, &fw, &targets, &cfg.loss)?;
    if let Some((name, factor)) = &opts.corrupt {
        g.inject_grad_fault(name, *factor);
    }
    let loss = g.value(vars.total).item();
    let base_signature = g.branch_signature();
    let analytic = g.backward(vars.total)?;

    let mut blocks = Vec::new();
    for (name, grad) in analytic.params() {
        let per_entry = exec.try_map(grad.len(), |i| {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).expect("known parameter").value.data_mut()[i] += delta;
                loss_at(&net, &p, &x, &targets, cfg)
            };
            let (plus, sp) = eval(opts.step)?;
            let (minus, sm) = eval(-opts.step)?;
            if sp != base_signature || sm != base_signature {
                return Ok::<_, Error>(None);
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            Ok(Some((a - numeric).abs() / denom))
        })?;
        let mut block = BlockReport {
            name: name.clone(),
            entries: grad.len(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_entry: 0,
        };
        for (i, e) in per_entry.into_iter().enumerate() {
            match e {
                Some(e) => {
                    block.checked += 1;
                    if e > block.max_rel_error || e.is_nan() {
                        block.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                        block.worst_entry = i;
                    }
                }
                None => block.skipped += 1,
            }
        }
        blocks.push(block);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        floor: opts.floor,
        loss,
        positives: targets.positives.len(),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_is_small() {
        let cfg = RunConfig::tiny();
        let n = Network::new(&cfg, Mode::Full).unwrap().init_params(0).unwrap().num_scalars();
        assert!(n < 5000, "{n} parameters");
    }

    #[test]
    fn tiny_main_only_passes() {
        let r = gradcheck(
            &RunConfig::tiny(),
            1,
            &GradcheckOptions { mode: Mode::MainOnly, ..GradcheckOptions::default() },
            Exec::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.positives > 0);
        assert!(r.blocks.iter().all(|b| b.checked > 0));
    }

    #[test]
    fn corrupted_block_is_named() {
        let opts = GradcheckOptions {
            mode: Mode::MainOnly,
            corrupt: Some(("main.l1.head.w".into(), 1.01)),
            ..GradcheckOptions::default()
        };
        let r = gradcheck(&RunConfig::tiny(), 1, &opts, Exec::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst().unwrap().name, "main.l1.head.w");
        assert!(r.to_text().contains("FAIL"));
        let bad = GradcheckOptions { corrupt: Some(("nope".into(), 2.0)), ..opts };
        assert!(gradcheck(&RunConfig::tiny(), 1, &bad, Exec::default()).is_err());
    }
}
