//! Classification, regression and overlap losses and the weighted objective.
//!
//! Each term is a mean over its sample set: classification and overlap use the
//! mined set (positives plus selected negatives), regression uses positives only.
//! Main-stream terms see raw main-stream predictions; branch terms see the fused
//! predictions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{smooth_l1_value, Graph, Var};
use crate::config::{LossConfig, Mode, RegressionTarget};
use crate::error::{Error, Result};
use crate::geometry::{encode, hard_negative_mining, match_anchors, AnchorMatch, Segment, Selection};
use crate::network::{ForwardVars, Network, StreamVars};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            omega: c.omega,
        }
    }
}

/// The six per-stream terms. Branch terms are `None` when the mode lacks that branch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls_m: f64,
    pub cls_c: Option<f64>,
    pub reg_m: f64,
    pub reg_p: Option<f64>,
    pub ov_m: f64,
    pub ov_p: Option<f64>,
}

/// Coefficient of each component in the total; a missing branch hands its weight to the
/// main stream.
pub fn loss_coefficients(weights: &LossWeights, cls_branch: bool, loc_branch: bool) -> [f64; 6] {
    let w = weights.omega;
    let split = |scale: f64, present: bool| {
        if present {
            (scale * w, scale * (1.0 - w))
        } else {
            (scale, 0.0)
        }
    };
    let (cm, cc) = split(weights.alpha, cls_branch);
    let (rm, rp) = split(weights.beta, loc_branch);
    let (om, op) = split(weights.gamma, loc_branch);
    [cm, cc, rm, rp, om, op]
}

/// `α·(ω·L_cls,m + (1−ω)·L_cls,c) + β·(…reg…) + γ·(…ov…)`.
pub fn total_loss(c: &LossComponents, weights: &LossWeights) -> f64 {
    let k = loss_coefficients(weights, c.cls_c.is_some(), c.reg_p.is_some() || c.ov_p.is_some());
    k[0] * c.cls_m
        + k[1] * c.cls_c.unwrap_or(0.0)
        + k[2] * c.reg_m
        + k[3] * c.reg_p.unwrap_or(0.0)
        + k[4] * c.ov_m
        + k[5] * c.ov_p.unwrap_or(0.0)
}

/// Mean of `−ln p[target]` over the selected anchors. Returns `(loss, empty)`.
pub fn classification_loss(probs: &[Vec<f64>], targets: &[usize], selected: &[usize]) -> (f64, bool) {
    if selected.is_empty() {
        return (0.0, true);
    }
    let total: f64 = selected
        .iter()
        .map(|&i| -probs[i][targets[i]].ln())
        .sum();
    (total / selected.len() as f64, false)
}

pub fn smooth_l1(x: f64) -> f64 {
    smooth_l1_value(x)
}

/// Mean over matched pairs of `S(φ_c − g_c) + S(φ_w − g_w)`.
pub fn regression_loss(decoded: &[Segment], gts: &[Segment]) -> (f64, bool) {
    if decoded.is_empty() {
        return (0.0, true);
    }
    let total: f64 = decoded
        .iter()
        .zip(gts)
        .map(|(d, g)| smooth_l1(d.center - g.center) + smooth_l1(d.width - g.width))
        .sum();
    (total / decoded.len() as f64, false)
}

/// Mean squared error between predicted and true overlap over the selected anchors.
pub fn overlap_loss(p_ov: &[f64], g_iou: &[f64], selected: &[usize]) -> (f64, bool) {
    if selected.is_empty() {
        return (0.0, true);
    }
    let total: f64 = selected.iter().map(|&i| (p_ov[i] - g_iou[i]).powi(2)).sum();
    (total / selected.len() as f64, false)
}

/// Training targets for one window, fixed before the loss is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub matches: Vec<AnchorMatch>,
    pub selection: Selection,
    /// Positive anchor indices, ascending.
    pub positives: Vec<usize>,
    pub gt_center: Vec<f64>,
    pub gt_width: Vec<f64>,
    pub enc_dc: Vec<f64>,
    pub enc_dw: Vec<f64>,
}

impl Targets {
    pub fn class_targets(&self) -> Vec<usize> {
        self.selection
            .indices
            .iter()
            .map(|&i| self.matches[i].target_class())
            .collect()
    }

    pub fn iou_targets(&self) -> Vec<f64> {
        self.selection
            .indices
            .iter()
            .map(|&i| self.matches[i].iou)
            .collect()
    }
}

/// Matches anchors to `gts` and mines the sample set from `predicted_overlap`.
pub fn build_targets(
    net: &Network,
    gts: &[(Segment, usize)],
    predicted_overlap: &[f64],
    cfg: &LossConfig,
    seed: u64,
) -> Result<Targets> {
    if let Some((_, c)) = gts.iter().find(|(_, c)| *c == 0 || *c > net.num_classes()) {
        return Err(Error::invalid(format!(
            "ground-truth class {c} outside 1..={}",
            net.num_classes()
        )));
    }
    let anchors = net.anchors();
    let matches = match_anchors(anchors, gts, cfg.match_threshold);
    let selection = hard_negative_mining(&matches, predicted_overlap, &cfg.mining(), seed)?;
    let positives: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].is_positive()).collect();
    let mut t = Targets {
        matches,
        selection,
        gt_center: Vec::with_capacity(positives.len()),
        gt_width: Vec::with_capacity(positives.len()),
        enc_dc: Vec::with_capacity(positives.len()),
        enc_dw: Vec::with_capacity(positives.len()),
        positives,
    };
    for &i in &t.positives {
        let gt = gts[t.matches[i].gt_index.expect("positive has a match")].0;
        let (dc, dw) = encode(&anchors[i], &gt, net.anchor_spec())?;
        t.gt_center.push(gt.center);
        t.gt_width.push(gt.width);
        t.enc_dc.push(dc);
        t.enc_dw.push(dw);
    }
    Ok(t)
}

/// Graph handles of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls_m: Var,
    pub cls_c: Option<Var>,
    pub reg_m: Var,
    pub reg_p: Option<Var>,
    pub ov_m: Var,
    pub ov_p: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn components(&self, g: &Graph) -> LossComponents {
        let v = |x: Var| g.value(x).item();
        LossComponents {
            cls_m: v(self.cls_m),
            cls_c: self.cls_c.map(v),
            reg_m: v(self.reg_m),
            reg_p: self.reg_p.map(v),
            ov_m: v(self.ov_m),
            ov_p: self.ov_p.map(v),
        }
    }

    /// Classification terms only, weighted as in the total.
    pub fn classification_part(&self, g: &mut Graph, weights: &LossWeights) -> Result<Var> {
        let k = loss_coefficients(weights, self.cls_c.is_some(), self.reg_p.is_some());
        let mut xs = vec![self.cls_m];
        let mut cs = vec![k[0]];
        if let Some(c) = self.cls_c {
            xs.push(c);
            cs.push(k[1]);
        }
        g.lincomb(&xs, &cs)
    }

    /// Regression and overlap terms only, weighted as in the total.
    pub fn localization_part(&self, g: &mut Graph, weights: &LossWeights) -> Result<Var> {
        let k = loss_coefficients(weights, self.cls_c.is_some(), self.reg_p.is_some());
        let mut xs = vec![self.reg_m, self.ov_m];
        let mut cs = vec![k[2], k[4]];
        if let (Some(r), Some(o)) = (self.reg_p, self.ov_p) {
            xs.extend([r, o]);
            cs.extend([k[3], k[5]]);
        }
        g.lincomb(&xs, &cs)
    }
}

fn regression_term(
    g: &mut Graph,
    net: &Network,
    stream: &StreamVars,
    t: &Targets,
    target: RegressionTarget,
) -> Result<Var> {
    let (dc, dw) = (stream.dc.expect("dc"), stream.dw.expect("dw"));
    let pos = t.positives.clone();
    let (x, y, tx, ty) = match target {
        RegressionTarget::Decoded => {
            let spec = net.anchor_spec();
            let anchors = net.anchors();
            let center_scale = anchors.iter().map(|a| spec.alpha1 * a.width).collect();
            let centers = anchors.iter().map(|a| a.center).collect();
            let widths: Vec<f64> = anchors.iter().map(|a| a.width).collect();
            let phi_c = g.affine_columns(dc, center_scale, centers)?;
            let e = g.scale(dw, spec.alpha2);
            let e = g.exp(e);
            let phi_w = g.affine_columns(e, widths, vec![0.0; anchors.len()])?;
            (phi_c, phi_w, t.gt_center.clone(), t.gt_width.clone())
        }
        RegressionTarget::Encoded => (dc, dw, t.enc_dc.clone(), t.enc_dw.clone()),
    };
    let a = g.smooth_l1(x, pos.clone(), tx)?;
    let b = g.smooth_l1(y, pos, ty)?;
    g.lincomb(&[a, b], &[1.0, 1.0])
}

/// Records all loss terms of `mode` on top of a forward pass.
pub fn build_loss(
    g: &mut Graph,
    net: &Network,
    fw: &ForwardVars,
    t: &Targets,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let mode: Mode = net.mode();
    let sel = t.selection.indices.clone();
    let classes = t.class_targets();
    let ious = t.iou_targets();

    let cls_m = g.cross_entropy(fw.main.probs.expect("main probs"), sel.clone(), classes.clone())?;
    let reg_m = regression_term(g, net, &fw.main, t, cfg.regression_target)?;
    let ov_m = g.squared_error(fw.main.overlap.expect("main overlap"), sel.clone(), ious.clone())?;

    let cls_c = if mode.refines_classes() {
        Some(g.cross_entropy(fw.fused.probs.expect("fused probs"), sel.clone(), classes)?)
    } else {
        None
    };
    let (reg_p, ov_p) = if mode.refines_locations() {
        let r = regression_term(g, net, &fw.fused, t, cfg.regression_target)?;
        let o = g.squared_error(fw.fused.overlap.expect("fused overlap"), sel, ious)?;
        (Some(r), Some(o))
    } else {
        (None, None)
    };

    let k = loss_coefficients(&LossWeights::from(cfg), cls_c.is_some(), reg_p.is_some());
    let mut xs = vec![cls_m, reg_m, ov_m];
    let mut cs = vec![k[0], k[2], k[4]];
    for (v, c) in [(cls_c, k[1]), (reg_p, k[3]), (ov_p, k[5])] {
        if let Some(v) = v {
            xs.push(v);
            cs.push(c);
        }
    }
    let total = g.lincomb(&xs, &cs)?;
    Ok(LossVars {
        cls_m,
        cls_c,
        reg_m,
        reg_p,
        ov_m,
        ov_p,
        total,
    })
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Windows whose regression loss had no positive anchor.
    #[serde(skip)]
    pub empty_regression: usize,
    /// Windows whose mined sample set was empty.
    #[serde(skip)]
    pub empty_selection: usize,
}

impl LossReport {
    pub fn new(g: &Graph, vars: &LossVars, t: &Targets) -> Self {
        Self {
            components: vars.components(g),
            total: g.value(vars.total).item(),
            positives: t.selection.positives,
            negatives: t.selection.negatives,
            empty_regression: usize::from(t.positives.is_empty()),
            empty_selection: usize::from(t.selection.indices.is_empty()),
        }
    }

    /// Component-wise mean; sample counts are summed.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
            if reports.iter().all(|r| f(r).is_some()) && !reports.is_empty() {
                Some(reports.iter().filter_map(f).sum::<f64>() / n)
            } else {
                None
            }
        };
        LossReport {
            components: LossComponents {
                cls_m: avg(&|r| r.components.cls_m),
                cls_c: avg_opt(&|r| r.components.cls_c),
                reg_m: avg(&|r| r.components.reg_m),
                reg_p: avg_opt(&|r| r.components.reg_p),
                ov_m: avg(&|r| r.components.ov_m),
                ov_p: avg_opt(&|r| r.components.ov_p),
            },
            total: avg(&|r| r.total),
            positives: reports.iter().map(|r| r.positives).sum(),
            negatives: reports.iter().map(|r| r.negatives).sum(),
            empty_regression: reports.iter().map(|r| r.empty_regression).sum(),
            empty_selection: reports.iter().map(|r| r.empty_selection).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        let c = &self.components;
        [c.cls_m, c.reg_m, c.ov_m, self.total]
            .iter()
            .chain(c.cls_c.iter())
            .chain(c.reg_p.iter())
            .chain(c.ov_p.iter())
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT_WEIGHTS: LossWeights = LossWeights {
        alpha: 1.0,
        beta: 10.0,
        gamma: 10.0,
        omega: 2.0 / 3.0,
    };

    #[test]
    fn classification_loss_examples() {
        assert_eq!(classification_loss(&[vec![0.0, 1.0]], &[1], &[0]).0, 0.0);
        let uniform = vec![vec![1.0 / 21.0; 21]];
        let (l, _) = classification_loss(&uniform, &[4], &[0]);
        assert!((l - 21f64.ln()).abs() < 1e-12);
        assert!((l - 3.0445).abs() < 1e-4);
        let (l, _) = classification_loss(&[vec![0.5, 0.5]], &[0], &[0]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(classification_loss(&uniform, &[0], &[]), (0.0, true));
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // value and slope are continuous at |x| = 1
        let eps = 1e-9;
        assert!((smooth_l1(1.0 - eps) - smooth_l1(1.0 + eps)).abs() < 1e-8);
        let slope = |x: f64| (smooth_l1(x + 1e-7) - smooth_l1(x - 1e-7)) / 2e-7;
        assert!((slope(1.0 - 1e-4) - slope(1.0 + 1e-4)).abs() < 1e-3);
    }

    #[test]
    fn regression_loss_examples() {
        let g = Segment { center: 0.4, width: 0.2 };
        assert_eq!(regression_loss(&[g], &[g]), (0.0, false));
        let d = Segment { center: 0.9, width: 0.2 };
        assert!((regression_loss(&[d], &[g]).0 - 0.125).abs() < 1e-12);
        assert!(regression_loss(&[], &[]).1);
    }

    #[test]
    fn overlap_loss_examples() {
        assert_eq!(overlap_loss(&[0.3, 0.5], &[0.3, 0.5], &[0, 1]).0, 0.0);
        assert!((overlap_loss(&[0.3], &[0.8], &[0]).0 - 0.25).abs() < 1e-12);
        assert!((overlap_loss(&[0.1, 0.3], &[0.0, 0.0], &[0, 1]).0 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let v = 0.37;
        let all = LossComponents {
            cls_m: v,
            cls_c: Some(v),
            reg_m: v,
            reg_p: Some(v),
            ov_m: v,
            ov_p: Some(v),
        };
        assert!((total_loss(&all, &DEFAULT_WEIGHTS) - 21.0 * v).abs() < 1e-12);

        let main_only = LossWeights { omega: 1.0, ..DEFAULT_WEIGHTS };
        let lopsided = LossComponents {
            cls_c: Some(100.0),
            reg_p: Some(-50.0),
            ov_p: Some(7.0),
            ..all
        };
        assert_eq!(total_loss(&lopsided, &main_only), total_loss(&LossComponents {
            cls_c: Some(0.0),
            reg_p: Some(0.0),
            ov_p: Some(0.0),
            ..all
        }, &main_only));

        let k = loss_coefficients(&DEFAULT_WEIGHTS, true, true);
        assert!((k[0] - 2.0 / 3.0).abs() < 1e-15 && (k[1] - 1.0 / 3.0).abs() < 1e-15);
        let k = loss_coefficients(&DEFAULT_WEIGHTS, false, true);
        assert_eq!((k[0], k[1]), (1.0, 0.0));
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let base = LossComponents {
            cls_m: 0.3,
            cls_c: Some(0.2),
            reg_m: 0.1,
            reg_p: Some(0.05),
            ov_m: 0.4,
            ov_p: Some(0.6),
        };
        let k = loss_coefficients(&DEFAULT_WEIGHTS, true, true);
        let t0 = total_loss(&base, &DEFAULT_WEIGHTS);
        let d = 0.125;
        let bumped = [
            LossComponents { cls_m: base.cls_m + d, ..base },
            LossComponents { cls_c: Some(0.2 + d), ..base },
            LossComponents { reg_m: base.reg_m + d, ..base },
            LossComponents { reg_p: Some(0.05 + d), ..base },
            LossComponents { ov_m: base.ov_m + d, ..base },
            LossComponents { ov_p: Some(0.6 + d), ..base },
        ];
        for (i, b) in bumped.iter().enumerate() {
            let delta = total_loss(b, &DEFAULT_WEIGHTS) - t0;
            assert!((delta - k[i] * d).abs() < 1e-12, "component {i}");
        }
    }
}
