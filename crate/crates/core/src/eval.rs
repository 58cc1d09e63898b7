//! Detection mAP over a list of temporal IoU thresholds.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::geometry::{iou_1d, Segment};
use crate::infer::Detection;
use crate::parallel::Exec;

/// Self-description written into every evaluation output.
pub const AP_VARIANT: &str =
    "all-point AP under the precision envelope; greedy one-to-one matching, highest IoU first";

fn seconds_segment(t_start: f64, t_end: f64) -> Segment {
    Segment {
        center: 0.5 * (t_start + t_end),
        width: t_end - t_start,
    }
}

/// Area under the precision envelope for a ranked list of hit flags.
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// AP of one class at `threshold`. `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truths: &[Annotation],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let mut gts: HashMap<&str, Vec<(Segment, bool)>> = HashMap::new();
    let mut num_gt = 0;
    let mut sorted_gt: Vec<&Annotation> = ground_truths.iter().filter(|g| g.class == class).collect();
    sorted_gt.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
    for g in sorted_gt {
        gts.entry(g.video_id.as_str())
            .or_default()
            .push((seconds_segment(g.t_start, g.t_end), false));
        num_gt += 1;
    }
    if num_gt == 0 {
        return None;
    }

    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
    });
    let hits: Vec<bool> = dets
        .iter()
        .map(|d| {
            let Some(cands) = gts.get_mut(d.video_id.as_str()) else {
                return false;
            };
            let seg = seconds_segment(d.t_start, d.t_end);
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, used)) in cands.iter().enumerate() {
                let iou = iou_1d(&seg, g);
                if !*used && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    cands[j].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(ap_from_hits(&hits, num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// Class ids that have ground truth, ascending.
    pub classes: Vec<usize>,
    /// `ap[k][t]`: class `classes[k]` at `thresholds[t]`.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
}

impl EvalResult {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    /// Human-readable table; `names[k]` names class id `k + 1`.
    pub fn to_table(&self, names: &[String]) -> String {
        let mut s = format!("# {AP_VARIANT}\n");
        let width = names.iter().map(String::len).max().unwrap_or(0).max(8);
        s.push_str(&format!("{:<width$}", "IoU"));
        for t in &self.thresholds {
            s.push_str(&format!("  {t:>6.1}"));
        }
        s.push('\n');
        s.push_str(&format!("{:<width$}", "mAP"));
        for m in &self.map {
            s.push_str(&format!("  {:>6.4}", m));
        }
        s.push('\n');
        for (k, c) in self.classes.iter().enumerate() {
            let name = names.get(c - 1).map(String::as_str).unwrap_or("?");
            s.push_str(&format!("{name:<width$}"));
            for a in &self.ap[k] {
                s.push_str(&format!("  {a:>6.4}"));
            }
            s.push('\n');
        }
        s
    }

    /// Machine-readable form with class names.
    pub fn to_json(&self, names: &[String]) -> serde_json::Value {
        let per_class: BTreeMap<&str, &Vec<f64>> = self
            .classes
            .iter()
            .zip(&self.ap)
            .map(|(c, ap)| (names.get(c - 1).map(String::as_str).unwrap_or("?"), ap))
            .collect();
        serde_json::json!({
            "ap_variant": AP_VARIANT,
            "thresholds": self.thresholds,
            "mAP": self.map,
            "per_class_ap": per_class,
        })
    }
}

/// mAP at each threshold, averaged over the classes present in the ground truth.
pub fn evaluate(
    detections: &[Detection],
    ground_truths: &[Annotation],
    thresholds: &[f64],
    exec: Exec,
) -> EvalResult {
    let mut classes: Vec<usize> = ground_truths.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let nt = thresholds.len();
    let flat = exec.map(classes.len() * nt, |k| {
        average_precision(detections, ground_truths, classes[k / nt], thresholds[k % nt])
            .expect("class has ground truth")
    });
    let ap: Vec<Vec<f64>> = flat.chunks(nt.max(1)).map(<[f64]>::to_vec).collect();
    let map = (0..nt)
        .map(|t| {
            if classes.is_empty() {
                0.0
            } else {
                ap.iter().map(|row| row[t]).sum::<f64>() / classes.len() as f64
            }
        })
        .collect();
    EvalResult {
        thresholds: thresholds.to_vec(),
        classes,
        ap,
        map,
    }
}
