//! Turning fused predictions into scored segments, and per-class non-maximum suppression.

use std::cmp::Ordering;

use crate::autodiff::Graph;
use crate::config::InferConfig;
use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::geometry::{decode, iou_1d, Segment};
use crate::network::{FusedOutputs, Network};
use crate::parallel::Exec;
use crate::params::ParamStore;

/// A detection in seconds. `class` is 1-based; 0 (background) never appears.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
    pub score: f64,
}

impl Detection {
    pub fn segment(&self) -> Segment {
        Segment {
            center: 0.5 * (self.t_start + self.t_end),
            width: self.t_end - self.t_start,
        }
    }
}

/// Score descending, then earlier start, then lower class id.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.class.cmp(&b.class))
}

/// One candidate per anchor whose most likely class is not background.
pub fn detections_from_outputs(
    net: &Network,
    window: &Window,
    out: &FusedOutputs,
    cfg: &InferConfig,
) -> Vec<Detection> {
    let spec = net.anchor_spec();
    let mut dets = Vec::new();
    for (i, anchor) in net.anchors().iter().enumerate() {
        let p = &out.probs[i];
        let (best, _) = argmax(p);
        if best == 0 {
            continue;
        }
        let (class, mut score) = argmax(&p[1..]);
        let class = class + 1;
        if cfg.score_with_overlap {
            score *= out.overlap[i];
        }
        if score < cfg.min_score {
            continue;
        }
        let seg = decode(anchor, out.dc[i], out.dw[i], spec);
        let (s, e) = (seg.start().clamp(0.0, 1.0), seg.end().clamp(0.0, 1.0));
        if e <= s {
            continue;
        }
        dets.push(Detection {
            video_id: window.video_id.clone(),
            t_start: window.to_seconds(s),
            t_end: window.to_seconds(e),
            class,
            score,
        });
    }
    dets
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> (usize, f64) {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Fused predictions of one window.
pub fn predict(net: &Network, params: &ParamStore, window: &Window) -> Result<FusedOutputs> {
    if params.is_empty() {
        return Err(Error::State("inference needs trained parameters".into()));
    }
    let mut g = Graph::new();
    let fw = net.forward(&mut g, params, &window.features)?;
    Ok(net.fused_outputs(&g, &fw))
}

/// Greedy suppression of same-class, same-video detections with IoU above `threshold`.
/// Output is in [`detection_order`].
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let seg = d.segment();
        let suppressed = kept.iter().any(|k| {
            k.class == d.class && k.video_id == d.video_id && iou_1d(&k.segment(), &seg) > threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Detections for every window after NMS, sorted by video id and then [`detection_order`].
pub fn detect(
    net: &Network,
    params: &ParamStore,
    windows: &[Window],
    cfg: &InferConfig,
    exec: Exec,
) -> Result<Vec<Detection>> {
    let per_window = exec.try_map(windows.len(), |i| {
        let out = predict(net, params, &windows[i])?;
        Ok::<_, Error>(detections_from_outputs(net, &windows[i], &out, cfg))
    })?;
    let mut all: Vec<Detection> = per_window.into_iter().flatten().collect();
    all.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut out = Vec::with_capacity(all.len());
    for video in all.chunk_by(|a, b| a.video_id == b.video_id) {
        out.extend(nms(video, cfg.nms_threshold));
    }
    Ok(out)
}
