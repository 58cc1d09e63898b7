//! Temporal anchors and 1D interval arithmetic.
//!
//! All coordinates are normalized to `[0, 1]` over the processed window.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal interval stored as center and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub center: f64,
    pub width: f64,
}

impl Segment {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !center.is_finite() || !width.is_finite() {
            return Err(Error::invalid(format!(
                "segment needs finite center and positive width, got ({center}, {width})"
            )));
        }
        Ok(Self { center, width })
    }

    pub fn from_bounds(start: f64, end: f64) -> Result<Self> {
        if !(start < end) {
            return Err(Error::invalid(format!(
                "segment start {start} must be before end {end}"
            )));
        }
        Self::new(0.5 * (start + end), end - start)
    }

    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.width
    }

    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.width
    }
}

/// Intersection over union of two intervals.
pub fn iou_1d(a: &Segment, b: &Segment) -> f64 {
    let (s1, e1, s2, e2) = (a.start(), a.end(), b.start(), b.end());
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (e1 - s1) + (e2 - s2) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSpec {
    /// Cell count of each anchor layer, shallowest first.
    pub layer_lengths: Vec<usize>,
    pub ratios: Vec<f64>,
    /// Center offset scale in the decode.
    pub alpha1: f64,
    /// Width offset scale in the decode.
    pub alpha2: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            layer_lengths: vec![8, 4, 2],
            ratios: vec![0.5, 0.75, 1.0, 1.5, 2.0],
            alpha1: 0.1,
            alpha2: 0.1,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_lengths.is_empty() || self.layer_lengths.contains(&0) {
            return Err(Error::Config(
                "anchors.layer_lengths must be non-empty with every length >= 1".into(),
            ));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(
                "anchors.ratios must be non-empty and positive".into(),
            ));
        }
        if !(self.alpha1 > 0.0) || !(self.alpha2 > 0.0) {
            return Err(Error::Config("anchors.alpha1/alpha2 must be positive".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_lengths.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.layer_lengths.iter().sum::<usize>() * self.ratios.len()
    }
}

/// A default segment bound to a (layer, cell, ratio) coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub layer: usize,
    pub cell: usize,
    pub ratio: f64,
    pub center: f64,
    pub width: f64,
}

impl Anchor {
    pub fn segment(&self) -> Segment {
        Segment {
            center: self.center,
            width: self.width,
        }
    }
}

/// Layer-major, then cell, then ratio.
pub fn generate_anchors(spec: &AnchorSpec) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(spec.num_anchors());
    for (layer, &len) in spec.layer_lengths.iter().enumerate() {
        let cell_w = 1.0 / len as f64;
        for cell in 0..len {
            for &ratio in &spec.ratios {
                out.push(Anchor {
                    layer,
                    cell,
                    ratio,
                    center: (cell as f64 + 0.5) * cell_w,
                    width: ratio * cell_w,
                });
            }
        }
    }
    out
}

/// Applies predicted offsets to an anchor.
pub fn decode(anchor: &Anchor, dc: f64, dw: f64, spec: &AnchorSpec) -> Segment {
    Segment {
        center: anchor.center + spec.alpha1 * anchor.width * dc,
        width: anchor.width * (spec.alpha2 * dw).exp(),
    }
}

/// Offsets that make [`decode`] reproduce `gt`.
pub fn encode(anchor: &Anchor, gt: &Segment, spec: &AnchorSpec) -> Result<(f64, f64)> {
    if !(gt.width > 0.0) {
        return Err(Error::invalid(format!(
            "cannot encode a segment of width {}",
            gt.width
        )));
    }
    let dc = (gt.center - anchor.center) / (spec.alpha1 * anchor.width);
    let dw = (gt.width / anchor.width).ln() / spec.alpha2;
    Ok((dc, dw))
}

/// Ground-truth assignment of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    /// Class id (≥ 1) when positive, `None` for background.
    pub label: Option<usize>,
    /// Index of the matched ground truth for positives.
    pub gt_index: Option<usize>,
    /// Best IoU over all ground truths.
    pub iou: f64,
}

impl AnchorMatch {
    pub fn is_positive(&self) -> bool {
        self.label.is_some()
    }

    /// Training target class, 0 for background.
    pub fn target_class(&self) -> usize {
        self.label.unwrap_or(0)
    }
}

/// Labels each anchor by its highest-IoU ground truth. Ties go to the lower index.
pub fn match_anchors(
    anchors: &[Anchor],
    gts: &[(Segment, usize)],
    threshold: f64,
) -> Vec<AnchorMatch> {
    anchors
        .iter()
        .map(|a| {
            let seg = a.segment();
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, _)) in gts.iter().enumerate() {
                let iou = iou_1d(&seg, g);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= threshold => AnchorMatch {
                    label: Some(gts[j].1),
                    gt_index: Some(j),
                    iou,
                },
                Some((_, iou)) => AnchorMatch {
                    label: None,
                    gt_index: None,
                    iou,
                },
                None => AnchorMatch {
                    label: None,
                    gt_index: None,
                    iou: 0.0,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Negatives per positive.
    pub ratio: f64,
    /// Predicted overlap above which a negative counts as hard.
    pub hard_threshold: f64,
    /// Negatives kept when a window has no positive at all.
    pub zero_positive_count: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            hard_threshold: 0.5,
            zero_positive_count: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Positive and negative anchor indices, ascending.
    pub indices: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
}

/// Picks every positive plus a quota of negatives, hard negatives first.
pub fn hard_negative_mining(
    matches: &[AnchorMatch],
    predicted_overlap: &[f64],
    cfg: &MiningConfig,
    seed: u64,
) -> Result<Selection> {
    if matches.len() != predicted_overlap.len() {
        return Err(Error::invalid(format!(
            "mining: {} matches but {} overlap predictions",
            matches.len(),
            predicted_overlap.len()
        )));
    }
    let positives: Vec<usize> = (0..matches.len())
        .filter(|&i| matches[i].is_positive())
        .collect();
    let mut negatives: Vec<usize> = (0..matches.len())
        .filter(|&i| !matches[i].is_positive())
        .collect();
    // highest predicted overlap first, index breaks ties
    negatives.sort_by(|&a, &b| {
        predicted_overlap[b]
            .total_cmp(&predicted_overlap[a])
            .then(a.cmp(&b))
    });

    let chosen: Vec<usize> = if positives.is_empty() {
        negatives
            .iter()
            .copied()
            .take(cfg.zero_positive_count)
            .collect()
    } else {
        let quota = ((cfg.ratio * positives.len() as f64).round() as usize).min(negatives.len());
        let hard = negatives
            .iter()
            .take_while(|&&i| predicted_overlap[i] > cfg.hard_threshold)
            .count();
        if hard >= quota {
            negatives[..quota].to_vec()
        } else {
            let mut chosen = negatives[..hard].to_vec();
            let rest = &negatives[hard..];
            // sample the remainder from index order so the draw does not depend on scores
            let mut pool = rest.to_vec();
            pool.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = index::sample(&mut rng, pool.len(), quota - hard);
            chosen.extend(picks.into_iter().map(|k| pool[k]));
            chosen
        }
    };

    let negatives_n = chosen.len();
    let mut indices = positives.clone();
    indices.extend(chosen);
    indices.sort_unstable();
    Ok(Selection {
        indices,
        positives: positives.len(),
        negatives: negatives_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: f64, e: f64) -> Segment {
        Segment::from_bounds(s, e).unwrap()
    }

    #[test]
    fn anchor_counts_and_placement() {
        let spec = AnchorSpec {
            layer_lengths: vec![4],
            ..AnchorSpec::default()
        };
        assert_eq!(generate_anchors(&spec).len(), 20);

        let single = AnchorSpec {
            layer_lengths: vec![1],
            ratios: vec![1.0],
            ..AnchorSpec::default()
        };
        let a = generate_anchors(&single);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].center, a[0].width), (0.5, 1.0));

        let thumos = AnchorSpec {
            layer_lengths: vec![16, 8, 4],
            ..AnchorSpec::default()
        };
        let all = generate_anchors(&thumos);
        assert_eq!(all.len(), 140);
        assert_eq!((all[5].layer, all[5].cell, all[5].ratio), (0, 1, 0.5));
        assert_eq!(all[80].layer, 1);
    }

    #[test]
    fn iou_examples() {
        let a = seg(0.2, 0.6);
        assert_eq!(iou_1d(&a, &a), 1.0);
        assert!((iou_1d(&seg(0.0, 2.0), &seg(1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_1d(&seg(0.0, 1.0), &seg(2.0, 3.0)), 0.0);
        assert_eq!(iou_1d(&seg(0.0, 1.0), &seg(1.0, 2.0)), 0.0);
    }

    #[test]
    fn decode_examples() {
        let spec = AnchorSpec::default();
        let a = Anchor {
            layer: 0,
            cell: 0,
            ratio: 1.0,
            center: 0.5,
            width: 0.2,
        };
        assert_eq!(decode(&a, 0.0, 0.0, &spec), a.segment());
        let s = decode(&a, 1.0, 0.0, &spec);
        assert!((s.center - 0.52).abs() < 1e-15 && s.width == 0.2);
        let s = decode(&a, 0.0, 1.0, &spec);
        assert!((s.width - 0.2 * 0.1f64.exp()).abs() < 1e-15);
        assert!((s.width - 0.22103).abs() < 1e-5);
        assert!(decode(&a, 0.0, -700.0, &spec).width > 0.0);
    }

    #[test]
    fn encode_examples() {
        let spec = AnchorSpec::default();
        let a = Anchor {
            layer: 0,
            cell: 0,
            ratio: 1.0,
            center: 0.5,
            width: 0.2,
        };
        assert_eq!(encode(&a, &a.segment(), &spec).unwrap(), (0.0, 0.0));
        let (dc, dw) = encode(&a, &Segment { center: 0.52, width: 0.2 }, &spec).unwrap();
        assert!((dc - 1.0).abs() < 1e-12 && dw == 0.0);
        assert!(encode(&a, &Segment { center: 0.5, width: 0.0 }, &spec).is_err());
    }

    fn anchor_at(s: f64, e: f64) -> Anchor {
        let g = seg(s, e);
        Anchor {
            layer: 0,
            cell: 0,
            ratio: 1.0,
            center: g.center,
            width: g.width,
        }
    }

    #[test]
    fn matching_examples() {
        let exact = anchor_at(0.2, 0.4);
        let m = match_anchors(&[exact], &[(seg(0.2, 0.4), 3)], 0.5);
        assert_eq!(m[0].label, Some(3));
        assert_eq!(m[0].iou, 1.0);

        // [0, 0.49] vs [0, 1.0]: IoU 0.49
        let m = match_anchors(&[anchor_at(0.0, 0.49)], &[(seg(0.0, 1.0), 1)], 0.5);
        assert!(m[0].label.is_none());
        assert!((m[0].iou - 0.49).abs() < 1e-12);

        // 0.6 against the first gt, 0.8 against the second
        let a = anchor_at(0.0, 1.0);
        let m = match_anchors(&[a], &[(seg(0.0, 0.6), 1), (seg(0.1, 0.9), 2)], 0.5);
        assert_eq!((m[0].label, m[0].gt_index), (Some(2), Some(1)));
        assert!((m[0].iou - 0.8).abs() < 1e-12);

        let m = match_anchors(&[a], &[], 0.5);
        assert_eq!(m[0], AnchorMatch { label: None, gt_index: None, iou: 0.0 });
    }

    fn labeled(pos: usize, neg: usize) -> Vec<AnchorMatch> {
        let mut v = vec![
            AnchorMatch {
                label: Some(1),
                gt_index: Some(0),
                iou: 0.7
            };
            pos
        ];
        v.extend(vec![
            AnchorMatch {
                label: None,
                gt_index: None,
                iou: 0.1
            };
            neg
        ]);
        v
    }

    #[test]
    fn mining_fills_quota_with_hard_then_random() {
        let m = labeled(4, 10);
        let mut ov = vec![0.2; 14];
        ov[6] = 0.9;
        ov[9] = 0.7;
        let s = hard_negative_mining(&m, &ov, &MiningConfig::default(), 1).unwrap();
        assert_eq!((s.positives, s.negatives), (4, 4));
        assert_eq!(s.indices.len(), 8);
        assert!((0..4).all(|i| s.indices.contains(&i)));
        assert!(s.indices.contains(&6) && s.indices.contains(&9));
    }

    #[test]
    fn mining_without_hard_negatives_draws_randomly() {
        let m = labeled(3, 20);
        let ov = vec![0.1; 23];
        let a = hard_negative_mining(&m, &ov, &MiningConfig::default(), 1).unwrap();
        let b = hard_negative_mining(&m, &ov, &MiningConfig::default(), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.negatives, 3);
        let c = hard_negative_mining(&m, &ov, &MiningConfig::default(), 2).unwrap();
        assert_eq!(c.negatives, 3);
    }

    #[test]
    fn mining_keeps_top_hard_negatives_within_quota() {
        let m = labeled(3, 100);
        let ov: Vec<f64> = (0..103).map(|i| if i < 3 { 0.0 } else { 0.5 + i as f64 * 1e-3 }).collect();
        let s = hard_negative_mining(&m, &ov, &MiningConfig::default(), 0).unwrap();
        assert_eq!(s.negatives, 3);
        assert_eq!(s.indices, vec![0, 1, 2, 100, 101, 102]);
    }

    #[test]
    fn mining_with_zero_positives_uses_fallback() {
        let m = labeled(0, 12);
        let ov: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let s = hard_negative_mining(&m, &ov, &MiningConfig::default(), 0).unwrap();
        assert_eq!(s.positives, 0);
        assert_eq!(s.indices, (4..12).collect::<Vec<_>>());
        let few = hard_negative_mining(&labeled(0, 3), &[0.0; 3], &MiningConfig::default(), 0)
            .unwrap();
        assert_eq!(few.negatives, 3);
    }
}
