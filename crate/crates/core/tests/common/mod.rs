//! Brute-force reference implementations shared by the integration tests and the
//! acceptance suite. Segments here have integer endpoints on a grid of `1/GRID`, so
//! overlaps can be counted cell by cell in exact integer arithmetic.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tadnet::dataset::Annotation;
use tadnet::geometry::{Anchor, Segment};
use tadnet::infer::Detection;

pub const GRID: i64 = 64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half-open integer interval `[start, end)` in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cells {
    pub start: i64,
    pub end: i64,
}

impl Cells {
    pub fn random(rng: &mut impl Rng) -> Self {
        let start = rng.random_range(0..GRID - 1);
        let end = rng.random_range(start + 1..=GRID);
        Self { start, end }
    }

    pub fn segment(self) -> Segment {
        Segment::from_bounds(self.start as f64 / GRID as f64, self.end as f64 / GRID as f64).unwrap()
    }

    fn contains(self, k: i64) -> bool {
        self.start <= k && k < self.end
    }
}

/// Intersection and union cell counts.
pub fn cell_overlap(a: Cells, b: Cells) -> (i64, i64) {
    let lo = a.start.min(b.start);
    let hi = a.end.max(b.end);
    let mut inter = 0;
    let mut union = 0;
    for k in lo..hi {
        let (x, y) = (a.contains(k), b.contains(k));
        inter += i64::from(x && y);
        union += i64::from(x || y);
    }
    (inter, union)
}

pub fn brute_iou(a: Cells, b: Cells) -> f64 {
    let (i, u) = cell_overlap(a, b);
    if i == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Anchors spanning whole grid cells.
pub fn grid_anchors(rng: &mut impl Rng, n: usize) -> Vec<(Anchor, Cells)> {
    (0..n)
        .map(|i| {
            let c = Cells::random(rng);
            let s = c.segment();
            let a = Anchor {
                layer: 0,
                cell: i,
                ratio: 1.0,
                center: s.center,
                width: s.width,
            };
            (a, c)
        })
        .collect()
}

/// `(label, gt index)` per anchor: the first ground truth of maximal overlap, kept
/// when that overlap reaches the threshold.
pub fn brute_match(anchors: &[Cells], gts: &[(Cells, usize)], threshold: f64) -> Vec<(Option<usize>, Option<usize>)> {
    anchors
        .iter()
        .map(|&a| {
            let ious: Vec<f64> = gts.iter().map(|&(g, _)| brute_iou(a, g)).collect();
            let Some(best) = ious.iter().copied().reduce(f64::max) else {
                return (None, None);
            };
            let j = ious.iter().position(|&x| x == best).unwrap();
            if best >= threshold {
                (Some(gts[j].1), Some(j))
            } else {
                (None, None)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CellDetection {
    pub video: usize,
    pub cells: Cells,
    pub class: usize,
    pub score: f64,
}

impl CellDetection {
    pub fn random(rng: &mut impl Rng, videos: usize, classes: usize) -> Self {
        Self {
            video: rng.random_range(0..videos),
            cells: Cells::random(rng),
            class: rng.random_range(1..=classes),
            // a coarse score grid makes ties common
            score: f64::from(rng.random_range(1..=8u32)) / 8.0,
        }
    }

    pub fn detection(&self) -> Detection {
        let s = self.cells.segment();
        Detection {
            video_id: format!("v{}", self.video),
            t_start: s.start(),
            t_end: s.end(),
            class: self.class,
            score: self.score,
        }
    }
}

/// Repeatedly takes the best remaining detection and discards every remaining one of
/// the same class and video that overlaps it by more than `threshold`. Best means
/// highest score, then earliest start, then lowest class, then earliest in the input.
pub fn brute_nms(dets: &[CellDetection], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive[1..] {
            let (a, b) = (&dets[i], &dets[best]);
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.cells.start < b.cells.start || (a.cells.start == b.cells.start && a.class < b.class)));
            if better {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| {
            i != best
                && !(dets[i].class == dets[best].class
                    && dets[i].video == dets[best].video
                    && brute_iou(dets[i].cells, dets[best].cells) > threshold)
        });
    }
    kept
}

#[derive(Debug, Clone)]
pub struct CellTruth {
    pub video: usize,
    pub cells: Cells,
    pub class: usize,
}

impl CellTruth {
    pub fn annotation(&self) -> Annotation {
        let s = self.cells.segment();
        Annotation {
            video_id: format!("v{}", self.video),
            t_start: s.start(),
            t_end: s.end(),
            class: self.class,
        }
    }
}

/// AP as the sum, over each true positive in rank order, of `1/num_gt` times the best
/// precision reached at that rank or later.
pub fn brute_ap(dets: &[CellDetection], gts: &[CellTruth], class: usize, threshold: f64) -> Option<f64> {
    let mut truths: Vec<&CellTruth> = gts.iter().filter(|g| g.class == class).collect();
    if truths.is_empty() {
        return None;
    }
    truths.sort_by_key(|g| (g.cells.start, g.cells.end));
    let mut used = vec![false; truths.len()];
    let mut ranked: Vec<&CellDetection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(format!("v{}", a.video).cmp(&format!("v{}", b.video)))
            .then(a.cells.start.cmp(&b.cells.start))
            .then(a.cells.end.cmp(&b.cells.end))
    });
    let mut hits = Vec::new();
    for d in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in truths.iter().enumerate() {
            if used[j] || g.video != d.video {
                continue;
            }
            let iou = brute_iou(d.cells, g.cells);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        hits.push(best.is_some());
    }
    let n = truths.len() as f64;
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += best / n;
        }
    }
    Some(ap)
}

/// `count` detections and `count` truths over a few videos and classes.
pub fn eval_instance(rng: &mut impl Rng, count: usize) -> (Vec<CellDetection>, Vec<CellTruth>) {
    let videos = 2;
    let classes = 3;
    let dets = (0..count).map(|_| CellDetection::random(rng, videos, classes)).collect();
    let truths = (0..count)
        .map(|_| CellTruth {
            video: rng.random_range(0..videos),
            cells: Cells::random(rng),
            class: rng.random_range(1..=classes),
        })
        .collect();
    (dets, truths)
}

/// Full IoU thresholds of the evaluation table.
pub const TABLE_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

// ---------------------------------------------------------------- training fixtures

use std::path::Path;

use tadnet::dataset::{Dataset, Window};
use tadnet::eval::EvalResult;
use tadnet::geometry::iou_1d;
use tadnet::infer::detect;
use tadnet::io::{encode_detections, encode_metrics, save_dataset, load_dataset, ArtifactHeader};
use tadnet::parallel::Exec;
use tadnet::synth::{class_names, render_window, PlacedAction};
use tadnet::train::{train, Trainer};
use tadnet::{Mode, RunConfig};

pub struct Overfit {
    /// Steps taken until the loss fell below the target, or the step budget.
    pub steps: usize,
    pub final_loss: f64,
    /// Best same-class IoU of any detection with each embedded action.
    pub best_iou: Vec<f64>,
    pub map_at_half: f64,
}

/// Trains the full network on a single window with two embedded actions.
pub fn overfit(max_steps: usize, target: f64) -> Overfit {
    let mut cfg = RunConfig::desk();
    cfg.train.mode = Mode::Full;
    cfg.train.batch_size = 1;
    let actions = [
        PlacedAction { start: 8, end: 16, class: 2 },
        PlacedAction { start: 28, end: 52, class: 4 },
    ];
    let x = render_window(&cfg.network, &cfg.synth, &actions, &mut rng(5)).unwrap();
    let stride = cfg.synth.clip_stride;
    let window = Window {
        video_id: "solo".into(),
        start: 0.0,
        stride,
        features: x,
    };
    let data = Dataset {
        classes: class_names(cfg.network.num_classes),
        annotations: actions
            .iter()
            .map(|a| Annotation {
                video_id: "solo".into(),
                t_start: a.start as f64 * stride,
                t_end: a.end as f64 * stride,
                class: a.class,
            })
            .collect(),
        windows: vec![window],
    };
    let gts = data.ground_truths().unwrap();
    let mut trainer = Trainer::new(&cfg, Exec::Sequential).unwrap();
    let mut steps = 0;
    let mut final_loss = f64::INFINITY;
    while steps < max_steps && final_loss >= target {
        let r = trainer.step(&[(&data.windows[0].features, &gts[0])], &[0], 0).unwrap();
        final_loss = r.total;
        steps += 1;
    }
    let (params, _) = trainer.into_parts();
    let (dets, result): (Vec<Detection>, EvalResult) =
        tadnet::ablation::evaluate_params(&cfg, Mode::Full, &params, &data, Exec::Sequential).unwrap();
    let best_iou = data
        .annotations
        .iter()
        .map(|a| {
            let g = Segment::from_bounds(a.t_start, a.t_end).unwrap();
            dets.iter()
                .filter(|d| d.class == a.class)
                .map(|d| iou_1d(&d.segment(), &g))
                .fold(0.0, f64::max)
        })
        .collect();
    Overfit {
        steps,
        final_loss,
        best_iou,
        map_at_half: result.map_at(0.5).unwrap(),
    }
}

/// Small synthetic benchmark configuration for end-to-end runs.
pub fn pipeline_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.synth.train_videos = 24;
    cfg.synth.eval_videos = 8;
    cfg.train.epochs = 2;
    cfg
}

/// synth → files → train → infer → eval inside `dir`. Returns the metrics log and
/// the detection dump as written.
pub fn pipeline(dir: &Path, cfg: &RunConfig, exec: Exec) -> (Vec<u8>, Vec<u8>, EvalResult) {
    let header = ArtifactHeader {
        seed: cfg.train.seed,
        config: cfg.to_toml(),
    };
    let (train_set, eval_set) = tadnet::synth::generate_splits(cfg, exec).unwrap();
    let n = &cfg.network;
    save_dataset(&dir.join("train"), &train_set, n.input_dim, n.window_length, Some(&header)).unwrap();
    save_dataset(&dir.join("eval"), &eval_set, n.input_dim, n.window_length, Some(&header)).unwrap();
    let train_set = load_dataset(&dir.join("train")).unwrap();
    let eval_set = load_dataset(&dir.join("eval")).unwrap();

    let (params, records) = train(cfg, &train_set, exec, |_, _, _| Ok(())).unwrap();
    let metrics = encode_metrics(&records, Some(&header)).into_bytes();
    let net = tadnet::network::Network::new(cfg, cfg.train.mode).unwrap();
    let dets = detect(&net, &params, &eval_set.windows, &cfg.infer, exec).unwrap();
    let dump = encode_detections(&dets, &eval_set.classes, Some(&header)).into_bytes();
    std::fs::write(dir.join("metrics.jsonl"), &metrics).unwrap();
    std::fs::write(dir.join("detections.jsonl"), &dump).unwrap();
    let result = tadnet::eval::evaluate(&dets, &eval_set.annotations, &cfg.infer.eval_thresholds, exec);
    (metrics, dump, result)
}
