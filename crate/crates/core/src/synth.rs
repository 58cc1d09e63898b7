//! Synthetic detection benchmark.
//!
//! Each window is Gaussian background noise. Every action adds a class motif: a
//! fixed amplitude pattern over a class-specific subset of channels, scaled by an
//! envelope that ramps up and down over `ramp_clips` clips at the boundaries.
//! Action boundaries are snapped to clip boundaries so the annotation covers the
//! embedded motif exactly. Values are rounded to `f32` so a dataset read back
//! from disk is identical to the generated one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{NetworkConfig, RunConfig, SynthConfig};
use crate::dataset::{Annotation, Dataset, Window};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::tensor::Tensor;

/// A clip-aligned action: clips `start..end` carry the motif of `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedAction {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (1..=num_classes).map(|c| format!("class_{c}")).collect()
}

/// Channels `0..shared_channels(d)` respond to every action.
pub fn shared_channels(input_dim: usize) -> usize {
    (input_dim / 4).max(1)
}

/// Motif amplitude of `class` (1-based) on `channel`: `shared_amplitude` on the
/// shared channels, `class_amplitude` on the class's own block of channels.
pub fn motif_amplitude(synth: &SynthConfig, class: usize, channel: usize, input_dim: usize, num_classes: usize) -> f64 {
    let shared = shared_channels(input_dim);
    if channel < shared {
        return synth.shared_amplitude;
    }
    let free = input_dim - shared;
    if free == 0 {
        return 0.0;
    }
    let width = (free / num_classes.max(1)).max(1);
    let first = (class - 1) * width;
    let own = (0..width).any(|j| shared + (first + j) % free == channel);
    if own {
        synth.class_amplitude
    } else {
        0.0
    }
}

/// Envelope of clip `k` inside an action of `n` clips.
pub fn envelope(k: usize, n: usize, ramp: usize) -> f64 {
    let r = (ramp + 1) as f64;
    ((k + 1) as f64 / r).min((n - k) as f64 / r).min(1.0)
}

/// Renders one window: noise of standard deviation `synth.noise` plus the motifs.
pub fn render_window<R: Rng>(
    net: &NetworkConfig,
    synth: &SynthConfig,
    actions: &[PlacedAction],
    rng: &mut R,
) -> Result<Tensor> {
    let (d, t) = (net.input_dim, net.window_length);
    let mut x = Tensor::zeros(d, t);
    if synth.noise > 0.0 {
        let normal = Normal::new(0.0, synth.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in x.data_mut() {
            *v = normal.sample(rng);
        }
    }
    for a in actions {
        if a.start >= a.end || a.end > t || a.class == 0 || a.class > net.num_classes {
            return Err(Error::invalid(format!("action {a:?} does not fit the window")));
        }
        let n = a.end - a.start;
        for ch in 0..d {
            let amp = motif_amplitude(synth, a.class, ch, d, net.num_classes);
            if amp == 0.0 {
                continue;
            }
            let row = x.row_mut(ch);
            for k in 0..n {
                row[a.start + k] += amp * envelope(k, n, synth.ramp_clips);
            }
        }
    }
    for v in x.data_mut() {
        *v = f64::from(*v as f32);
    }
    Ok(x)
}

/// Draws up to `max_actions` non-overlapping clip-aligned actions.
pub fn draw_actions<R: Rng>(net: &NetworkConfig, synth: &SynthConfig, rng: &mut R) -> Vec<PlacedAction> {
    let t = net.window_length as f64;
    let count = rng.random_range(synth.min_actions..=synth.max_actions);
    let window_class = rng.random_range(1..=net.num_classes);
    let mut placed: Vec<PlacedAction> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..=synth.retry_limit {
            let width = rng.random_range(synth.min_width..=synth.max_width);
            let start = rng.random_range(0.0..=1.0 - width);
            let s = (start * t).round() as usize;
            let e = (((start + width) * t).round() as usize).min(net.window_length);
            let drawn = rng.random_range(1..=net.num_classes);
            let class = if synth.single_class_windows { window_class } else { drawn };
            if e <= s {
                continue;
            }
            if placed.iter().all(|p| e <= p.start || p.end <= s) {
                placed.push(PlacedAction { start: s, end: e, class });
                break;
            }
        }
    }
    placed.sort_by_key(|p| p.start);
    placed
}

/// `num_videos` windows, one per video, with ids `{prefix}_{index}`.
pub fn generate(
    net: &NetworkConfig,
    synth: &SynthConfig,
    num_videos: usize,
    seed: u64,
    prefix: &str,
    exec: Exec,
) -> Result<Dataset> {
    if synth.min_width * net.window_length as f64 <= 1.0 {
        return Err(Error::Config(format!(
            "synth.min_width = {} is shorter than two clips of a {}-clip window",
            synth.min_width, net.window_length
        )));
    }
    let per_window = exec.try_map(num_videos, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let actions = draw_actions(net, synth, &mut rng);
        let features = render_window(net, synth, &actions, &mut rng)?;
        Ok::<_, Error>((actions, features))
    })?;

    let mut ds = Dataset {
        classes: class_names(net.num_classes),
        ..Dataset::default()
    };
    for (i, (actions, features)) in per_window.into_iter().enumerate() {
        let window = Window {
            video_id: format!("{prefix}_{i:05}"),
            start: 0.0,
            stride: synth.clip_stride,
            features,
        };
        for a in actions {
            ds.annotations.push(Annotation {
                video_id: window.video_id.clone(),
                t_start: window.start + a.start as f64 * window.stride,
                t_end: window.start + a.end as f64 * window.stride,
                class: a.class,
            });
        }
        ds.windows.push(window);
    }
    Ok(ds)
}

/// Training and evaluation splits drawn from independent streams of `synth.seed`.
pub fn generate_splits(cfg: &RunConfig, exec: Exec) -> Result<(Dataset, Dataset)> {
    let s = &cfg.synth;
    let train = generate(&cfg.network, s, s.train_videos, s.seed, "train", exec)?;
    let eval = generate(&cfg.network, s, s.eval_videos, s.seed.wrapping_add(1), "eval", exec)?;
    Ok((train, eval))
}
