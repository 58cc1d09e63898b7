//! Feature windows and time-stamped annotations shared by training, inference and evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::tensor::Tensor;

/// One `[D × T]` feature window cut from a video.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub video_id: String,
    /// Time of the first clip, in seconds.
    pub start: f64,
    /// Seconds between consecutive clips.
    pub stride: f64,
    pub features: Tensor,
}

impl Window {
    pub fn duration(&self) -> f64 {
        self.stride * self.features.length() as f64
    }

    /// Seconds → fraction of the window.
    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.start) / self.duration()
    }

    /// Fraction of the window → seconds.
    pub fn to_seconds(&self, u: f64) -> f64 {
        self.start + u * self.duration()
    }
}

/// A labelled action instance in seconds. `class` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    /// `classes[k]` is the name of class id `k + 1`.
    pub classes: Vec<String>,
    pub windows: Vec<Window>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name).map(|i| i + 1)
    }

    pub fn class_name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.classes.get(i)).map(String::as_str)
    }

    /// Ground truth of every window in normalized coordinates, clipped to the window.
    /// Annotations that do not intersect a window are ignored for that window.
    pub fn ground_truths(&self) -> Result<Vec<Vec<(Segment, usize)>>> {
        let mut by_video: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            by_video.entry(a.video_id.as_str()).or_default().push(a);
        }
        self.windows
            .iter()
            .map(|w| {
                let mut out = Vec::new();
                for a in by_video.get(w.video_id.as_str()).into_iter().flatten() {
                    let s = w.normalize(a.t_start).max(0.0);
                    let e = w.normalize(a.t_end).min(1.0);
                    if e > s {
                        out.push((Segment::from_bounds(s, e)?, a.class));
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// Checks shapes against `(D, T)` and class ids against the class list.
    pub fn check(&self, input_dim: usize, window_length: usize) -> Result<()> {
        for w in &self.windows {
            if w.features.shape() != (input_dim, window_length) {
                return Err(Error::Format(format!(
                    "window `{}` has shape {:?}, the network expects ({input_dim}, {window_length})",
                    w.video_id,
                    w.features.shape()
                )));
            }
        }
        if let Some(a) = self.annotations.iter().find(|a| a.class == 0 || a.class > self.classes.len()) {
            return Err(Error::Format(format!(
                "annotation of `{}` has class id {} outside 1..={}",
                a.video_id,
                a.class,
                self.classes.len()
            )));
        }
        Ok(())
    }
}
