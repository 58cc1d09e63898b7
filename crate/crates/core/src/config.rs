//! Run configuration: one TOML document with `[network]`, `[anchors]`, `[loss]`,
//! `[train]`, `[synth]` and `[infer]` sections. Every key has a default and unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ConvGeometry;
use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, MiningConfig};
use crate::params::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Feature channels per clip.
    pub input_dim: usize,
    /// Clips per window.
    pub window_length: usize,
    pub base_channels: usize,
    /// Strides of the two base convolutions; a stride-2 max-pool follows them.
    pub base_strides: [usize; 2],
    /// Action classes, not counting background.
    pub num_classes: usize,
    /// Lateral weight of the branch fusion sum.
    pub rho: f64,
    pub head_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            window_length: 64,
            base_channels: 32,
            base_strides: [1, 2],
            num_classes: 5,
            rho: 2.0 / 3.0,
            head_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    /// Smooth-L1 between decoded and ground-truth center/width.
    Decoded,
    /// Smooth-L1 between raw offsets and encoded ground truth.
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega: f64,
    pub match_threshold: f64,
    pub negative_ratio: f64,
    pub hard_negative_threshold: f64,
    pub zero_positive_negatives: usize,
    pub regression_target: RegressionTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 10.0,
            omega: 2.0 / 3.0,
            match_threshold: 0.5,
            negative_ratio: 1.0,
            hard_negative_threshold: 0.5,
            zero_positive_negatives: 8,
            regression_target: RegressionTarget::Decoded,
        }
    }
}

impl LossConfig {
    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            ratio: self.negative_ratio,
            hard_threshold: self.hard_negative_threshold,
            zero_positive_count: self.zero_positive_negatives,
        }
    }
}

/// Which streams and branches are built, trained and used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "main_only")]
    MainOnly,
    #[serde(rename = "main+prop")]
    MainProp,
    #[serde(rename = "main+cls")]
    MainCls,
    /// One shared deconvolution tower refining both classes and locations.
    #[serde(rename = "refinement")]
    Refinement,
    #[serde(rename = "full")]
    Full,
}

impl Mode {
    /// Ablation table order.
    pub const ALL: [Mode; 5] = [
        Mode::MainOnly,
        Mode::MainProp,
        Mode::MainCls,
        Mode::Refinement,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::MainOnly => "main_only",
            Mode::MainProp => "main+prop",
            Mode::MainCls => "main+cls",
            Mode::Refinement => "refinement",
            Mode::Full => "full",
        }
    }

    /// Some branch refines class scores.
    pub fn refines_classes(self) -> bool {
        matches!(self, Mode::MainCls | Mode::Refinement | Mode::Full)
    }

    /// Some branch refines overlaps and offsets.
    pub fn refines_locations(self) -> bool {
        matches!(self, Mode::MainProp | Mode::Refinement | Mode::Full)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 0,
            mode: Mode::Full,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub eval_videos: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action widths, as fractions of the window.
    pub min_width: f64,
    pub max_width: f64,
    pub noise: f64,
    /// Clips over which a motif ramps up and down at the action boundaries.
    pub ramp_clips: usize,
    /// Seconds between consecutive clips.
    pub clip_stride: f64,
    pub retry_limit: usize,
    /// Motif amplitude on the channels shared by every class.
    pub shared_amplitude: f64,
    /// Motif amplitude on the class-specific channels.
    pub class_amplitude: f64,
    /// All actions of a window share one class.
    pub single_class_windows: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            eval_videos: 50,
            min_actions: 1,
            max_actions: 3,
            min_width: 0.15,
            max_width: 0.45,
            noise: 0.75,
            ramp_clips: 2,
            clip_stride: 0.5,
            retry_limit: 20,
            shared_amplitude: 1.0,
            class_amplitude: 0.75,
            single_class_windows: true,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub nms_threshold: f64,
    pub min_score: f64,
    /// Multiply class scores by the fused overlap prediction.
    pub score_with_overlap: bool,
    pub eval_thresholds: Vec<f64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_threshold: 0.2,
            min_score: 0.0,
            score_with_overlap: false,
            eval_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub anchors: AnchorSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub infer: InferConfig,
}

// Fixed deconvolution used by both refinement towers: doubles the length.
pub const DECONV: ConvGeometry = ConvGeometry {
    kernel: 4,
    stride: 2,
    padding: 1,
};

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Window, feature and optimizer sizes for THUMOS14-scale two-stream features.
    pub fn thumos_scale() -> Self {
        let mut cfg = Self::default();
        cfg.network.input_dim = 2048;
        cfg.network.window_length = 512;
        cfg.network.base_channels = 256;
        cfg.network.base_strides = [4, 2];
        cfg.network.num_classes = 20;
        cfg.anchors.layer_lengths = vec![16, 8, 4];
        cfg.train.epochs = 30;
        cfg.train.learning_rate = 1e-4;
        cfg.train.batch_size = 48;
        cfg
    }

    /// Small enough for an exhaustive finite-difference check.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.network.input_dim = 4;
        cfg.network.window_length = 32;
        cfg.network.base_channels = 4;
        cfg.network.base_strides = [1, 2];
        cfg.network.num_classes = 2;
        cfg.anchors.layer_lengths = vec![4, 2];
        cfg.anchors.ratios = vec![1.0, 2.0];
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        let err = |m: String| Err(Error::Config(m));
        self.anchors.validate()?;
        if n.input_dim == 0 || n.base_channels == 0 || n.num_classes == 0 {
            return err("network.input_dim, base_channels and num_classes must be >= 1".into());
        }
        if n.head_kernel == 0 || n.head_kernel % 2 == 0 {
            return err("network.head_kernel must be odd".into());
        }
        if !(0.0..=1.0).contains(&n.rho) {
            return err(format!("network.rho = {} is outside [0, 1]", n.rho));
        }
        if n.base_strides.contains(&0) {
            return err("network.base_strides must be >= 1".into());
        }
        let lengths = &self.anchors.layer_lengths;
        for w in lengths.windows(2) {
            if w[0] != 2 * w[1] {
                return err(format!(
                    "anchors.layer_lengths {lengths:?} must halve from layer to layer"
                ));
            }
        }
        let base = self.base_output_length()?;
        if base != 2 * lengths[0] {
            return err(format!(
                "network.window_length {} with base_strides {:?} gives a base map of length {base}; \
                 the first anchor layer of length {} needs {}",
                n.window_length,
                n.base_strides,
                lengths[0],
                2 * lengths[0]
            ));
        }
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.omega) {
            return err(format!("loss.omega = {} is outside [0, 1]", l.omega));
        }
        if !(l.match_threshold > 0.0 && l.match_threshold < 1.0) {
            return err("loss.match_threshold must be in (0, 1)".into());
        }
        if ![l.alpha, l.beta, l.gamma, l.negative_ratio].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return err("loss weights and negative_ratio must be finite and non-negative".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return err("train.epochs and train.batch_size must be >= 1".into());
        }
        if !(t.learning_rate > 0.0) {
            return err("train.learning_rate must be positive".into());
        }
        let s = &self.synth;
        if s.min_actions > s.max_actions || !(s.min_width > 0.0 && s.min_width <= s.max_width && s.max_width < 1.0) {
            return err("synth action counts or widths are inconsistent".into());
        }
        if !(s.clip_stride > 0.0) || s.noise < 0.0 {
            return err("synth.clip_stride must be positive and synth.noise non-negative".into());
        }
        let i = &self.infer;
        if !(i.nms_threshold > 0.0 && i.nms_threshold < 1.0) {
            return err("infer.nms_threshold must be in (0, 1)".into());
        }
        if i.eval_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return err("infer.eval_thresholds must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Temporal length of the base feature map.
    pub fn base_output_length(&self) -> Result<usize> {
        let n = &self.network;
        let a = ConvGeometry::new(3, n.base_strides[0], 1).conv_output_len(n.window_length)?;
        let b = ConvGeometry::new(3, n.base_strides[1], 1).conv_output_len(a)?;
        Ok(b / 2)
    }
}
