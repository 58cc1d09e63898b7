//! The three-stream anchor network.
//!
//! * base: conv → relu → conv → relu → max-pool
//! * main stream: one stride-2 conv per anchor layer, each with a joint head
//!   emitting class scores, an overlap logit and two offsets per anchor
//! * classification / proposal towers: the deepest layer is three Conv-ReLU
//!   units over the main map; every shallower layer sums a ReLU-Conv-ReLU lateral
//!   path with the deconvolved deeper tower map (weighted by `rho`) and applies
//!   Conv-ReLU-Conv. Tower heads emit only their own task's predictions.
//!
//! Heads are convolutional (shared across cells of one layer). Channel groups of a
//! head are laid out ratio-major; [`Graph::anchor_layout`] turns them into one column
//! per anchor in [`generate_anchors`] order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::config::{Mode, NetworkConfig, RunConfig, DECONV};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, Anchor, AnchorSpec};
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerKind {
    Classification,
    Proposal,
    /// Single tower with both head types, used by the refinement ablation.
    Refinement,
}

impl TowerKind {
    pub fn prefix(self) -> &'static str {
        match self {
            TowerKind::Classification => "cls",
            TowerKind::Proposal => "prop",
            TowerKind::Refinement => "ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

/// Per-anchor prediction handles for one stream. Each tensor has one column per anchor.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamVars {
    /// `[(C+1) × N]` softmax probabilities.
    pub probs: Option<Var>,
    /// `[1 × N]` overlap in `[0, 1]`.
    pub overlap: Option<Var>,
    pub dc: Option<Var>,
    pub dw: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct FeatureMaps {
    pub base: Option<Var>,
    pub main: Vec<Var>,
    pub cls: Vec<Var>,
    pub prop: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub main: StreamVars,
    /// Stream refining class scores (classification or refinement tower).
    pub cls: Option<StreamVars>,
    /// Stream refining overlaps and offsets (proposal or refinement tower).
    pub prop: Option<StreamVars>,
    /// Averaged predictions; falls back to the main stream where no branch exists.
    pub fused: StreamVars,
    pub maps: FeatureMaps,
}

/// Plain per-anchor predictions of one stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchOutputs {
    pub probs: Option<Vec<Vec<f64>>>,
    pub overlap: Option<Vec<f64>>,
    pub dc: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutputs {
    pub probs: Vec<Vec<f64>>,
    pub overlap: Vec<f64>,
    pub dc: Vec<f64>,
    pub dw: Vec<f64>,
}

impl FusedOutputs {
    pub fn len(&self) -> usize {
        self.overlap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overlap.is_empty()
    }
}

fn mean2(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
}

/// Averages the main stream with the class-refining and location-refining branches.
/// A missing branch leaves the main-stream values in place.
pub fn fuse(
    main: &BranchOutputs,
    cls: Option<&BranchOutputs>,
    prop: Option<&BranchOutputs>,
) -> Result<FusedOutputs> {
    let missing = |f: &str| Error::invalid(format!("main stream outputs lack `{f}`"));
    let probs = main.probs.as_ref().ok_or_else(|| missing("probs"))?;
    let overlap = main.overlap.as_ref().ok_or_else(|| missing("overlap"))?;
    let dc = main.dc.as_ref().ok_or_else(|| missing("dc"))?;
    let dw = main.dw.as_ref().ok_or_else(|| missing("dw"))?;
    let n = overlap.len();
    if probs.len() != n || dc.len() != n || dw.len() != n {
        return Err(Error::invalid("main stream outputs have unequal anchor counts"));
    }
    let aligned = |len: usize, what: &str| -> Result<()> {
        if len != n {
            return Err(Error::invalid(format!(
                "{what}: {len} anchors, main stream has {n}"
            )));
        }
        Ok(())
    };

    let probs = match cls.and_then(|c| c.probs.as_ref()) {
        Some(cp) => {
            aligned(cp.len(), "classification branch")?;
            probs
                .iter()
                .zip(cp)
                .map(|(a, b)| {
                    if a.len() != b.len() {
                        return Err(Error::invalid("class count differs between streams"));
                    }
                    Ok(mean2(a, b))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => probs.clone(),
    };
    let (overlap, dc, dw) = match prop {
        Some(p) => {
            let (po, pc, pw) = match (&p.overlap, &p.dc, &p.dw) {
                (Some(o), Some(c), Some(w)) => (o, c, w),
                _ => return Err(Error::invalid("proposal branch outputs are incomplete")),
            };
            aligned(po.len(), "proposal branch")?;
            aligned(pc.len(), "proposal branch")?;
            aligned(pw.len(), "proposal branch")?;
            (mean2(overlap, po), mean2(dc, pc), mean2(dw, pw))
        }
        None => (overlap.clone(), dc.clone(), dw.clone()),
    };
    Ok(FusedOutputs {
        probs,
        overlap,
        dc,
        dw,
    })
}

/// Network graph builder for one configuration and ablation mode.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    spec: AnchorSpec,
    mode: Mode,
    anchors: Vec<Anchor>,
}

const CONV3: usize = 3;

impl Network {
    pub fn new(cfg: &RunConfig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.network.clone(),
            spec: cfg.anchors.clone(),
            mode,
            anchors: generate_anchors(&cfg.anchors),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn anchor_spec(&self) -> &AnchorSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    #[cfg(test)]
    pub(crate) fn override_anchor_for_tests(&mut self, index: usize, center: f64, width: f64) {
        self.anchors[index].center = center;
        self.anchors[index].width = width;
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn ratios(&self) -> usize {
        self.spec.ratios.len()
    }

    fn num_layers(&self) -> usize {
        self.spec.layer_lengths.len()
    }

    fn towers(&self) -> Vec<TowerKind> {
        match self.mode {
            Mode::MainOnly => vec![],
            Mode::MainCls => vec![TowerKind::Classification],
            Mode::MainProp => vec![TowerKind::Proposal],
            Mode::Refinement => vec![TowerKind::Refinement],
            Mode::Full => vec![TowerKind::Classification, TowerKind::Proposal],
        }
    }

    /// Channels per anchor emitted by a head.
    fn head_fields(&self, tower: Option<TowerKind>) -> usize {
        let c = self.cfg.num_classes + 1;
        match tower {
            None | Some(TowerKind::Refinement) => c + 3,
            Some(TowerKind::Classification) => c,
            Some(TowerKind::Proposal) => 3,
        }
    }

    /// Every learnable tensor of this mode, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let b = self.cfg.base_channels;
        let mut conv = |name: String, cin: usize, cout: usize, k: usize, bias: bool| {
            out.push(ParamSpec {
                name: format!("{name}.w"),
                dims: vec![cout, cin, k],
                fan_in: cin * k,
                fan_out: cout * k,
                bias: false,
            });
            if bias {
                out.push(ParamSpec {
                    name: format!("{name}.b"),
                    dims: vec![cout],
                    fan_in: cin * k,
                    fan_out: cout * k,
                    bias: true,
                });
            }
        };
        conv("base.conv1".into(), self.cfg.input_dim, b, CONV3, true);
        conv("base.conv2".into(), b, b, CONV3, true);
        let r = self.ratios();
        let hk = self.cfg.head_kernel;
        for j in 1..=self.num_layers() {
            conv(format!("main.l{j}.conv"), b, b, CONV3, true);
            conv(format!("main.l{j}.head"), b, self.head_fields(None) * r, hk, true);
        }
        for tower in self.towers() {
            let p = tower.prefix();
            let top = self.num_layers();
            for u in 0..3 {
                conv(format!("{p}.l{top}.c1_{u}"), b, b, CONV3, true);
            }
            for j in 1..top {
                conv(format!("{p}.l{j}.c3"), b, b, CONV3, true);
                conv(format!("{p}.l{j}.deconv"), b, b, DECONV.kernel, false);
                conv(format!("{p}.l{j}.c2_0"), b, b, CONV3, true);
                conv(format!("{p}.l{j}.c2_1"), b, b, CONV3, true);
            }
            for j in 1..=top {
                conv(format!("{p}.l{j}.head"), b, self.head_fields(Some(tower)) * r, hk, true);
            }
        }
        out
    }

    /// Glorot-uniform weights, zero biases. Each tensor draws from its own stream seeded by
    /// `seed` and its name, so shared layers initialize identically across modes.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let len: usize = spec.dims.iter().product();
            let data = if spec.bias {
                vec![0.0; len]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                glorot_uniform(&mut rng, len, spec.fan_in, spec.fan_out)
            };
            let rows = spec.dims[0];
            let value = Tensor::from_vec(rows, len / rows, data)?;
            store.insert(&spec.name, spec.dims, value)?;
        }
        Ok(store)
    }

    fn conv(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        name: &str,
        x: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let w = g.param(params, &format!("{name}.w"))?;
        let b = g.param(params, &format!("{name}.b"))?;
        g.conv1d(x, w, b, ConvGeometry::new(kernel, stride, kernel / 2))
    }

    fn conv_relu(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let y = self.conv(g, params, name, x, CONV3, stride)?;
        Ok(g.relu(y))
    }

    /// Two convolutions and a max-pool over the raw `[D × T]` features.
    pub fn base_forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape != (self.cfg.input_dim, self.cfg.window_length) {
            return Err(Error::invalid(format!(
                "features have shape {shape:?}, network expects ({}, {})",
                self.cfg.input_dim, self.cfg.window_length
            )));
        }
        let [s1, s2] = self.cfg.base_strides;
        let h = self.conv_relu(g, params, "base.conv1", x, s1)?;
        let h = self.conv_relu(g, params, "base.conv2", h, s2)?;
        g.maxpool1d(h, 2, 2)
    }

    /// Runs a head over one map per layer and concatenates the anchor columns.
    fn heads(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        prefix: &str,
        maps: &[Var],
        fields: usize,
    ) -> Result<Var> {
        let mut cols = Vec::with_capacity(maps.len());
        for (j, &m) in maps.iter().enumerate() {
            let h = self.conv(
                g,
                params,
                &format!("{prefix}.l{}.head", j + 1),
                m,
                self.cfg.head_kernel,
                1,
            )?;
            cols.push(g.anchor_layout(h, fields, self.ratios())?);
        }
        g.concat_length(&cols)
    }

    fn split_classes(&self, g: &mut Graph, all: Var) -> Result<Var> {
        let logits = g.slice_channels(all, 0, self.cfg.num_classes + 1)?;
        Ok(g.softmax_channels(logits))
    }

    fn split_locations(&self, g: &mut Graph, all: Var, start: usize) -> Result<(Var, Var, Var)> {
        let ov = g.slice_channels(all, start, start + 1)?;
        let ov = g.sigmoid(ov);
        let dc = g.slice_channels(all, start + 1, start + 2)?;
        let dw = g.slice_channels(all, start + 2, start + 3)?;
        Ok((ov, dc, dw))
    }

    /// Cascaded stride-2 stages, one per anchor layer, plus the joint heads.
    pub fn main_stream_forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        base: Var,
    ) -> Result<(Vec<Var>, StreamVars)> {
        let mut maps = Vec::with_capacity(self.num_layers());
        let mut h = base;
        for j in 1..=self.num_layers() {
            h = self.conv_relu(g, params, &format!("main.l{j}.conv"), h, 2)?;
            let want = self.spec.layer_lengths[j - 1];
            if g.value(h).length() != want {
                return Err(Error::State(format!(
                    "main stream layer {j} has length {}, anchors expect {want}",
                    g.value(h).length()
                )));
            }
            maps.push(h);
        }
        let all = self.heads(g, params, "main", &maps, self.head_fields(None))?;
        let probs = self.split_classes(g, all)?;
        let (ov, dc, dw) = self.split_locations(g, all, self.cfg.num_classes + 1)?;
        Ok((
            maps,
            StreamVars {
                probs: Some(probs),
                overlap: Some(ov),
                dc: Some(dc),
                dw: Some(dw),
            },
        ))
    }

    /// Builds one refinement tower over the main-stream maps.
    pub fn refinement_branch_forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        kind: TowerKind,
        main_maps: &[Var],
    ) -> Result<(Vec<Var>, StreamVars)> {
        let p = kind.prefix();
        let top = self.num_layers();
        let mut maps = vec![None; top];

        let mut h = main_maps[top - 1];
        for u in 0..3 {
            h = self.conv_relu(g, params, &format!("{p}.l{top}.c1_{u}"), h, 1)?;
        }
        maps[top - 1] = Some(h);

        for j in (1..top).rev() {
            let fm = main_maps[j - 1];
            let lateral = g.relu(fm);
            let lateral = self.conv_relu(g, params, &format!("{p}.l{j}.c3"), lateral, 1)?;

            let deeper = maps[j].expect("filled top-down");
            let w = g.param(params, &format!("{p}.l{j}.deconv.w"))?;
            let up = g.deconv1d(deeper, w, DECONV)?;
            if g.value(up).length() != g.value(fm).length() {
                return Err(Error::State(format!(
                    "{p} layer {j}: deconvolution gives length {}, lateral map has {}",
                    g.value(up).length(),
                    g.value(fm).length()
                )));
            }
            let s = g.weighted_sum(lateral, up, self.cfg.rho)?;
            let s = self.conv_relu(g, params, &format!("{p}.l{j}.c2_0"), s, 1)?;
            let s = self.conv(g, params, &format!("{p}.l{j}.c2_1"), s, CONV3, 1)?;
            maps[j - 1] = Some(s);
        }
        let maps: Vec<Var> = maps.into_iter().map(|m| m.expect("all layers")).collect();

        let fields = self.head_fields(Some(kind));
        let all = self.heads(g, params, p, &maps, fields)?;
        let out = match kind {
            TowerKind::Classification => StreamVars {
                probs: Some(self.split_classes(g, all)?),
                ..StreamVars::default()
            },
            TowerKind::Proposal => {
                let (ov, dc, dw) = self.split_locations(g, all, 0)?;
                StreamVars {
                    probs: None,
                    overlap: Some(ov),
                    dc: Some(dc),
                    dw: Some(dw),
                }
            }
            TowerKind::Refinement => {
                let probs = self.split_classes(g, all)?;
                let (ov, dc, dw) = self.split_locations(g, all, self.cfg.num_classes + 1)?;
                StreamVars {
                    probs: Some(probs),
                    overlap: Some(ov),
                    dc: Some(dc),
                    dw: Some(dw),
                }
            }
        };
        Ok((maps, out))
    }

    /// Full forward pass for this mode, including the fused predictions.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        features: &Tensor,
    ) -> Result<ForwardVars> {
        let x = g.input(features.clone());
        let base = self.base_forward(g, params, x)?;
        let (main_maps, main) = self.main_stream_forward(g, params, base)?;
        let mut maps = FeatureMaps {
            base: Some(base),
            main: main_maps.clone(),
            ..FeatureMaps::default()
        };
        let mut cls = None;
        let mut prop = None;
        for tower in self.towers() {
            let (tm, out) = self.refinement_branch_forward(g, params, tower, &main_maps)?;
            match tower {
                TowerKind::Classification => {
                    maps.cls = tm;
                    cls = Some(out);
                }
                TowerKind::Proposal => {
                    maps.prop = tm;
                    prop = Some(out);
                }
                TowerKind::Refinement => {
                    maps.cls = tm.clone();
                    maps.prop = tm;
                    cls = Some(out);
                    prop = Some(out);
                }
            }
        }

        let mut fused = main;
        if let Some(c) = &cls {
            fused.probs = Some(g.weighted_sum(main.probs.unwrap(), c.probs.unwrap(), 0.5)?);
        }
        if let Some(p) = &prop {
            fused.overlap = Some(g.weighted_sum(main.overlap.unwrap(), p.overlap.unwrap(), 0.5)?);
            fused.dc = Some(g.weighted_sum(main.dc.unwrap(), p.dc.unwrap(), 0.5)?);
            fused.dw = Some(g.weighted_sum(main.dw.unwrap(), p.dw.unwrap(), 0.5)?);
        }
        Ok(ForwardVars {
            main,
            cls,
            prop,
            fused,
            maps,
        })
    }

    /// Reads the recorded prediction tensors back into plain per-anchor values.
    pub fn outputs(&self, g: &Graph, vars: &StreamVars) -> BranchOutputs {
        let row = |v: Option<Var>| v.map(|v| g.value(v).row(0).to_vec());
        BranchOutputs {
            probs: vars.probs.map(|p| {
                let t = g.value(p);
                (0..t.length()).map(|i| t.column(i)).collect()
            }),
            overlap: row(vars.overlap),
            dc: row(vars.dc),
            dw: row(vars.dw),
        }
    }

    /// Fused predictions read from a forward pass.
    pub fn fused_outputs(&self, g: &Graph, vars: &ForwardVars) -> FusedOutputs {
        let o = self.outputs(g, &vars.fused);
        FusedOutputs {
            probs: o.probs.expect("fused probs"),
            overlap: o.overlap.expect("fused overlap"),
            dc: o.dc.expect("fused dc"),
            dw: o.dw.expect("fused dw"),
        }
    }
}

/// FNV-1a; stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
