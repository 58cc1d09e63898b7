//! Mini-batch training with Adam.
//!
//! Window gradients inside a batch are computed independently (in parallel when
//! enabled), collected in batch order and summed sequentially, so a run is
//! bit-identical regardless of the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::config::{LossConfig, RunConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::losses::{build_loss, build_targets, LossReport};
use crate::network::Network;
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_cls_m")]
    pub cls_m: f64,
    #[serde(rename = "L_cls_c")]
    pub cls_c: Option<f64>,
    #[serde(rename = "L_reg_m")]
    pub reg_m: f64,
    #[serde(rename = "L_reg_p")]
    pub reg_p: Option<f64>,
    #[serde(rename = "L_ov_m")]
    pub ov_m: f64,
    #[serde(rename = "L_ov_p")]
    pub ov_p: Option<f64>,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl StepRecord {
    pub fn new(step: u64, epoch: usize, r: &LossReport) -> Self {
        let c = &r.components;
        Self {
            step,
            epoch,
            cls_m: c.cls_m,
            cls_c: c.cls_c,
            reg_m: c.reg_m,
            reg_p: c.reg_p,
            ov_m: c.ov_m,
            ov_p: c.ov_p,
            total: r.total,
            positives: r.positives,
            negatives: r.negatives,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one window. The mined negatives are drawn with
/// `mining_seed`. Fails with [`Error::Divergence`] naming the first non-finite tensor.
pub fn window_gradients(
    net: &Network,
    params: &ParamStore,
    features: &Tensor,
    gts: &[(Segment, usize)],
    loss_cfg: &LossConfig,
    mining_seed: u64,
) -> Result<(LossReport, Gradients)> {
    let mut g = Graph::new();
    let fw = net.forward(&mut g, params, features)?;
    let predicted_overlap = g.value(fw.fused.overlap.expect("fused overlap")).row(0).to_vec();
    let targets = build_targets(net, gts, &predicted_overlap, loss_cfg, mining_seed)?;
    let vars = build_loss(&mut g, net, &fw, &targets, loss_cfg)?;
    if let Some(what) = g.first_non_finite() {
        return Err(Error::Divergence(format!("non-finite {what}")));
    }
    let grads = g.backward(vars.total)?;
    Ok((LossReport::new(&g, &vars, &targets), grads))
}

pub struct Trainer {
    cfg: RunConfig,
    net: Network,
    params: ParamStore,
    exec: Exec,
    step: u64,
    records: Vec<StepRecord>,
}

impl Trainer {
    /// Fresh parameters for `cfg.train.mode`, initialized from `cfg.train.seed`.
    pub fn new(cfg: &RunConfig, exec: Exec) -> Result<Self> {
        let net = Network::new(cfg, cfg.train.mode)?;
        let params = net.init_params(cfg.train.seed)?;
        Self::with_params(cfg, params, exec)
    }

    pub fn with_params(cfg: &RunConfig, params: ParamStore, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg, cfg.train.mode)?;
        let mut expected: Vec<String> = net.param_specs().into_iter().map(|s| s.name).collect();
        expected.sort();
        if !params.names().eq(expected.iter().map(String::as_str)) {
            return Err(Error::State(format!(
                "parameter set does not match a {} network",
                cfg.train.mode.name()
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params,
            exec,
            step: 0,
            records: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn into_parts(self) -> (ParamStore, Vec<StepRecord>) {
        (self.params, self.records)
    }

    /// One Adam step on the mean gradient over `batch`. `ids` identify the windows
    /// for seeding the negative sampler.
    pub fn step(
        &mut self,
        batch: &[(&Tensor, &[(Segment, usize)])],
        ids: &[usize],
        epoch: usize,
    ) -> Result<&StepRecord> {
        if batch.is_empty() || batch.len() != ids.len() {
            return Err(Error::invalid("training step needs a non-empty batch with one id per window"));
        }
        let step = self.step;
        let seed = self.cfg.train.seed;
        let (net, params, loss_cfg) = (&self.net, &self.params, &self.cfg.loss);
        let results = self.exec.try_map(batch.len(), |k| {
            let (x, gts) = batch[k];
            let mining_seed = mix_seed(mix_seed(seed, step), ids[k] as u64);
            window_gradients(net, params, x, gts, loss_cfg, mining_seed)
        })?;

        let scale = 1.0 / batch.len() as f64;
        let mut sum: Vec<(String, Vec<f64>)> = Vec::new();
        let mut reports = Vec::with_capacity(results.len());
        for (report, grads) in results {
            reports.push(report);
            let grads = grads.into_params();
            if sum.is_empty() {
                sum = grads;
                continue;
            }
            for ((name, acc), (other, g)) in sum.iter_mut().zip(grads) {
                debug_assert_eq!(*name, other);
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        for (name, g) in &mut sum {
            g.iter_mut().for_each(|v| *v *= scale);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient of parameter `{name}` at step {step}"
                )));
            }
        }
        let report = LossReport::mean(&reports);
        if !report.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }

        self.params.clear_grads();
        for (name, g) in &sum {
            self.params.add_grad(name, g)?;
        }
        self.params.adam_step(&self.cfg.train.adam())?;
        self.step += 1;
        self.records.push(StepRecord::new(step, epoch, &report));
        Ok(self.records.last().expect("just pushed"))
    }

    /// One pass over `data` in an order shuffled by `(seed, epoch)`.
    pub fn epoch(&mut self, data: &Dataset, gts: &[Vec<(Segment, usize)>], epoch: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..data.windows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.train.seed, epoch as u64 + 1)));
        for ids in order.chunks(self.cfg.train.batch_size) {
            let batch: Vec<_> = ids
                .iter()
                .map(|&i| (&data.windows[i].features, gts[i].as_slice()))
                .collect();
            self.step(&batch, ids, epoch)?;
        }
        Ok(())
    }
}

/// Trains `cfg.train.epochs` epochs from a fresh initialization. `on_epoch` sees the
/// parameters after every epoch (the checkpoint hook).
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    exec: Exec,
    mut on_epoch: impl FnMut(usize, &ParamStore, &[StepRecord]) -> Result<()>,
) -> Result<(ParamStore, Vec<StepRecord>)> {
    if data.windows.is_empty() {
        return Err(Error::invalid("training data has no windows"));
    }
    data.check(cfg.network.input_dim, cfg.network.window_length)?;
    if data.num_classes() != cfg.network.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but network.num_classes = {}",
            data.num_classes(),
            cfg.network.num_classes
        )));
    }
    let gts = data.ground_truths()?;
    let mut trainer = Trainer::new(cfg, exec)?;
    for epoch in 0..cfg.train.epochs {
        trainer.epoch(data, &gts, epoch)?;
        on_epoch(epoch, trainer.params(), trainer.records())?;
    }
    Ok(trainer.into_parts())
}
