//! Optimizer, training configuration and the epoch loop.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, stream_rng, SegSample};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::network::GgNet;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate is multiplied by `lr_decay` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Random flips and quarter turns on training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 60,
            lr_decay_every: 50,
            lr_decay: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// Step size used during zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay:
/// `v ← μv + g`, `p ← p − lr·(v + λp)`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: IndexMap::new() }
    }

    pub fn velocity(&self) -> &IndexMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.velocity.insert(name.into(), v);
    }

    /// Updates every parameter that received a gradient. Parameters outside
    /// the current graph keep their values and velocity.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            let Some(g) = p.grad() else { continue };
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(v.iter_mut())
                .zip(&g)
                .map(|((&w, v), &g)| {
                    *v = self.momentum * *v + g;
                    w - lr * (*v + self.weight_decay * w)
                })
                .collect();
            updates.push((name.to_string(), Tensor::new(p.shape(), data)?.requires_grad()));
        }
        for (name, t) in updates {
            params.replace(&name, t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Mean final-output segmentation loss.
    pub final_seg: f64,
    pub steps: usize,
}

pub struct Trainer {
    pub net: GgNet,
    pub opt: Sgd,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(net: GgNet, cfg: TrainConfig, weights: LossWeights, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        Ok(Trainer { net, opt, cfg, weights, seed, epoch: 0, step: 0 })
    }

    /// One optimizer step on `batch`. Returns the loss measured before the
    /// update.
    pub fn train_step(&mut self, batch: &[SegSample], lr: f64) -> Result<LossBreakdown> {
        let non_finite = |term: String, s: &Self| Error::NonFinite { term, epoch: s.epoch + 1, step: s.step + 1 };
        self.net.params.zero_grads();
        let (breakdown, out) = self.net.loss(batch, &self.weights, Mode::Train)?;
        if let Some(term) = breakdown.first_non_finite() {
            return Err(non_finite(term, self));
        }
        breakdown.total.backward()?;
        for (name, p) in self.net.params.iter() {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite(format!("gradient of {name}"), self));
            }
        }
        self.opt.step(&mut self.net.params, lr)?;
        self.net.apply_buffer_updates(out.buffer_updates)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs the next epoch. Shuffling and augmentation are drawn from
    /// streams keyed by `(seed, epoch)`, so a resumed run replays exactly.
    pub fn train_epoch(&mut self, samples: &[SegSample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, SHUFFLE_STREAM, epoch as u64));
        let mut aug_rng = stream_rng(self.seed, AUGMENT_STREAM, epoch as u64);
        let prepared: Vec<SegSample> = order
            .iter()
            .map(|&i| if self.cfg.augment { augment(&samples[i], &mut aug_rng).0 } else { samples[i].clone() })
            .collect();
        let (mut loss, mut final_seg, mut steps) = (0.0, 0.0, 0);
        for batch in prepared.chunks(self.cfg.batch_size) {
            let b = self.train_step(batch, lr)?;
            loss += b.total.item();
            final_seg += b.final_seg;
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochLog { epoch: self.epoch, lr, loss: loss / steps as f64, final_seg: final_seg / steps as f64, steps })
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn fit(&mut self, samples: &[SegSample], mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let log = self.train_epoch(samples)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::data::{generate_dataset, PhantomParams};
    use crate::network::{Architecture, Variant};

    fn arch() -> Architecture {
        Architecture {
            encoder: EncoderConfig {
                stage_channels: [2, 3, 4, 4],
                input_channels: 1,
                aspp_dilations: vec![1, 2],
                aspp_out_channels: 4,
            },
            reduction: 2,
            variant: Variant::FULL,
        }
    }

    fn samples(n: usize) -> Vec<SegSample> {
        let p = PhantomParams { height: 32, width: 32, axes_min: 4.0, axes_max: 8.0, ..Default::default() };
        generate_dataset(&p, n).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(49), 0.001);
        assert!((c.lr_at(50) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn sgd_closed_form() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap().requires_grad()).unwrap();
        let mut opt = Sgd::new(0.9, 0.1);
        for step in 0..2 {
            ps.get("w").unwrap().mul_scalar(3.0).sum().backward().unwrap();
            opt.step(&mut ps, 0.5).unwrap();
            let w = ps.get("w").unwrap().data().to_vec();
            if step == 0 {
                // v = 3; w = 1 - 0.5 (3 + 0.1)
                assert_eq!(w, vec![1.0 - 0.5 * (3.0 + 0.1), -2.0 - 0.5 * (3.0 - 0.2)]);
            }
        }
        assert_eq!(opt.velocity()["w"], vec![0.9 * 3.0 + 3.0; 2]);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let net = GgNet::new(arch(), 0).unwrap();
        let before: Vec<Vec<f64>> = net.params.iter().map(|(_, t)| t.to_vec()).collect();
        let mut tr = Trainer::new(net, TrainConfig::default(), LossWeights::default(), 0).unwrap();
        tr.train_step(&samples(2), 0.0).unwrap();
        let after: Vec<Vec<f64>> = tr.net.params.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn step_changes_every_parameter_with_gradient() {
        let net = GgNet::new(arch(), 1).unwrap();
        let before = net.params.clone();
        let mut tr = Trainer::new(net, TrainConfig::default(), LossWeights::default(), 0).unwrap();
        tr.train_step(&samples(2), 0.01).unwrap();
        for (name, t) in tr.net.params.iter() {
            let old = before.get(name).unwrap();
            let inert = old.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)) && old.data().iter().all(|&v| v == 0.0);
            if !inert {
                assert_ne!(t.data(), old.data(), "{name} unchanged");
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = samples(4);
        let run = || {
            let net = GgNet::new(arch(), 3).unwrap();
            let cfg = TrainConfig { epochs: 2, batch_size: 2, lr: 0.01, ..Default::default() };
            let mut tr = Trainer::new(net, cfg, LossWeights::default(), 3).unwrap();
            tr.fit(&data, |_| {}).unwrap().iter().map(|l| l.loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_names_term() {
        let mut net = GgNet::new(arch(), 0).unwrap();
        net.params.replace("head.b", Tensor::new(&[1], vec![f64::NAN]).unwrap()).unwrap();
        let mut tr = Trainer::new(net, TrainConfig::default(), LossWeights::default(), 0).unwrap();
        match tr.train_step(&samples(1), 0.01) {
            Err(Error::NonFinite { term, epoch: 1, step: 1 }) => assert!(term.contains("final"), "{term}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
