//! Stage-1 training: minibatch MSE against one-hot targets, Adam, and a
//! cosine schedule with warm restarts.

use std::f64::consts::PI;
use std::time::Instant;

use crate::arch::{init_params, NetworkSpec, ParamSet};
use crate::dataio::{batch_iterator, Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree};
use crate::runtime::{stage1_graph, NoiseKeys, RunMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// Epochs between learning-rate restarts.
    pub scheduler_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr0: 1e-4,
            lr_min: 0.0,
            scheduler_period: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        // lr0 = 0 is allowed: it freezes the parameters.
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr0)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0.max(0.0)) && self.lr0 > 0.0 {
            return Err(Error::Config(format!("lr_min must lie in [0, lr0], got {}", self.lr_min)));
        }
        if self.scheduler_period < 1 {
            return Err(Error::Config("scheduler period must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, restarting every `scheduler_period` epochs.
pub fn cosine_warm_restart_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.scheduler_period.max(1);
    let phase = (epoch % period) as f64 / period as f64;
    cfg.lr_min + (cfg.lr0 - cfg.lr_min) * 0.5 * (1.0 + (PI * phase).cos())
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }
}

/// One bias-corrected Adam step over every tensor in `params`.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_update",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "adam_update")?;
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gj = gj as f64;
            let mn = b1 * *mj as f64 + (1.0 - b1) * gj;
            let vn = b2 * *vj as f64 + (1.0 - b2) * gj * gj;
            *mj = mn as f32;
            *vj = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *pj = (*pj as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub seconds: f64,
    pub lr: f64,
}

/// Epoch-at-a-time stage-1 trainer.
pub struct Trainer {
    spec: NetworkSpec,
    cfg: TrainConfig,
    params: ParamSet,
    adam: AdamState,
    epoch: usize,
    iteration: u64,
}

impl Trainer {
    /// Starts from weights initialized under `cfg.seed`.
    pub fn new(spec: NetworkSpec, cfg: TrainConfig) -> Result<Self> {
        let params = init_params(&spec, &mut SeedTree::new(cfg.seed).simple(Purpose::Init, 0));
        Self::with_params(spec, cfg, params)
    }

    pub fn with_params(spec: NetworkSpec, cfg: TrainConfig, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        params.check(&spec)?;
        let adam = AdamState::from_config(&params, &cfg);
        Ok(Self {
            spec,
            cfg,
            params,
            adam,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let lr = cosine_warm_restart_lr(self.epoch, &self.cfg);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let batches = batch_iterator(data, self.cfg.batch_size, Some(self.cfg.seed), self.epoch as u64);
        for (bi, batch) in batches.enumerate() {
            let keys = NoiseKeys::train(self.cfg.seed, self.iteration);
            let mut tg = stage1_graph(&self.params, &self.spec, &batch.images, &keys)?;
            let target = tg.graph.constant(batch.targets.clone());
            let loss = tg.graph.mse_loss(tg.output, target)?;
            let lv = tg.graph.scalar(loss);
            // spikes squash NaN to 0, so scan the layer outputs as well
            let bad_layer = tg
                .layer_outputs
                .iter()
                .find(|(_, n)| !tg.graph.value(*n).is_finite())
                .map(|(name, _)| name.clone());
            if bad_layer.is_some() || !lv.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: bi,
                    layer: bad_layer.unwrap_or_else(|| "loss".into()),
                });
            }
            let preds = tg.graph.value(tg.output).argmax_rows();
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, &l)| **p == l as usize)
                .count();
            loss_sum += lv * batch.labels.len() as f64;

            tg.graph.backward(loss)?;
            let grads: Vec<Tensor> = tg
                .params
                .iter()
                .zip(&self.params.tensors)
                .map(|(&n, p)| tg.graph.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: bi,
                    layer: format!("gradient of {}", self.params.names[i]),
                });
            }
            adam_update(&mut self.params.tensors, &grads, &mut self.adam, lr)?;
            self.iteration += 1;
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            lr,
        };
        self.epoch += 1;
        Ok(m)
    }

    /// Packages the current weights as a stage-1 checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
            mode: RunMode::stage1(),
            seed: self.cfg.seed,
            metadata: Default::default(),
        };
        c.metadata.insert("epochs".into(), self.epoch.to_string());
        c
    }
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn train_stage1(
    spec: &NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(spec.clone(), cfg.clone())?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let m = t.run_epoch(data)?;
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((t.checkpoint(), metrics))
}
