//! Experiment drivers shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use noisnn::arch::{parse_arch, LayerSpec, NetworkSpec, ParamSet, Readout};
use noisnn::autodiff::{Graph, NodeId};
use noisnn::dataio::{self, batch_iterator, Checkpoint, Dataset, Split};
use noisnn::error::{Error, Result};
use noisnn::kernels;
use noisnn::rng::{Purpose, SeedTree};
use noisnn::runtime::{self, EvalOptions, NoiseKeys, RunMode, Stage};
use noisnn::spiking::{self, LIFState, NoiseFamily, NoiseSpec, RenormParams};
use noisnn::tensor::Tensor;
use noisnn::trainer::{adam_update, cosine_warm_restart_lr, AdamState, EpochMetrics, TrainConfig, Trainer};

use crate::report::{Config, ReportRow};

pub const DEFAULT_ARCH: &str = "64C3-AP2-128C3-AP2-128C3-AP2-512FC-10FC";
pub const VALIDATION_HOLDOUT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

impl DatasetName {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashion" => Ok(DatasetName::FashionMnist),
            other => Err(format!("unknown dataset '{other}' (expected mnist or fashion-mnist)")),
        }
    }
}

/// `$NOISNN_DATA/<name>` when the variable is set, else `data/<name>`.
pub fn default_data_dir(name: DatasetName) -> PathBuf {
    let root = std::env::var_os("NOISNN_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    root.join(name.dir_name())
}

pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    dataio::load_standard(dir, split)
}

/// Training set with the last `holdout` images removed, capped at `subset`.
pub fn training_subset(full: &Dataset, holdout: usize, subset: Option<usize>) -> Result<Dataset> {
    let train = if holdout > 0 {
        full.split_validation(holdout)?.0
    } else {
        full.clone()
    };
    Ok(match subset {
        Some(n) if n < train.len() => train.head(n),
        _ => train,
    })
}

/// Everything needed to train one stage-1 model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProtocol {
    pub arch: String,
    pub noise: NoiseSpec,
    pub readout: Readout,
    pub train: TrainConfig,
}

impl TrainProtocol {
    /// Default network with default noise and the given budget.
    pub fn default_net(epochs: usize, seed: u64) -> Self {
        Self {
            arch: DEFAULT_ARCH.into(),
            noise: NoiseSpec::default(),
            readout: Readout::Spikes,
            train: TrainConfig {
                epochs,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn spec(&self, input_shape: &[usize]) -> Result<NetworkSpec> {
        let mut spec = parse_arch(&self.arch, input_shape)?;
        spec.noise = self.noise;
        spec.readout = self.readout;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn train_model(
    protocol: &TrainProtocol,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let spec = protocol.spec(data.image_shape())?;
    let (mut ckpt, metrics) = noisnn::trainer::train_stage1(&spec, data, &protocol.train, |m| on_epoch(m))?;
    ckpt.metadata.insert("train_images".into(), data.len().to_string());
    Ok((ckpt, metrics))
}

fn check_compatible(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ds.image_shape() != ckpt.spec.input_shape.as_slice() {
        return Err(Error::Format {
            path: PathBuf::from("<dataset>"),
            message: format!(
                "images of shape {:?} do not fit a network expecting {:?}",
                ds.image_shape(),
                ckpt.spec.input_shape
            ),
        });
    }
    Ok(())
}

/// Accuracy after each `T` in `t_list`, from one run of `max(t_list)` steps.
pub fn accuracy_curve(
    ckpt: &Checkpoint,
    ds: &Dataset,
    stage: Stage,
    renorm: &RenormParams,
    t_list: &[usize],
    eval_seed: u64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    check_compatible(ckpt, ds)?;
    let t_max = t_list.iter().copied().max().unwrap_or(1);
    let mode = match stage {
        Stage::Single => {
            if t_max != 1 {
                return Err(Error::Config("stage 1 runs exactly one step".into()));
            }
            RunMode::stage1()
        }
        Stage::Replicated => RunMode::stage2(t_max),
        Stage::Stateful => RunMode::stage3(t_max, *renorm),
    };
    mode.validate(&ckpt.spec.noise)?;
    let mut correct = vec![0usize; t_list.len()];
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch_size.max(1)).min(ds.len());
        let batch = ds.images.rows(start, end);
        let keys = NoiseKeys::eval(eval_seed, start as u64);
        let r = runtime::evaluate(
            &ckpt.params,
            &ckpt.spec,
            &batch,
            &mode,
            &keys,
            EvalOptions {
                keep_steps: stage != Stage::Single,
                ..Default::default()
            },
        )?;
        for (i, &t) in t_list.iter().enumerate() {
            let preds = match &r.per_step_outputs {
                Some(steps) => runtime::prefix_average(steps, t)?.argmax_rows(),
                None => r.predictions.clone(),
            };
            correct[i] += preds
                .iter()
                .zip(&ds.labels[start..end])
                .filter(|(p, &l)| **p == l as usize)
                .count();
        }
        start = end;
    }
    Ok(correct.iter().map(|&c| c as f64 / ds.len() as f64).collect())
}

fn model_config(name: &str, ckpt: &Checkpoint) -> Config {
    Config::new()
        .with("model", name)
        .with("noise", ckpt.spec.noise.family)
        .with("seed", ckpt.seed)
}

/// Stage-2 and stage-3 accuracy of every model at every `T`, per eval seed.
pub fn sweep_t(
    models: &[(String, Checkpoint)],
    ds: &Dataset,
    t_list: &[usize],
    eval_seeds: &[u64],
    renorm: &RenormParams,
    batch_size: usize,
    mut emit: impl FnMut(&ReportRow),
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (name, ckpt) in models {
        for &seed in eval_seeds {
            for stage in [Stage::Replicated, Stage::Stateful] {
                let t0 = Instant::now();
                let accs = accuracy_curve(ckpt, ds, stage, renorm, t_list, seed, batch_size)?;
                let secs = t0.elapsed().as_secs_f64();
                for (&t, &acc) in t_list.iter().zip(&accs) {
                    let mut cfg = model_config(name, ckpt).with("eval_seed", seed).with("stage", stage).with("T", t);
                    if stage == Stage::Stateful {
                        cfg = cfg.with("alpha", renorm.alpha).with("beta", renorm.beta);
                    }
                    let row = ReportRow::new("sweep-t", &cfg, "acc", acc, secs);
                    emit(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

/// Stage-3 accuracy for every `α` and `T`. The `α = 2` rows carry
/// `residual=none`: their residual noise has zero width.
#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha(
    models: &[(String, Checkpoint)],
    ds: &Dataset,
    alphas: &[f32],
    t_list: &[usize],
    eval_seeds: &[u64],
    beta: f32,
    batch_size: usize,
    mut emit: impl FnMut(&ReportRow),
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (name, ckpt) in models {
        for &seed in eval_seeds {
            for &alpha in alphas {
                let renorm = RenormParams::new(alpha, beta)?;
                let residual = spiking::residual_noise_spec(&ckpt.spec.noise, &renorm)?;
                let t0 = Instant::now();
                let accs = accuracy_curve(ckpt, ds, Stage::Stateful, &renorm, t_list, seed, batch_size)?;
                let secs = t0.elapsed().as_secs_f64();
                for (&t, &acc) in t_list.iter().zip(&accs) {
                    let mut cfg = model_config(name, ckpt)
                        .with("eval_seed", seed)
                        .with("stage", 3)
                        .with("T", t)
                        .with("alpha", alpha)
                        .with("beta", beta);
                    if residual.half_range == 0.0 {
                        cfg = cfg.with("residual", "none");
                    }
                    let row = ReportRow::new("sweep-alpha", &cfg, "acc", acc, secs);
                    emit(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

/// Mean of `metric` over rows whose config matches every `(key, value)`.
pub fn mean_where(rows: &[ReportRow], filters: &[(&str, &str)]) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| {
            let c = Config::parse(&r.config);
            filters.iter().all(|(k, v)| c.get(k) == Some(*v))
        })
        .filter_map(|r| r.numeric())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Trains one model per (family, seed) under the same budget and reports
/// stage-3 accuracy at each `T`, plus per-family gains and the gap between
/// the first two families at the largest `T`.
///
/// The `none` family has no noise to split, so it is run with `α = inf`.
#[allow(clippy::too_many_arguments)]
pub fn compare_noise(
    base: &TrainProtocol,
    families: &[NoiseFamily],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    t_list: &[usize],
    renorm: &RenormParams,
    batch_size: usize,
    mut emit: impl FnMut(&ReportRow),
    mut on_model: impl FnMut(NoiseFamily, u64, &Checkpoint),
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let t_first = *t_list.iter().min().unwrap_or(&1);
    let t_last = *t_list.iter().max().unwrap_or(&1);
    for &family in families {
        for &seed in seeds {
            let mut p = base.clone();
            p.noise = match family {
                NoiseFamily::None => NoiseSpec::none(),
                f => NoiseSpec {
                    family: f,
                    ..base.noise
                },
            };
            p.train.seed = seed;
            let t0 = Instant::now();
            let (ckpt, _) = train_model(&p, train, |_| {})?;
            let train_secs = t0.elapsed().as_secs_f64();
            on_model(family, seed, &ckpt);
            let r = if family == NoiseFamily::None {
                RenormParams::new(f32::INFINITY, renorm.beta)?
            } else {
                *renorm
            };
            let accs = accuracy_curve(&ckpt, test, Stage::Stateful, &r, t_list, seed, batch_size)?;
            for (&t, &acc) in t_list.iter().zip(&accs) {
                let cfg = Config::new()
                    .with("noise", family)
                    .with("seed", seed)
                    .with("stage", 3)
                    .with("T", t)
                    .with("alpha", r.alpha)
                    .with("beta", r.beta);
                let row = ReportRow::new("compare-noise", &cfg, "acc", acc, train_secs);
                emit(&row);
                rows.push(row);
            }
        }
    }
    let mut summary = Vec::new();
    let mean_at = |rows: &[ReportRow], f: NoiseFamily, t: usize| {
        mean_where(rows, &[("noise", &f.to_string()), ("T", &t.to_string())])
    };
    for &family in families {
        if let (Some(a), Some(b)) = (mean_at(&rows, family, t_first), mean_at(&rows, family, t_last)) {
            let cfg = Config::new().with("noise", family).with("from_T", t_first).with("to_T", t_last);
            summary.push(ReportRow::new("compare-noise", &cfg, "mean_gain", b - a, 0.0));
        }
    }
    if families.len() >= 2 {
        if let (Some(a), Some(b)) = (mean_at(&rows, families[0], t_last), mean_at(&rows, families[1], t_last)) {
            let cfg = Config::new()
                .with("families", format!("{}-{}", families[0], families[1]))
                .with("T", t_last);
            summary.push(ReportRow::new("compare-noise", &cfg, "gap", a - b, 0.0));
        }
    }
    for row in &summary {
        emit(row);
    }
    rows.extend(summary);
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Direct multi-step training, used only as the bench-speed baseline.

fn param_slots(spec: &NetworkSpec) -> Vec<Option<(usize, Option<usize>)>> {
    let mut next = 0;
    spec.layers
        .iter()
        .map(|l| {
            l.is_weighted().then(|| {
                let w = next;
                next += 1;
                let b = spec.bias.then(|| {
                    next += 1;
                    next - 1
                });
                (w, b)
            })
        })
        .collect()
}

/// Unrolled `steps`-step LIF network with carried membrane state and no
/// noise; returns the graph, the output averaged over steps, and the
/// parameter leaves.
pub fn direct_graph(params: &ParamSet, spec: &NetworkSpec, batch: &Tensor, steps: usize) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    params.check(spec)?;
    let mut g = Graph::new();
    let pnodes: Vec<NodeId> = params.tensors.iter().map(|t| g.parameter(t.clone())).collect();
    let slots = param_slots(spec);
    let x0 = g.constant(batch.clone());
    let lif = spec.lif;
    let n_spiking = spec.spiking_layers();
    let mut v: Vec<Option<NodeId>> = vec![None; n_spiking];
    let mut acc: Option<NodeId> = None;
    for _ in 0..steps {
        let mut x = x0;
        let mut k = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv3 { .. } => {
                    let (w, b) = slots[i].expect("weighted");
                    g.conv3(x, pnodes[w], b.map(|b| pnodes[b]))?
                }
                LayerSpec::Fc { .. } => {
                    let (w, b) = slots[i].expect("weighted");
                    g.fc(x, pnodes[w], b.map(|b| pnodes[b]))?
                }
                LayerSpec::AvgPool2 => g.avgpool2(x)?,
                LayerSpec::Flatten => {
                    let shape = [g.value(x).batch(), g.value(x).row_len()];
                    g.reshape(x, &shape)?
                }
                LayerSpec::Spike => {
                    let h = match v[k] {
                        Some(prev) => {
                            let leak = g.scale(prev, lif.lambda);
                            g.add(leak, x)?
                        }
                        None => x,
                    };
                    let s = g.heaviside(h, spec.surrogate);
                    let hs = g.mul(h, s)?;
                    let mut vn = g.sub(h, hs)?;
                    if lif.v_reset != 0.0 {
                        let r = g.scale(s, lif.v_reset);
                        vn = g.add(vn, r)?;
                    }
                    v[k] = Some(vn);
                    let last = k + 1 == n_spiking;
                    k += 1;
                    if last && spec.readout == Readout::Potentials {
                        h
                    } else {
                        s
                    }
                }
            };
        }
        acc = Some(match acc {
            Some(a) => g.add(a, x)?,
            None => x,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("steps must be >= 1".into()))?;
    let out = g.scale(sum, 1.0 / steps as f32);
    Ok((g, out, pnodes))
}

/// Inference for the directly trained network (plain LIF, no noise).
pub fn direct_forward(params: &ParamSet, spec: &NetworkSpec, batch: &Tensor, steps: usize) -> Result<Tensor> {
    params.check(spec)?;
    let slots = param_slots(spec);
    let n_spiking = spec.spiking_layers();
    let mut states: Vec<Option<LIFState>> = vec![None; n_spiking];
    let mut acc: Option<Tensor> = None;
    for _ in 0..steps {
        let mut x = batch.clone();
        let mut k = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv3 { .. } => {
                    let (w, b) = slots[i].expect("weighted");
                    kernels::conv3_forward(&x, &params.tensors[w], b.map(|b| &params.tensors[b]))?
                }
                LayerSpec::Fc { .. } => {
                    let (w, b) = slots[i].expect("weighted");
                    kernels::fc_forward(&x, &params.tensors[w], b.map(|b| &params.tensors[b]))?
                }
                LayerSpec::AvgPool2 => kernels::avgpool2_forward(&x)?,
                LayerSpec::Flatten => {
                    let (n, w) = (x.batch(), x.row_len());
                    x.reshape(&[n, w])?
                }
                LayerSpec::Spike => {
                    let st = states[k].get_or_insert_with(|| LIFState::resting(x.shape()));
                    let leak = st.v.map(|v| spec.lif.lambda * v);
                    let h = leak.zip_map(&x, "lif", |a, b| a + b)?;
                    let (s, next) = spiking::lif_step_leaky(st, &spec.lif, &x)?;
                    *st = next;
                    let last = k + 1 == n_spiking;
                    k += 1;
                    if last && spec.readout == Readout::Potentials {
                        h
                    } else {
                        s
                    }
                }
            };
        }
        match &mut acc {
            Some(a) => a.add_assign(&x)?,
            None => acc = Some(x),
        }
    }
    let sum = acc.ok_or_else(|| Error::Config("steps must be >= 1".into()))?;
    Ok(sum.map(|v| v * (1.0 / steps as f32)))
}

/// Epoch-at-a-time direct BPTT trainer.
pub struct DirectTrainer {
    spec: NetworkSpec,
    cfg: TrainConfig,
    steps: usize,
    params: ParamSet,
    adam: AdamState,
    epoch: usize,
}

impl DirectTrainer {
    pub fn new(spec: NetworkSpec, cfg: TrainConfig, steps: usize) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let params = noisnn::arch::init_params(&spec, &mut SeedTree::new(cfg.seed).simple(Purpose::Init, 0));
        let adam = AdamState::from_config(&params, &cfg);
        Ok(Self {
            spec,
            cfg,
            steps,
            params,
            adam,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let lr = cosine_warm_restart_lr(self.epoch, &self.cfg);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, batch) in batch_iterator(data, self.cfg.batch_size, Some(self.cfg.seed), self.epoch as u64).enumerate() {
            let (mut g, out, pnodes) = direct_graph(&self.params, &self.spec, &batch.images, self.steps)?;
            let target = g.constant(batch.targets.clone());
            let loss = g.mse_loss(out, target)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: bi,
                    layer: "direct-training loss".into(),
                });
            }
            loss_sum += lv * batch.labels.len() as f64;
            correct += g
                .value(out)
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, &l)| **p == l as usize)
                .count();
            g.backward(loss)?;
            let grads: Vec<Tensor> = pnodes
                .iter()
                .zip(&self.params.tensors)
                .map(|(&n, p)| g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_update(&mut self.params.tensors, &grads, &mut self.adam, lr)?;
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

    pub fn accuracy(&self, ds: &Dataset, batch_size: usize) -> Result<f64> {
        let mut correct = 0;
        let mut start = 0;
        while start < ds.len() {
            let end = (start + batch_size.max(1)).min(ds.len());
            let out = direct_forward(&self.params, &self.spec, &ds.images.rows(start, end), self.steps)?;
            correct += out
                .argmax_rows()
                .iter()
                .zip(&ds.labels[start..end])
                .filter(|(p, &l)| **p == l as usize)
                .count();
            start = end;
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub target_acc: f64,
    /// Training wall-clock budget per arm.
    pub budget_seconds: f64,
    pub steps: usize,
    pub renorm: RenormParams,
    pub max_epochs: usize,
    pub eval_batch: usize,
}

/// Outcome of one bench-speed arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    /// Training seconds until the target was first met; `None` on timeout.
    pub seconds_to_target: Option<f64>,
    pub train_seconds: f64,
    pub epochs: usize,
    pub accuracies: Vec<f64>,
}

impl ArmResult {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.train_seconds / self.epochs.max(1) as f64
    }
}

/// Runs epochs until the target accuracy or the budget is reached.
/// `epoch()` returns `(training seconds, accuracy)`; evaluation time is not
/// part of the returned seconds.
fn run_arm(
    settings: &BenchSettings,
    mut epoch: impl FnMut() -> Result<(f64, f64)>,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<ArmResult> {
    let mut train_seconds = 0.0;
    let mut accuracies = Vec::new();
    for e in 0..settings.max_epochs {
        let (secs, acc) = epoch()?;
        train_seconds += secs;
        accuracies.push(acc);
        progress(e, train_seconds, acc);
        if acc >= settings.target_acc {
            return Ok(ArmResult {
                seconds_to_target: Some(train_seconds),
                train_seconds,
                epochs: e + 1,
                accuracies,
            });
        }
        if train_seconds >= settings.budget_seconds {
            break;
        }
    }
    Ok(ArmResult {
        seconds_to_target: None,
        train_seconds,
        epochs: accuracies.len(),
        accuracies,
    })
}

/// Arm A: stage-1 training, converted to stage 3 after every epoch and
/// checked at `settings.steps` steps. Conversion time counts as training.
pub fn bench_ours(
    protocol: &TrainProtocol,
    train: &Dataset,
    eval: &Dataset,
    settings: &BenchSettings,
    progress: impl FnMut(usize, f64, f64),
) -> Result<ArmResult> {
    let spec = protocol.spec(train.image_shape())?;
    let mut trainer = Trainer::new(spec, protocol.train.clone())?;
    let target_mode = RunMode::stage3(settings.steps, settings.renorm);
    let seed = protocol.train.seed;
    run_arm(
        settings,
        || {
            let t0 = Instant::now();
            trainer.run_epoch(train)?;
            let ckpt = runtime::convert(&trainer.checkpoint(), target_mode)?;
            let secs = t0.elapsed().as_secs_f64();
            let acc = runtime::accuracy(
                &ckpt.params,
                &ckpt.spec,
                &eval.images,
                &eval.labels,
                &ckpt.mode,
                seed,
                settings.eval_batch,
            )?;
            Ok((secs, acc))
        },
        progress,
    )
}

/// Arm B: direct training through `settings.steps` unrolled LIF steps.
pub fn bench_direct(
    protocol: &TrainProtocol,
    train: &Dataset,
    eval: &Dataset,
    settings: &BenchSettings,
    progress: impl FnMut(usize, f64, f64),
) -> Result<ArmResult> {
    let mut spec = protocol.spec(train.image_shape())?;
    spec.noise = NoiseSpec::none();
    let mut trainer = DirectTrainer::new(spec, protocol.train.clone(), settings.steps)?;
    run_arm(
        settings,
        || {
            let t0 = Instant::now();
            trainer.run_epoch(train)?;
            let secs = t0.elapsed().as_secs_f64();
            Ok((secs, trainer.accuracy(eval, settings.eval_batch)?))
        },
        progress,
    )
}

/// Report rows for a finished benchmark.
pub fn bench_rows(settings: &BenchSettings, ours: &ArmResult, direct: &ArmResult, batch_size: usize) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (arm, r) in [("ours", ours), ("direct", direct)] {
        let cfg = Config::new()
            .with("arm", arm)
            .with("T", settings.steps)
            .with("target_acc", settings.target_acc)
            .with("batch", batch_size);
        rows.push(match r.seconds_to_target {
            Some(s) => ReportRow::new("bench-speed", &cfg, "seconds_to_target", s, s),
            None => ReportRow::marker("bench-speed", &cfg, "seconds_to_target", "timeout", r.train_seconds),
        });
        rows.push(ReportRow::new("bench-speed", &cfg, "epochs", r.epochs as f64, r.train_seconds));
        rows.push(ReportRow::new(
            "bench-speed",
            &cfg,
            "epoch_seconds",
            r.mean_epoch_seconds(),
            r.train_seconds,
        ));
        rows.push(ReportRow::new(
            "bench-speed",
            &cfg,
            "final_acc",
            r.accuracies.last().copied().unwrap_or(0.0),
            r.train_seconds,
        ));
    }
    let cfg = Config::new().with("T", settings.steps).with("target_acc", settings.target_acc);
    rows.push(match (ours.seconds_to_target, direct.seconds_to_target) {
        (Some(a), Some(b)) => ReportRow::new("bench-speed", &cfg, "speedup", b / a, a + b),
        _ => ReportRow::marker("bench-speed", &cfg, "speedup", "timeout", ours.train_seconds + direct.train_seconds),
    });
    rows.push(ReportRow::new(
        "bench-speed",
        &cfg,
        "epoch_time_ratio",
        direct.mean_epoch_seconds() / ours.mean_epoch_seconds().max(1e-12),
        0.0,
    ));
    rows
}
