//! Forward execution in the three run modes.
//!
//! * Stage 1: one step, every spiking layer sees `H = W·S + noise`.
//! * Stage 2: the stage-1 computation replicated over `T` steps with fresh
//!   noise per step and no carried state; outputs are averaged.
//! * Stage 3: LIF state is carried across steps and the noise is split into a
//!   renormalized `λ·V(t−1)` term plus residual noise.
//!
//! Noise is drawn from keyed substreams addressed by (layer, step, sample),
//! so a stage-2 run with `T = 1` reproduces a stage-1 run bit for bit and a
//! stage-3 run with infinite `α` reproduces stage 2.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{LayerSpec, NetworkSpec, ParamSet, Readout};
use crate::autodiff::{heaviside, Graph, NodeId};
use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::exec;
use crate::kernels;
use crate::rng::{Purpose, SeedTree, StreamKey};
use crate::spiking::{self, fill_noise, LIFState, NoiseSpec, RenormParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Single = 1,
    Replicated = 2,
    Stateful = 3,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Single),
            2 => Ok(Stage::Replicated),
            3 => Ok(Stage::Stateful),
            other => Err(format!("stage must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMode {
    pub stage: Stage,
    pub steps: usize,
    pub renorm: RenormParams,
}

impl Default for RunMode {
    fn default() -> Self {
        Self::stage1()
    }
}

impl RunMode {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Single,
            steps: 1,
            renorm: RenormParams::default(),
        }
    }

    pub fn stage2(steps: usize) -> Self {
        Self {
            stage: Stage::Replicated,
            steps,
            renorm: RenormParams::default(),
        }
    }

    pub fn stage3(steps: usize, renorm: RenormParams) -> Self {
        Self {
            stage: Stage::Stateful,
            steps,
            renorm,
        }
    }

    /// Checks the mode on its own and against the training noise.
    pub fn validate(&self, base_noise: &NoiseSpec) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("simulation steps T must be >= 1".into()));
        }
        if self.stage == Stage::Single && self.steps != 1 {
            return Err(Error::Config(format!("stage 1 runs exactly one step, got T = {}", self.steps)));
        }
        if self.stage == Stage::Stateful {
            spiking::residual_noise_spec(base_noise, &self.renorm)?;
        }
        Ok(())
    }
}

/// Averaged network output for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub averaged_output: Tensor,
    pub predictions: Vec<usize>,
    /// `[T, batch, classes]`, kept only on request.
    pub per_step_outputs: Option<Tensor>,
}

/// Addresses the noise substreams of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NoiseKeys {
    tree: SeedTree,
    purpose: Purpose,
    round: u64,
    sample_offset: u64,
}

impl NoiseKeys {
    /// Evaluation noise; `sample_offset` is the global index of the batch's
    /// first sample so results do not depend on batching.
    pub fn eval(seed: u64, sample_offset: u64) -> Self {
        Self {
            tree: SeedTree::new(seed),
            purpose: Purpose::EvalNoise,
            round: 0,
            sample_offset,
        }
    }

    /// Training noise for one optimizer iteration.
    pub fn train(seed: u64, iteration: u64) -> Self {
        Self {
            tree: SeedTree::new(seed),
            purpose: Purpose::TrainNoise,
            round: iteration,
            sample_offset: 0,
        }
    }

    pub fn with_offset(mut self, sample_offset: u64) -> Self {
        self.sample_offset = sample_offset;
        self
    }

    /// Draws a `[batch, ...]` noise tensor; each sample row has its own stream.
    pub fn draw(&self, spec: &NoiseSpec, layer: usize, step: usize, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if spec.is_none() {
            return t;
        }
        let row = t.row_len();
        exec::for_each_chunk_mut(t.data_mut(), row, |b, chunk| {
            let mut rng = self.tree.stream(StreamKey {
                purpose: self.purpose,
                round: self.round,
                layer: layer as u32,
                step: step as u32,
                sample: self.sample_offset + b as u64,
            });
            fill_noise(spec, chunk, &mut rng);
        });
        t
    }
}

/// Parameter indices of each weighted layer.
fn param_slots(spec: &NetworkSpec) -> Vec<Option<(usize, Option<usize>)>> {
    let mut next = 0;
    spec.layers
        .iter()
        .map(|l| {
            if l.is_weighted() {
                let w = next;
                next += 1;
                let b = spec.bias.then(|| {
                    next += 1;
                    next - 1
                });
                Some((w, b))
            } else {
                None
            }
        })
        .collect()
}

fn check_input(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor) -> Result<()> {
    params.check(spec)?;
    if batch.shape().len() != spec.input_shape.len() + 1 || batch.shape()[1..] != spec.input_shape[..] {
        return Err(Error::dim(
            "forward",
            format!(
                "batch shape {:?} does not match network input {:?}",
                batch.shape(),
                spec.input_shape
            ),
        ));
    }
    Ok(())
}

/// Output of a spiking layer for one step.
struct Fired {
    spikes: Tensor,
    /// Pre-activation, only materialized for the readout layer.
    potential: Option<Tensor>,
}

/// One pass through the layer stack; `neuron(k, I, is_last)` turns the
/// weighted input of the `k`-th spiking layer into spikes.
fn run_layers(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Tensor,
    mut neuron: impl FnMut(usize, Tensor, bool) -> Result<Fired>,
) -> Result<Tensor> {
    let slots = param_slots(spec);
    let n_spiking = spec.spiking_layers();
    let mut x = input.clone();
    let mut k = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv3 { .. } => {
                let (w, b) = slots[i].expect("weighted layer");
                kernels::conv3_forward(&x, &params.tensors[w], b.map(|b| &params.tensors[b]))?
            }
            LayerSpec::Fc { .. } => {
                let (w, b) = slots[i].expect("weighted layer");
                kernels::fc_forward(&x, &params.tensors[w], b.map(|b| &params.tensors[b]))?
            }
            LayerSpec::AvgPool2 => kernels::avgpool2_forward(&x)?,
            LayerSpec::Flatten => {
                let n = x.batch();
                let w = x.row_len();
                x.reshape(&[n, w])?
            }
            LayerSpec::Spike => {
                let last = k + 1 == n_spiking;
                let fired = neuron(k, x, last)?;
                k += 1;
                if last && spec.readout == Readout::Potentials {
                    fired.potential.expect("readout potential")
                } else {
                    fired.spikes
                }
            }
        };
    }
    Ok(x)
}

fn noisy_step(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, keys: &NoiseKeys, step: usize) -> Result<Tensor> {
    let v_th = spec.lif.v_th;
    run_layers(spec, params, batch, |k, weighted, last| {
        let h = if spec.noise.is_none() {
            weighted
        } else {
            let noise = keys.draw(&spec.noise, k, step, weighted.shape());
            weighted.zip_map(&noise, "preactivation", |a, b| a + b)?
        };
        let spikes = heaviside(&h, v_th);
        Ok(Fired {
            spikes,
            potential: last.then_some(h),
        })
    })
}

fn finish(sum: Tensor, steps: usize, kept: Option<Vec<Tensor>>) -> Result<EvalResult> {
    let averaged = if steps == 1 {
        sum
    } else {
        let inv = steps as f32;
        sum.map(|v| v / inv)
    };
    let per_step = match kept {
        Some(outs) => {
            let mut shape = vec![outs.len()];
            shape.extend_from_slice(outs[0].shape());
            Some(Tensor::new(
                &shape,
                outs.into_iter().flat_map(|t| t.into_data()).collect(),
            )?)
        }
        None => None,
    };
    Ok(EvalResult {
        predictions: averaged.argmax_rows(),
        averaged_output: averaged,
        per_step_outputs: per_step,
    })
}

/// Averaged output over the first `k` steps of a `[T, batch, classes]`
/// per-step tensor. Matches a `k`-step run bit for bit, since the dynamics at
/// step `t` never depend on the total step count.
pub fn prefix_average(per_step: &Tensor, k: usize) -> Result<Tensor> {
    let steps = per_step.shape()[0];
    if k == 0 || k > steps {
        return Err(Error::Config(format!("prefix length {k} outside 1..={steps}")));
    }
    let inner = &per_step.shape()[1..];
    let mut sum = per_step.rows(0, 1).reshape(inner)?;
    for t in 1..k {
        sum.add_assign(&per_step.rows(t, t + 1).reshape(inner)?)?;
    }
    Ok(finish(sum, k, None)?.averaged_output)
}

/// Receives `(spiking layer, step, injection)` during a stage-3 pass.
pub type InjectionProbe<'a> = &'a mut dyn FnMut(usize, usize, &Tensor);

/// Diagnostics hooks for a forward pass.
#[derive(Default)]
pub struct EvalOptions<'a> {
    /// Keep every step's output in [`EvalResult::per_step_outputs`].
    pub keep_steps: bool,
    /// Called with `(spiking layer, step, injection)` in stage 3.
    pub injection_probe: Option<InjectionProbe<'a>>,
}

/// A stage-1 pass recorded for training.
pub struct TrainGraph {
    pub graph: Graph,
    pub output: NodeId,
    /// Parameter leaves in [`ParamSet`] order.
    pub params: Vec<NodeId>,
    /// `(name, node)` of every weighted layer's output, for diagnostics.
    pub layer_outputs: Vec<(String, NodeId)>,
}

/// Builds the stage-1 graph with parameters as differentiable leaves.
pub fn stage1_graph(params: &ParamSet, spec: &NetworkSpec, batch: &Tensor, keys: &NoiseKeys) -> Result<TrainGraph> {
    check_input(spec, params, batch)?;
    let mut g = Graph::new();
    let pnodes: Vec<NodeId> = params.tensors.iter().map(|t| g.parameter(t.clone())).collect();
    let slots = param_slots(spec);
    let surrogate = spec.surrogate;
    let mut x = g.constant(batch.clone());
    let mut layer_outputs = Vec::new();
    let mut k = 0;
    let n_spiking = spec.spiking_layers();
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv3 { .. } => {
                let (w, b) = slots[i].expect("weighted layer");
                let y = g.conv3(x, pnodes[w], b.map(|b| pnodes[b]))?;
                layer_outputs.push((format!("layer{i} (conv)"), y));
                y
            }
            LayerSpec::Fc { .. } => {
                let (w, b) = slots[i].expect("weighted layer");
                let y = g.fc(x, pnodes[w], b.map(|b| pnodes[b]))?;
                layer_outputs.push((format!("layer{i} (fc)"), y));
                y
            }
            LayerSpec::AvgPool2 => g.avgpool2(x)?,
            LayerSpec::Flatten => {
                let v = g.value(x);
                let shape = [v.batch(), v.row_len()];
                g.reshape(x, &shape)?
            }
            LayerSpec::Spike => {
                let last = k + 1 == n_spiking;
                let noise = (!spec.noise.is_none()).then(|| keys.draw(&spec.noise, k, 0, g.value(x).shape()));
                let h = spiking::single_step_preactivation_node(&mut g, x, noise.as_ref())?;
                k += 1;
                if last && spec.readout == Readout::Potentials {
                    h
                } else {
                    g.heaviside(h, surrogate)
                }
            }
        };
    }
    Ok(TrainGraph {
        graph: g,
        output: x,
        params: pnodes,
        layer_outputs,
    })
}

/// Stage-1 forward. With `record_graph`, also returns the autodiff graph.
pub fn forward_stage1(
    params: &ParamSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    keys: &NoiseKeys,
    record_graph: bool,
) -> Result<(EvalResult, Option<TrainGraph>)> {
    if record_graph {
        let tg = stage1_graph(params, spec, batch, keys)?;
        let out = tg.graph.value(tg.output).clone();
        return Ok((finish(out, 1, None)?, Some(tg)));
    }
    check_input(spec, params, batch)?;
    let out = noisy_step(spec, params, batch, keys, 0)?;
    Ok((finish(out, 1, None)?, None))
}

/// Stage-2 forward: `steps` independent noisy replicas, averaged.
pub fn forward_stage2(
    params: &ParamSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    steps: usize,
    keys: &NoiseKeys,
    opts: EvalOptions<'_>,
) -> Result<EvalResult> {
    check_input(spec, params, batch)?;
    if steps == 0 {
        return Err(Error::Config("simulation steps T must be >= 1".into()));
    }
    let mut sum: Option<Tensor> = None;
    let mut kept = opts.keep_steps.then(Vec::new);
    for t in 0..steps {
        let out = noisy_step(spec, params, batch, keys, t)?;
        match &mut sum {
            Some(s) => s.add_assign(&out)?,
            None => sum = Some(out.clone()),
        }
        if let Some(k) = &mut kept {
            k.push(out);
        }
    }
    finish(sum.expect("steps >= 1"), steps, kept)
}

/// Stage-3 forward: LIF state carried across `steps`, with the injection
/// `renormalize(λ·V(t−1)) + residual noise` in every spiking layer.
pub fn forward_stage3(
    params: &ParamSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    steps: usize,
    renorm: &RenormParams,
    keys: &NoiseKeys,
    mut opts: EvalOptions<'_>,
) -> Result<EvalResult> {
    check_input(spec, params, batch)?;
    if steps == 0 {
        return Err(Error::Config("simulation steps T must be >= 1".into()));
    }
    let residual = spiking::residual_noise_spec(&spec.noise, renorm)?;
    let lif = spec.lif;
    let mut states: Vec<Option<LIFState>> = vec![None; spec.spiking_layers()];
    let mut sum: Option<Tensor> = None;
    let mut kept = opts.keep_steps.then(Vec::new);
    for t in 0..steps {
        let out = run_layers(spec, params, batch, |k, weighted, last| {
            let state = states[k].get_or_insert_with(|| LIFState::resting(weighted.shape()));
            let leak = state.v.map(|v| lif.lambda * v);
            let mut injection = spiking::renormalize_potential(&leak, renorm);
            if !residual.is_none() {
                let noise = keys.draw(&residual, k, t, weighted.shape());
                injection.add_assign(&noise)?;
            }
            if let Some(probe) = opts.injection_probe.as_mut() {
                probe(k, t, &injection);
            }
            let (spikes, next) = spiking::lif_step(state, &lif, &weighted, &injection)?;
            *state = next;
            let potential = if last {
                Some(injection.zip_map(&weighted, "lif", |a, b| a + b)?)
            } else {
                None
            };
            Ok(Fired { spikes, potential })
        })?;
        match &mut sum {
            Some(s) => s.add_assign(&out)?,
            None => sum = Some(out.clone()),
        }
        if let Some(k) = &mut kept {
            k.push(out);
        }
    }
    finish(sum.expect("steps >= 1"), steps, kept)
}

/// Dispatches on `mode`.
pub fn evaluate(
    params: &ParamSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    mode: &RunMode,
    keys: &NoiseKeys,
    opts: EvalOptions<'_>,
) -> Result<EvalResult> {
    mode.validate(&spec.noise)?;
    match mode.stage {
        Stage::Single => forward_stage1(params, spec, batch, keys, false).map(|(r, _)| r),
        Stage::Replicated => forward_stage2(params, spec, batch, mode.steps, keys, opts),
        Stage::Stateful => forward_stage3(params, spec, batch, mode.steps, &mode.renorm, keys, opts),
    }
}

/// Accuracy over a labelled image set, evaluated in batches of `batch_size`.
/// Noise streams are keyed by global sample index under `seed`.
pub fn accuracy(
    params: &ParamSet,
    spec: &NetworkSpec,
    images: &Tensor,
    labels: &[u8],
    mode: &RunMode,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if images.batch() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} images but {} labels", images.batch(), labels.len()),
        ));
    }
    mode.validate(&spec.noise)?;
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + batch_size).min(labels.len());
        let batch = images.rows(start, end);
        let keys = NoiseKeys::eval(seed, start as u64);
        let r = evaluate(params, spec, &batch, mode, &keys, EvalOptions::default())?;
        correct += r
            .predictions
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, &l)| **p == l as usize)
            .count();
        start = end;
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Switches a trained checkpoint to another run mode. Parameters are
/// untouched; infeasible modes (e.g. `α < 2`) are rejected.
pub fn convert(ckpt: &Checkpoint, target: RunMode) -> Result<Checkpoint> {
    target.validate(&ckpt.spec.noise)?;
    let mut out = ckpt.clone();
    out.mode = target;
    Ok(out)
}
