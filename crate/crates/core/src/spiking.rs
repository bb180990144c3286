//! Leaky integrate-and-fire dynamics, training-time noise, and the
//! membrane-potential renormalization used when temporal state is restored.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LIFParams {
    /// Per-step decay of the stored potential.
    pub lambda: f32,
    pub v_th: f32,
    pub v_reset: f32,
}

impl Default for LIFParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LIFParams {
    pub fn new(lambda: f32, v_th: f32, v_reset: f32) -> Result<Self> {
        let p = Self {
            lambda,
            v_th,
            v_reset,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.v_reset < self.v_th) || !self.v_th.is_finite() {
            return Err(Error::Config(format!(
                "v_reset ({}) must be below v_th ({})",
                self.v_reset, self.v_th
            )));
        }
        Ok(())
    }
}

/// Membrane potentials of one layer after the most recent step.
#[derive(Debug, Clone, PartialEq)]
pub struct LIFState {
    pub v: Tensor,
}

impl LIFState {
    pub fn resting(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
        }
    }
}

/// One LIF update. `injection` replaces the leak term `λ·V(t−1)`:
/// `H = injection + weighted_input`, spikes where `H > v_th`, and the stored
/// potential becomes `H` without a spike or `v_reset` after one.
pub fn lif_step(
    state: &LIFState,
    params: &LIFParams,
    weighted_input: &Tensor,
    injection: &Tensor,
) -> Result<(Tensor, LIFState)> {
    weighted_input.expect_same_shape(injection, "lif_step")?;
    state.v.expect_same_shape(weighted_input, "lif_step")?;
    let n = weighted_input.len();
    let mut spikes = vec![0.0f32; n];
    let mut v = vec![0.0f32; n];
    for i in 0..n {
        let h = injection.data()[i] + weighted_input.data()[i];
        if h > params.v_th {
            spikes[i] = 1.0;
            v[i] = params.v_reset;
        } else {
            v[i] = h;
        }
    }
    let shape = weighted_input.shape();
    Ok((
        Tensor::new(shape, spikes)?,
        LIFState {
            v: Tensor::new(shape, v)?,
        },
    ))
}

/// Plain leaky step: the injection is `λ·V(t−1)`.
pub fn lif_step_leaky(state: &LIFState, params: &LIFParams, weighted_input: &Tensor) -> Result<(Tensor, LIFState)> {
    let injection = state.v.map(|v| params.lambda * v);
    lif_step(state, params, weighted_input, &injection)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    None,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::None => "none",
        })
    }
}

impl FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "uniform" => Ok(NoiseFamily::Uniform),
            "none" => Ok(NoiseFamily::None),
            other => Err(Error::Config(format!("unknown noise family '{other}'"))),
        }
    }
}

/// Additive per-layer noise on the pre-activation.
///
/// Gaussian noise has standard deviation `half_range / 2` and, with `clip`,
/// is clamped to `[mean − half_range, mean + half_range]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub mean: f32,
    pub half_range: f32,
    pub clip: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            mean: 0.5,
            half_range: 0.5,
            clip: true,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            family: NoiseFamily::None,
            mean: 0.0,
            half_range: 0.0,
            clip: true,
        }
    }

    /// Noise spanning `[lo, hi]`.
    pub fn from_range(family: NoiseFamily, lo: f32, hi: f32) -> Result<Self> {
        if family == NoiseFamily::None {
            return Ok(Self::none());
        }
        if !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("noise range [{lo}, {hi}] is empty or not finite")));
        }
        Ok(Self {
            family,
            mean: 0.5 * (lo + hi),
            half_range: 0.5 * (hi - lo),
            clip: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_range >= 0.0) || !self.mean.is_finite() || !self.half_range.is_finite() {
            return Err(Error::Config(format!(
                "noise half range must be finite and >= 0, got {}",
                self.half_range
            )));
        }
        Ok(())
    }

    pub fn lo(&self) -> f32 {
        self.mean - self.half_range
    }

    pub fn hi(&self) -> f32 {
        self.mean + self.half_range
    }

    pub fn is_none(&self) -> bool {
        self.family == NoiseFamily::None
    }
}

/// Fills `out` with independent draws from `spec`.
pub fn fill_noise<R: Rng + ?Sized>(spec: &NoiseSpec, out: &mut [f32], rng: &mut R) {
    match spec.family {
        NoiseFamily::None => out.fill(0.0),
        _ if spec.half_range == 0.0 => out.fill(spec.mean),
        NoiseFamily::Gaussian => {
            let normal = Normal::new(spec.mean, spec.half_range / 2.0).expect("validated spread");
            let (lo, hi) = (spec.lo(), spec.hi());
            for v in out.iter_mut() {
                let x = normal.sample(rng);
                *v = if spec.clip { x.clamp(lo, hi) } else { x };
            }
        }
        NoiseFamily::Uniform => {
            let (lo, hi) = (spec.lo(), spec.hi());
            for v in out.iter_mut() {
                *v = rng.random_range(lo..=hi);
            }
        }
    }
}

/// A fresh noise tensor; every call consumes new draws from `rng`.
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    fill_noise(spec, t.data_mut(), rng);
    t
}

/// `weighted_input + noise`, the single-step pre-activation.
pub fn single_step_preactivation<R: Rng + ?Sized>(
    weighted_input: &Tensor,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Tensor {
    if spec.is_none() {
        return weighted_input.clone();
    }
    let noise = sample_noise(spec, weighted_input.shape(), rng);
    weighted_input
        .zip_map(&noise, "preactivation", |a, b| a + b)
        .expect("same shape")
}

/// Graph form of [`single_step_preactivation`] with a pre-drawn noise
/// tensor; the noise is a constant and receives no gradient.
pub fn single_step_preactivation_node(g: &mut Graph, weighted_input: NodeId, noise: Option<&Tensor>) -> Result<NodeId> {
    match noise {
        Some(n) => g.add_const(weighted_input, n),
        None => Ok(weighted_input),
    }
}

/// Scale of the renormalized potential term and its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenormParams {
    /// `f32::INFINITY` removes the potential term altogether.
    pub alpha: f32,
    pub beta: f32,
    pub sigma_eps: f32,
}

impl Default for RenormParams {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 0.5,
            sigma_eps: 1e-8,
        }
    }
}

impl RenormParams {
    pub fn new(alpha: f32, beta: f32) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 2.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 2 or inf, got {}",
                self.alpha
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite, got {}", self.beta)));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::Config(format!("sigma_eps must be > 0, got {}", self.sigma_eps)));
        }
        Ok(())
    }

    pub fn alpha_is_infinite(&self) -> bool {
        self.alpha == f32::INFINITY
    }
}

/// Standardizes `A = λ·V(t−1)` over every element and rescales it into
/// `[β − 1/α, β + 1/α]` with mean `β`.
///
/// Degenerate inputs (zero spread, or zero max after standardizing) map to
/// the constant `β`; infinite `α` maps to zero.
pub fn renormalize_potential(a_term: &Tensor, p: &RenormParams) -> Tensor {
    if p.alpha_is_infinite() {
        return Tensor::zeros(a_term.shape());
    }
    let n = a_term.len() as f64;
    let mu = a_term.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = a_term
        .data()
        .iter()
        .map(|&x| {
            let d = x as f64 - mu;
            d * d
        })
        .sum::<f64>()
        / n;
    let sigma = var.sqrt();
    let beta = p.beta as f64;
    if sigma < p.sigma_eps as f64 {
        return Tensor::full(a_term.shape(), p.beta);
    }
    let max_abs = a_term
        .data()
        .iter()
        .map(|&x| ((x as f64 - mu) / sigma).abs())
        .fold(0.0f64, f64::max);
    if max_abs < p.sigma_eps as f64 {
        return Tensor::full(a_term.shape(), p.beta);
    }
    let scale = 1.0 / (p.alpha as f64 * max_abs);
    a_term.map(|x| (((x as f64 - mu) / sigma) * scale + beta) as f32)
}

/// Residual noise left once the renormalized potential takes over part of
/// the training noise: mean shifts by `−β`, half range shrinks by `1/α`.
pub fn residual_noise_spec(base: &NoiseSpec, p: &RenormParams) -> Result<NoiseSpec> {
    p.validate()?;
    if p.alpha_is_infinite() {
        return Ok(*base);
    }
    let half_range = base.half_range - 1.0 / p.alpha;
    if half_range < 0.0 {
        return Err(Error::Config(format!(
            "alpha = {} leaves a negative residual noise range ({} - 1/alpha); need alpha >= {}",
            p.alpha,
            base.half_range,
            if base.half_range > 0.0 { 1.0 / base.half_range } else { f32::INFINITY }
        )));
    }
    Ok(NoiseSpec {
        family: base.family,
        mean: base.mean - p.beta,
        half_range,
        clip: base.clip,
    })
}
