//! Weight-noise models and the noisy model view.
//!
//! Noise is zero-mean Gaussian `N(0, σ)` or uniform `U[-r1, r1]`, applied
//! either multiplicatively, `w·(1 + ε)`, or additively, `w + ε`. Only
//! linear and convolution weights are perturbed.
//!
//! Every draw comes from a stream keyed by `(seed, layer id, parameter, step)`,
//! so layers are independent and any single forward pass can be replayed.

use rand::distr::{Distribution as _, Uniform};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{run_layer, ModelGraph};
use crate::rng::{fnv1a, mix64, stream_rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Gaussian { sigma: f64 },
    Uniform { r1: f64 },
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Gaussian { .. } => "gaussian",
            Distribution::Uniform { .. } => "uniform",
        }
    }

    /// σ for Gaussian, r1 for uniform.
    pub fn param(&self) -> f64 {
        match *self {
            Distribution::Gaussian { sigma } => sigma,
            Distribution::Uniform { r1 } => r1,
        }
    }

    pub fn with_param(&self, value: f64) -> Self {
        match self {
            Distribution::Gaussian { .. } => Distribution::Gaussian { sigma: value },
            Distribution::Uniform { .. } => Distribution::Uniform { r1: value },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Multiplicative,
    Additive,
}

impl NoiseMode {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseMode::Multiplicative => "multiplicative",
            NoiseMode::Additive => "additive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub distribution: Distribution,
    pub mode: NoiseMode,
    pub seed: u64,
    /// Also perturb the biases of eligible layers. Off by default.
    #[serde(default)]
    pub perturb_bias: bool,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, mode: NoiseMode, seed: u64) -> Self {
        Self {
            distribution: Distribution::Gaussian { sigma },
            mode,
            seed,
            perturb_bias: false,
        }
    }

    pub fn uniform(r1: f64, mode: NoiseMode, seed: u64) -> Self {
        Self {
            distribution: Distribution::Uniform { r1 },
            mode,
            seed,
            perturb_bias: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.distribution.param();
        if !p.is_finite() || p < 0.0 {
            return Err(Error::invalid(format!(
                "{} noise parameter must be finite and non-negative, got {p}",
                self.distribution.name()
            )));
        }
        Ok(())
    }

    /// Zero-parameter noise leaves every weight bitwise unchanged.
    pub fn is_zero(&self) -> bool {
        self.distribution.param() == 0.0
    }
}

/// Identifies one independent noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    layer: u64,
    param: u32,
    step: u64,
}

impl StreamKey {
    pub fn new(layer_id: &str, param: u32, step: u64) -> Self {
        Self {
            layer: fnv1a(layer_id.as_bytes()),
            param,
            step,
        }
    }

    fn stream(&self) -> u64 {
        mix64(mix64(self.layer ^ u64::from(self.param)) ^ self.step)
    }
}

/// Draws i.i.d. noise of the given shape; deterministic in `(spec.seed, key)`.
pub fn sample_noise(shape: &[usize], spec: &NoiseSpec, key: StreamKey) -> Result<Tensor> {
    spec.validate()?;
    let mut out = Tensor::zeros(shape);
    if spec.is_zero() {
        return Ok(out);
    }
    let mut rng = stream_rng(spec.seed, key.stream());
    match spec.distribution {
        Distribution::Gaussian { sigma } => {
            let dist = Normal::new(0.0, sigma).expect("validated sigma");
            out.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        Distribution::Uniform { r1 } => {
            let dist = Uniform::new_inclusive(-r1, r1).expect("validated r1");
            out.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Returns a perturbed copy of `w`; `w` itself is not modified.
pub fn perturb_weights(w: &Tensor, spec: &NoiseSpec, key: StreamKey) -> Result<Tensor> {
    if spec.is_zero() {
        spec.validate()?;
        return Ok(w.clone());
    }
    let eps = sample_noise(w.shape(), spec, key)?;
    let out = match spec.mode {
        NoiseMode::Multiplicative => w.zip_map(&eps, |w, e| w * (1.0 + e))?,
        NoiseMode::Additive => w.zip_map(&eps, |w, e| w + e)?,
    };
    Ok(out)
}

/// Noisy view over a clean model.
///
/// Every forward pass draws fresh weight noise for the eligible layers from
/// the current step, then advances the step. The clean weights are never
/// touched.
#[derive(Clone, Debug)]
pub struct NoisyModel<'a> {
    model: &'a ModelGraph,
    spec: NoiseSpec,
    step: u64,
    only_layer: Option<usize>,
}

pub fn wrap_noisy<'a>(model: &'a ModelGraph, spec: NoiseSpec) -> Result<NoisyModel<'a>> {
    NoisyModel::new(model, spec)
}

impl<'a> NoisyModel<'a> {
    pub fn new(model: &'a ModelGraph, spec: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            model,
            spec,
            step: 0,
            only_layer: None,
        })
    }

    /// Restricts noise to a single layer; all others run clean.
    pub fn restricted_to(mut self, index: usize) -> Self {
        self.only_layer = Some(index);
        self
    }

    pub fn model(&self) -> &'a ModelGraph {
        self.model
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn perturbs(&self, index: usize) -> bool {
        self.model.layers()[index].spec().noise_eligible()
            && self.only_layer.is_none_or(|only| only == index)
    }

    /// The parameters layer `index` uses at `step`.
    pub fn layer_params(&self, index: usize, step: u64) -> Result<Vec<Tensor>> {
        let layer = &self.model.layers()[index];
        if !self.perturbs(index) {
            return Ok(layer.param_values());
        }
        layer
            .params()
            .iter()
            .enumerate()
            .map(|(p, var)| {
                if p == 0 || self.spec.perturb_bias {
                    perturb_weights(var.value(), &self.spec, StreamKey::new(layer.id(), p as u32, step))
                } else {
                    Ok(var.value().clone())
                }
            })
            .collect()
    }

    /// Applies a single noisy layer to `x`.
    pub fn apply_layer(&self, index: usize, x: &Tensor, step: u64) -> Result<Tensor> {
        self.model.count_layer_rows(x.rows());
        self.run(index, x, step)
    }

    fn run(&self, index: usize, x: &Tensor, step: u64) -> Result<Tensor> {
        let params = self.layer_params(index, step)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        run_layer(self.model.layers()[index].spec(), x, &refs)
    }

    /// Forward pass with noise pinned to `step`.
    pub fn forward_at(&self, x: &Tensor, step: u64) -> Result<Tensor> {
        self.model.check_input(x)?;
        self.model.count_forward_rows(x.rows());
        let mut y = x.clone();
        for i in 0..self.model.layers().len() {
            y = self.run(i, &y, step)?;
        }
        Ok(y)
    }

    /// Forward pass with a fresh draw; advances the step counter.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_at(x, self.step)?;
        self.step += 1;
        Ok(y)
    }
}
