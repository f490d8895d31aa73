//! Sequential layer graphs.
//!
//! A [`ModelGraph`] is a chain of named layers with a per-sample input shape
//! fixed at build time. Activations always carry a leading batch dimension.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::{Distribution as _, Uniform};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream_rng};
use crate::tensor::{self, NodeId, Tape, Tensor, Variable};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SAFT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Shapes of the (weight, bias) parameters, empty for parameter-free kinds.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![vec![in_features, out_features], vec![out_features]],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            ],
            LayerKind::Relu | LayerKind::Flatten => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self { id: id.into(), kind }
    }

    pub fn linear(id: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self::new(
            id,
            LayerKind::Linear {
                in_features,
                out_features,
            },
        )
    }

    /// Square-kernel convolution.
    pub fn conv2d(
        id: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::new(
            id,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            },
        )
    }

    pub fn relu(id: impl Into<String>) -> Self {
        Self::new(id, LayerKind::Relu)
    }

    pub fn flatten(id: impl Into<String>) -> Self {
        Self::new(id, LayerKind::Flatten)
    }

    /// Only matrix-multiplication layers receive weight noise.
    pub fn noise_eligible(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Variable>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn params(&self) -> &[Variable] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Variable] {
        &mut self.params
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value().len()).sum()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value().clone()).collect()
    }
}

/// Work counters in units of sample rows.
#[derive(Debug, Default)]
struct Counters {
    forward_rows: AtomicU64,
    layer_rows: AtomicU64,
}

/// Snapshot of [`ModelGraph`] instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCount {
    /// Rows pushed through the whole model (forward passes and `save_data`).
    pub forward_rows: u64,
    /// Rows pushed through a single layer outside a whole-model pass.
    pub layer_rows: u64,
}

#[derive(Debug)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    counters: Counters,
}

impl Clone for ModelGraph {
    fn clone(&self) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            counters: Counters::default(),
        }
    }
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

fn layer_output_shape(spec: &LayerSpec, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match spec.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            if input != [in_features] {
                return Err(format!(
                    "linear expects per-sample shape [{in_features}], got {input:?}"
                ));
            }
            Ok(vec![out_features])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let [c, h, w] = input else {
                return Err(format!("conv2d expects per-sample shape C×H×W, got {input:?}"));
            };
            if *c != in_channels {
                return Err(format!(
                    "conv2d expects {in_channels} input channels, got {c}"
                ));
            }
            match (
                tensor::conv_out_size(*h, kernel_h, stride, padding),
                tensor::conv_out_size(*w, kernel_w, stride, padding),
            ) {
                (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                _ => Err(format!(
                    "kernel {kernel_h}×{kernel_w} (stride {stride}, padding {padding}) does not fit {h}×{w}"
                )),
            }
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

/// Applies one layer with explicit parameters, `[weight, bias]` for eligible kinds.
pub(crate) fn run_layer(spec: &LayerSpec, x: &Tensor, params: &[&Tensor]) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Linear { .. } => {
            let y = tensor::matmul(x, params[0])?;
            tensor::add_row_bias(&y, params[1])
        }
        LayerKind::Conv2d {
            stride, padding, ..
        } => {
            let y = tensor::conv2d(x, params[0], stride, padding)?;
            tensor::add_channel_bias(&y, params[1])
        }
        LayerKind::Relu => Ok(tensor::relu(x)),
        LayerKind::Flatten => {
            let n = x.rows();
            x.reshape(&[n, x.len() / n])
        }
    }
}

/// Tape counterpart of [`run_layer`].
pub(crate) fn record_layer(
    tape: &mut Tape,
    spec: &LayerSpec,
    x: NodeId,
    params: &[NodeId],
) -> Result<NodeId> {
    match spec.kind {
        LayerKind::Linear { .. } => {
            let y = tape.matmul(x, params[0])?;
            tape.add_row_bias(y, params[1])
        }
        LayerKind::Conv2d {
            stride, padding, ..
        } => {
            let y = tape.conv2d(x, params[0], stride, padding)?;
            tape.add_channel_bias(y, params[1])
        }
        LayerKind::Relu => Ok(tape.relu(x)),
        LayerKind::Flatten => {
            let v = tape.value(x);
            let n = v.rows();
            let flat = v.len() / n;
            tape.reshape(x, &[n, flat])
        }
    }
}

impl ModelGraph {
    /// Builds a model for samples of shape `input_shape` (batch dimension excluded).
    ///
    /// Weights are He-uniform, biases zero; each layer draws from its own
    /// stream keyed by `init_seed` and the layer id.
    pub fn build(specs: Vec<LayerSpec>, input_shape: &[usize], init_seed: u64) -> Result<Self> {
        let mut model = Self::from_specs(specs, input_shape)?;
        for layer in &mut model.layers {
            let fan_in = layer.spec.kind.fan_in();
            if fan_in == 0 {
                continue;
            }
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = stream_rng(init_seed, fnv1a(layer.spec.id.as_bytes()));
            let weight = layer.params[0].value_mut();
            for w in weight.data_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(model)
    }

    /// Validates the layer chain and allocates zeroed parameters.
    fn from_specs(specs: Vec<LayerSpec>, input_shape: &[usize]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid(format!("invalid input shape {input_shape:?}")));
        }
        let mut seen = std::collections::HashSet::new();
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.id.is_empty() || !seen.insert(spec.id.clone()) {
                return Err(Error::Build {
                    layer: spec.id.clone(),
                    message: "layer ids must be non-empty and unique".into(),
                });
            }
            let output_shape = layer_output_shape(&spec, &shape).map_err(|message| Error::Build {
                layer: spec.id.clone(),
                message,
            })?;
            let params = spec
                .kind
                .param_shapes()
                .iter()
                .map(|s| Variable::new(Tensor::zeros(s), true))
                .collect();
            layers.push(Layer {
                spec,
                params,
                input_shape: std::mem::replace(&mut shape, output_shape.clone()),
                output_shape,
            });
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            counters: Counters::default(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map(|l| l.output_shape.as_slice()).unwrap_or(&[])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Replaces the parameters of layer `index`; shapes must match.
    pub fn set_params(&mut self, index: usize, values: Vec<Tensor>) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("no layer at index {index}")))?;
        if values.len() != layer.params.len()
            || values.iter().zip(&layer.params).any(|(v, p)| v.shape() != p.value().shape())
        {
            return Err(Error::dim(format!(
                "parameters for layer `{}` must have shapes {:?}",
                layer.spec.id,
                layer.params.iter().map(|p| p.value().shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        for (p, v) in layer.params.iter_mut().zip(values) {
            *p.value_mut() = v;
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.id == id)
    }

    pub fn eligible_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.spec.noise_eligible())
            .map(|l| l.spec.id.clone())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// True when both models have the same layer chain (parameters may differ).
    pub fn same_structure(&self, other: &ModelGraph) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.spec == b.spec)
    }

    pub fn work(&self) -> WorkCount {
        WorkCount {
            forward_rows: self.counters.forward_rows.load(Ordering::Relaxed),
            layer_rows: self.counters.layer_rows.load(Ordering::Relaxed),
        }
    }

    pub fn reset_work(&self) {
        self.counters.forward_rows.store(0, Ordering::Relaxed);
        self.counters.layer_rows.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_layer_rows(&self, rows: usize) {
        self.counters
            .layer_rows
            .fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub(crate) fn count_forward_rows(&self, rows: usize) {
        self.counters
            .forward_rows
            .fetch_add(rows as u64, Ordering::Relaxed);
    }

    /// Checks that `x` is a batch of samples with the declared input shape.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::invalid(format!(
                "input of shape {:?} does not match [N, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Applies layer `index` with its clean parameters.
    pub fn apply_layer(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[index];
        let params: Vec<&Tensor> = layer.params.iter().map(Variable::value).collect();
        run_layer(&layer.spec, x, &params)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.count_forward_rows(x.rows());
        let mut y = x.clone();
        for i in 0..self.layers.len() {
            y = self.apply_layer(i, &y)?;
        }
        Ok(y)
    }

    /// Runs `x` through the model, keeping every layer's input and output.
    pub fn save_data(&self, x: &Tensor) -> Result<LayerIoStore> {
        self.check_input(x)?;
        self.count_forward_rows(x.rows());
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = self.apply_layer(i, &y)?;
            entries.push(LayerIo {
                id: layer.spec.id.clone(),
                input: y,
                output: out.clone(),
            });
            y = out;
        }
        Ok(LayerIoStore { entries })
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let id = layer.spec.id.as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            let dims: Vec<usize> = match layer.spec.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    out.push(0);
                    vec![in_features, out_features]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => {
                    out.push(1);
                    vec![in_channels, out_channels, kernel_h, kernel_w, stride, padding]
                }
                LayerKind::Relu => {
                    out.push(2);
                    vec![]
                }
                LayerKind::Flatten => {
                    out.push(3);
                    vec![]
                }
            };
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for layer in &self.layers {
            for p in &layer.params {
                out.extend_from_slice(&(p.value().len() as u64).to_le_bytes());
                for v in p.value().data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "missing SAFT magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut specs = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "layer id is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let kind = match r.u8()? {
                0 => LayerKind::Linear {
                    in_features: r.usize()?,
                    out_features: r.usize()?,
                },
                1 => LayerKind::Conv2d {
                    in_channels: r.usize()?,
                    out_channels: r.usize()?,
                    kernel_h: r.usize()?,
                    kernel_w: r.usize()?,
                    stride: r.usize()?,
                    padding: r.usize()?,
                },
                2 => LayerKind::Relu,
                3 => LayerKind::Flatten,
                tag => return Err(Error::format(at, format!("unknown layer kind tag {tag}"))),
            };
            specs.push(LayerSpec { id, kind });
        }
        let at = r.pos;
        let mut model = Self::from_specs(specs, &input_shape).map_err(|e| Error::format(at, e.to_string()))?;
        for layer in &mut model.layers {
            for p in &mut layer.params {
                let at = r.pos;
                let n = r.usize()?;
                if n != p.value().len() {
                    return Err(Error::format(
                        at,
                        format!(
                            "layer `{}` expects {} parameters, blob has {n}",
                            layer.spec.id,
                            p.value().len()
                        ),
                    ));
                }
                for v in p.value_mut().data_mut() {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after parameters"));
        }
        Ok(model)
    }

    pub fn write_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.save_checkpoint())?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::load_checkpoint(&std::fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(at, "dimension overflows usize"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIo {
    pub id: String,
    pub input: Tensor,
    pub output: Tensor,
}

/// Per-layer inputs and outputs captured by [`ModelGraph::save_data`], in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerIoStore {
    entries: Vec<LayerIo>,
}

impl LayerIoStore {
    pub fn entries(&self) -> &[LayerIo] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&LayerIo> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn input(&self, id: &str) -> Option<&Tensor> {
        self.get(id).map(|e| &e.input)
    }

    pub fn output(&self, id: &str) -> Option<&Tensor> {
        self.get(id).map(|e| &e.output)
    }
}
