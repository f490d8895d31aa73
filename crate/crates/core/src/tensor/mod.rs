//! Dense row-major `f64` tensors and the numeric kernels used by the layers.
//!
//! Kernels here are plain functions over [`Tensor`]; the differentiable
//! versions live on [`Tape`], which calls back into these for its forward
//! values and uses the `*_backward_*` helpers for gradients.

mod autograd;

pub use autograd::{Gradients, NodeId, Tape, TapeCounters, Variable};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("non-empty rows")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, the batch size for activations.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies out rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.rows() {
            return Err(Error::dim(format!(
                "row range {start}..{end} invalid for shape {:?}",
                self.shape
            )));
        }
        let stride = self.len() / self.rows();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers rows by index along the leading dimension.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let stride = self.len() / self.rows();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::dim(format!("row {i} out of range for {:?}", self.shape)));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn as_matrix(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{name} must be 2-D, got {s:?}"))),
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `g [m×n] · bᵀ` where `b` is `[k×n]`; the lhs gradient of a matmul.
pub(crate) fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape[0], g.shape[1]);
    let k = b.shape[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, k],
        data: out,
    }
}

/// `aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`; the rhs gradient of a matmul.
pub(crate) fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = g.shape[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// Adds `bias [n]` to every row of `x [m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = as_matrix(x, "row bias target")?;
    if bias.shape() != [n] {
        return Err(Error::dim(format!(
            "row bias {:?} does not fit {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Adds `bias [C]` to every channel plane of `x [N×C×H×W]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = match x.shape() {
        [_, c, _, _] => *c,
        s => return Err(Error::dim(format!("channel bias target must be 4-D, got {s:?}"))),
    };
    if bias.shape() != [c] {
        return Err(Error::dim(format!(
            "channel bias {:?} does not fit {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let plane = x.shape[2] * x.shape[3];
    let mut out = x.clone();
    for (i, chunk) in out.data.chunks_mut(plane).enumerate() {
        let b = bias.data[i % c];
        for v in chunk {
            *v += b;
        }
    }
    Ok(out)
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, c, h, w) = match input {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::dim(format!("conv2d input must be N×C×H×W, got {s:?}"))),
        };
        let (f, kc, kh, kw) = match kernel {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => return Err(Error::dim(format!("conv2d kernel must be F×C×kh×kw, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {input:?}, kernel {kernel:?}"
            )));
        }
        let (oh, ow) = match (
            conv_out_size(h, kh, stride, padding),
            conv_out_size(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d kernel {kernel:?} (stride {stride}) does not fit input {input:?} with padding {padding}"
                )))
            }
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }

    /// Multiply-adds for one full pass of the kernel over the batch.
    pub(crate) fn macs(&self) -> u64 {
        (self.n * self.f * self.oh * self.ow * self.c * self.kh * self.kw) as u64
    }

    /// Input coordinate for an output position and kernel tap, if inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Visits every (output index, input index, kernel index) triple that contributes.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (c, h, w, kh, kw) = (self.c, self.h, self.w, self.kh, self.kw);
        for n in 0..self.n {
            for f in 0..self.f {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let out_idx = ((n * self.f + f) * self.oh + oy) * self.ow + ox;
                        for ch in 0..c {
                            for ky in 0..kh {
                                let Some(iy) = self.source(oy, ky, h) else { continue };
                                for kx in 0..kw {
                                    let Some(ix) = self.source(ox, kx, w) else { continue };
                                    let in_idx = ((n * c + ch) * h + iy) * w + ix;
                                    let k_idx = ((f * c + ch) * kh + ky) * kw + kx;
                                    visit(out_idx, in_idx, k_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input [N×C×H×W]` with `kernel [F×C×kh×kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    g.for_each_tap(|o, i, k| out[o] += input.data[i] * kernel.data[k]);
    Tensor::new(g.output_shape(), out)
}

pub(crate) fn conv2d_backward_input(g: &ConvGeometry, grad_out: &Tensor, kernel: &Tensor) -> Tensor {
    let mut grad = vec![0.0; g.n * g.c * g.h * g.w];
    g.for_each_tap(|o, i, k| grad[i] += grad_out.data[o] * kernel.data[k]);
    Tensor {
        shape: vec![g.n, g.c, g.h, g.w],
        data: grad,
    }
}

pub(crate) fn conv2d_backward_kernel(g: &ConvGeometry, grad_out: &Tensor, input: &Tensor) -> Tensor {
    let mut grad = vec![0.0; g.f * g.c * g.kh * g.kw];
    g.for_each_tap(|o, i, k| grad[k] += grad_out.data[o] * input.data[i]);
    Tensor {
        shape: vec![g.f, g.c, g.kh, g.kw],
        data: grad,
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Row-wise softmax of `logits [N×C]`, computed with the max-shift.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = as_matrix(logits, "softmax input")?;
    let mut out = logits.clone();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub(crate) fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = as_matrix(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}

/// Mean negative log-softmax likelihood of `labels` under `logits [N×C]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = check_labels(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.data.chunks(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / n as f64)
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let c = x.len() / x.rows();
    x.data
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
