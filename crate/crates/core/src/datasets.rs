//! Synthetic Gaussian blobs and IDX image files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() || inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::new(self.inputs.select_rows(indices)?, labels, self.num_classes)
    }

    /// Rows `[start, min(end, len))`.
    pub fn slice(&self, start: usize, end: usize) -> Result<LabeledBatch> {
        let end = end.min(self.len());
        LabeledBatch::new(
            self.inputs.slice_rows(start, end)?,
            self.labels[start..end].to_vec(),
            self.num_classes,
        )
    }

    /// Consecutive batches of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<LabeledBatch>> + '_ {
        (0..self.len())
            .step_by(size.max(1))
            .map(move |start| self.slice(start, start + size))
    }

    /// Reinterprets each sample with a new shape of the same size, e.g. `[16]` as `[1, 4, 4]`.
    pub fn reshape_samples(&self, sample_shape: &[usize]) -> Result<LabeledBatch> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(LabeledBatch {
            inputs: self.inputs.reshape(&shape)?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl Dataset {
    pub fn reshape_samples(&self, sample_shape: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            train: self.train.reshape_samples(sample_shape)?,
            test: self.test.reshape_samples(sample_shape)?,
        })
    }
}

/// Isotropic Gaussian clusters, one per class, split 80/20 into train/test.
///
/// Class centres are drawn uniformly from `[-1, 1]^dim`; each point is its
/// centre plus `spread · N(0, I)`. The split is stratified per class and the
/// train and test sets are shuffled.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("blobs need positive classes, points and dimension"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let n_train = per_class * 4 / 5;
    if n_train == 0 || n_train == per_class {
        return Err(Error::invalid("per_class too small for an 80/20 split"));
    }
    let mut rng = stream_rng(seed, 0);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, centre) in centres.iter().enumerate() {
        for i in 0..per_class {
            let point: Vec<f64> = centre
                .iter()
                .map(|c| c + { let z: f64 = StandardNormal.sample(&mut rng); spread * z })
                .collect();
            if i < n_train {
                train.push((point, label));
            } else {
                test.push((point, label));
            }
        }
    }
    let mut shuffle = stream_rng(seed, 1);
    train.shuffle(&mut shuffle);
    test.shuffle(&mut shuffle);

    let pack = |rows: Vec<(Vec<f64>, usize)>| -> Result<LabeledBatch> {
        let n = rows.len();
        let labels = rows.iter().map(|r| r.1).collect();
        let data = rows.into_iter().flat_map(|r| r.0).collect();
        LabeledBatch::new(Tensor::new(vec![n, dim], data)?, labels, num_classes)
    };
    Ok(Dataset {
        train: pack(train)?,
        test: pack(test)?,
    })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset, format!("truncated {what}")))
}

/// Parses in-memory IDX image (`0x00000803`) and label (`0x00000801`) files.
///
/// Pixels are scaled from `u8` to `[0, 1]`; images become `N×1×rows×cols`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledBatch> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;

    let magic = be_u32(labels, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let label_count = be_u32(labels, 4, "label header")? as usize;
    if label_count != count {
        return Err(Error::format(
            4,
            format!("label file holds {label_count} items, image file {count}"),
        ));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "empty IDX file"));
    }

    let pixels = count * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| Error::format(images.len(), format!("image data truncated, need {pixels} bytes")))?;
    if images.len() != 16 + pixels {
        return Err(Error::format(16 + pixels, "trailing bytes in image file"));
    }
    let label_bytes = labels
        .get(8..8 + count)
        .ok_or_else(|| Error::format(labels.len(), format!("label data truncated, need {count} bytes")))?;
    if labels.len() != 8 + count {
        return Err(Error::format(8 + count, "trailing bytes in label file"));
    }

    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledBatch::new(Tensor::new(vec![count, 1, rows, cols], data)?, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledBatch> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Serializes a batch of `N×1×H×W` images in `[0, 1]` back to IDX bytes.
pub fn encode_idx(batch: &LabeledBatch) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, 1, h, w] = *batch.inputs().shape() else {
        return Err(Error::invalid("IDX encoding needs N×1×H×W inputs"));
    };
    let mut images = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(batch.inputs().data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(batch.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(count: u32, label_count: u32) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, 28, 28] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        for i in 0..count as usize * 28 * 28 {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, label_count] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend((0..label_count).map(|i| (i % 10) as u8));
        (images, labels)
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(gen_blobs(3, 20, 4, 0.3, 5).unwrap(), gen_blobs(3, 20, 4, 0.3, 5).unwrap());
        assert_ne!(gen_blobs(3, 20, 4, 0.3, 5).unwrap(), gen_blobs(3, 20, 4, 0.3, 6).unwrap());
    }

    #[test]
    fn blobs_split_80_20() {
        let d = gen_blobs(4, 500, 16, 0.5, 1).unwrap();
        assert_eq!(d.train.len(), 1600);
        assert_eq!(d.test.len(), 400);
        assert_eq!(d.train.sample_shape(), &[16]);
        for c in 0..4 {
            assert_eq!(d.test.labels().iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(d.train.inputs().all_finite());
    }

    #[test]
    fn zero_spread_collapses_to_centres() {
        let d = gen_blobs(3, 10, 5, 0.0, 2).unwrap();
        let first: Vec<&[f64]> = (0..d.train.len())
            .filter(|&i| d.train.labels()[i] == 0)
            .map(|i| &d.train.inputs().data()[i * 5..i * 5 + 5])
            .collect();
        assert!(first.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn blobs_reject_bad_arguments() {
        assert!(gen_blobs(0, 10, 2, 0.1, 0).is_err());
        assert!(gen_blobs(2, 10, 2, -1.0, 0).is_err());
    }

    #[test]
    fn idx_well_formed() {
        let (images, labels) = idx_fixture(10, 10);
        let b = parse_idx(&images, &labels).unwrap();
        assert_eq!(b.inputs().shape(), &[10, 1, 28, 28]);
        assert_eq!(b.len(), 10);
        assert_eq!(b.labels()[3], 3);
        assert!(b.inputs().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // First image holds bytes 0..784 mod 256, i.e. three full ramps plus 0..16.
        let raw: u64 = (0..784u64).map(|i| i % 256).sum();
        let sum: f64 = b.inputs().data()[..784].iter().sum();
        assert!((sum * 255.0 - raw as f64).abs() < 1e-6);
    }

    #[test]
    fn idx_count_mismatch() {
        let (images, labels) = idx_fixture(10, 9);
        assert!(matches!(parse_idx(&images, &labels), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let (mut images, labels) = idx_fixture(2, 2);
        let truncated = &images[..images.len() - 1];
        assert!(matches!(parse_idx(truncated, &labels), Err(Error::Format { .. })));
        images[3] = 0x01;
        assert!(matches!(parse_idx(&images, &labels), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&images[..6], &labels), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_encode_parse_round_trip() {
        let (images, labels) = idx_fixture(3, 3);
        let b = parse_idx(&images, &labels).unwrap();
        let (i2, l2) = encode_idx(&b).unwrap();
        assert_eq!(i2, images);
        assert_eq!(l2, labels);
    }

    #[test]
    fn chunks_cover_batch() {
        let d = gen_blobs(2, 10, 3, 0.1, 0).unwrap();
        let sizes: Vec<usize> = d.train.chunks(7).map(|c| c.unwrap().len()).collect();
        assert_eq!(sizes, vec![7, 7, 2]);
        let img = d.train.reshape_samples(&[1, 1, 3]).unwrap();
        assert_eq!(img.inputs().shape(), &[16, 1, 1, 3]);
    }
}
