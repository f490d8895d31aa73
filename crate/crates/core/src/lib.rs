//! Noise-sensitivity analysis and sensitivity-aware finetuning for small
//! feed-forward networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, the convolution/matmul kernels and a
//!   small reverse-mode tape.
//! - [`model`]: sequential layer graphs, per-layer input/output capture and
//!   the `.saft` checkpoint format.
//! - [`noise`]: Gaussian/uniform weight perturbations and the noisy model view.
//! - [`sensitivity`]: per-layer standard deviation of clean-vs-noisy outputs,
//!   KL-divergence scoring, top-k selection and the brute-force oracle.
//! - [`trainer`]: noise-injection training honoring a freeze plan.
//! - [`datasets`]: synthetic blobs and IDX image ingestion.

pub mod datasets;
pub mod error;
pub mod model;
pub mod noise;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod trainer;

pub use datasets::{gen_blobs, load_idx, Dataset, LabeledBatch};
pub use error::{Error, Result};
pub use model::{LayerIoStore, LayerKind, LayerSpec, ModelGraph};
pub use noise::{Distribution, NoiseMode, NoiseSpec, NoisyModel, StreamKey};
pub use sensitivity::{
    accumulate_stats, brute_force_oracle, compute_stats, kl_sensitivity, rank_agreement,
    select_top_k, OracleMetric, SensitivityReport, StatsOptions,
};
pub use tensor::{Tape, Tensor, Variable};
pub use trainer::{
    evaluate, noise_injection_train, saft_pipeline, FreezePlan, Optimizer, TrainConfig,
    TrainResult,
};
