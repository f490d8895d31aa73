//! Noise-injection training with per-layer freezing.
//!
//! Each step perturbs the weights of every eligible layer (frozen or not) for
//! the forward pass, back-propagates through the noisy forward, and applies
//! the resulting gradients to the clean weights of trainable layers only.
//! Frozen layers enter the tape as constant leaves: activations still flow
//! back through them, but no parameter gradient is ever computed for them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::model::{record_layer, ModelGraph};
use crate::noise::{NoiseSpec, NoisyModel};
use crate::rng::stream_rng;
use crate::sensitivity::{compute_stats, select_top_k, SensitivityReport, StatsOptions};
use crate::tensor::{argmax_rows, softmax_cross_entropy, Tape, TapeCounters, Tensor};

/// Batch size used when scoring a model.
pub const EVAL_BATCH_SIZE: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    trainable: BTreeSet<String>,
    frozen: BTreeSet<String>,
}

impl FreezePlan {
    /// Trains exactly `trainable`, freezes every other layer of `model`.
    pub fn new<I, S>(model: &ModelGraph, trainable: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let trainable: BTreeSet<String> = trainable.into_iter().map(Into::into).collect();
        let eligible: BTreeSet<String> = model.eligible_ids().into_iter().collect();
        if let Some(bad) = trainable.iter().find(|id| !eligible.contains(*id)) {
            return Err(Error::invalid(format!(
                "layer `{bad}` is not a trainable (linear/conv2d) layer of this model"
            )));
        }
        let frozen = model
            .layers()
            .iter()
            .map(|l| l.id().to_string())
            .filter(|id| !trainable.contains(id))
            .collect();
        Ok(Self { trainable, frozen })
    }

    pub(crate) fn from_parts(trainable: BTreeSet<String>, frozen: BTreeSet<String>) -> Self {
        debug_assert!(trainable.is_disjoint(&frozen));
        Self { trainable, frozen }
    }

    pub fn all_trainable(model: &ModelGraph) -> Self {
        Self::new(model, model.eligible_ids()).expect("eligible ids are valid")
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, id: &str) -> bool {
        self.trainable.contains(id)
    }

    /// Share of `model`'s parameters held by frozen layers.
    pub fn frozen_param_fraction(&self, model: &ModelGraph) -> f64 {
        let total = model.param_count();
        if total == 0 {
            return 0.0;
        }
        let frozen: usize = model
            .layers()
            .iter()
            .filter(|l| self.frozen.contains(l.id()))
            .map(|l| l.param_count())
            .sum();
        frozen as f64 / total as f64
    }

    fn check_against(&self, model: &ModelGraph) -> Result<()> {
        let ids: BTreeSet<String> = model.layers().iter().map(|l| l.id().to_string()).collect();
        let union: BTreeSet<String> = self.trainable.union(&self.frozen).cloned().collect();
        if union != ids || !self.trainable.is_disjoint(&self.frozen) {
            return Err(Error::invalid("freeze plan does not partition this model's layers"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    SgdMomentum {
        beta: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Seed for the fixed noise draws used when scoring under noise.
    #[serde(default)]
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::Sgd,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Optimizer::SgdMomentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!("momentum beta must be in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkSummary {
    pub forward_macs: u64,
    pub backward_macs: u64,
    pub param_grad_kernels: u64,
}

impl From<TapeCounters> for WorkSummary {
    fn from(c: TapeCounters) -> Self {
        Self {
            forward_macs: c.forward_macs,
            backward_macs: c.backward_macs,
            param_grad_kernels: c.param_grad_kernels,
        }
    }
}

impl WorkSummary {
    pub fn total_macs(&self) -> u64 {
        self.forward_macs + self.backward_macs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub final_accuracy_clean: f64,
    pub final_accuracy_noisy: f64,
    pub per_epoch_loss: Vec<f64>,
    pub wall_time_ms: u64,
    pub epoch_wall_time_ms: Vec<u64>,
    pub grad_update_count: BTreeMap<String, u64>,
    pub work: WorkSummary,
}

impl TrainResult {
    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &TrainResult) -> bool {
        self.final_accuracy_clean.to_bits() == other.final_accuracy_clean.to_bits()
            && self.final_accuracy_noisy.to_bits() == other.final_accuracy_noisy.to_bits()
            && self
                .per_epoch_loss
                .iter()
                .map(|v| v.to_bits())
                .eq(other.per_epoch_loss.iter().map(|v| v.to_bits()))
            && self.grad_update_count == other.grad_update_count
            && self.work == other.work
    }
}

/// Output of a single optimisation step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Gradients w.r.t. the noisy weights, per trainable layer, `[weight, bias]`.
    pub grads: BTreeMap<String, Vec<Tensor>>,
    pub counters: TapeCounters,
}

/// Stateful step runner; owns the noise step counter and optimiser state.
#[derive(Debug)]
pub struct Trainer {
    plan: FreezePlan,
    noise: Option<NoiseSpec>,
    learning_rate: f64,
    optimizer: Optimizer,
    step: u64,
    velocity: HashMap<(usize, usize), Tensor>,
    grad_update_count: BTreeMap<String, u64>,
    counters: TapeCounters,
}

impl Trainer {
    pub fn new(
        model: &ModelGraph,
        noise: Option<NoiseSpec>,
        plan: FreezePlan,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        plan.check_against(model)?;
        if plan.trainable.is_empty() {
            return Err(Error::invalid("freeze plan leaves no layer to train"));
        }
        if let Some(spec) = &noise {
            spec.validate()?;
        }
        let grad_update_count = model.layers().iter().map(|l| (l.id().to_string(), 0)).collect();
        Ok(Self {
            plan,
            noise,
            learning_rate: cfg.learning_rate,
            optimizer: cfg.optimizer,
            step: 0,
            velocity: HashMap::new(),
            grad_update_count,
            counters: TapeCounters::default(),
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> TapeCounters {
        self.counters
    }

    pub fn grad_update_count(&self) -> &BTreeMap<String, u64> {
        &self.grad_update_count
    }

    /// Parameters each layer uses for the forward pass of the current step.
    fn forward_params(&self, model: &ModelGraph) -> Result<Vec<Vec<Tensor>>> {
        match &self.noise {
            Some(spec) if !spec.is_zero() => {
                let view = NoisyModel::new(model, *spec)?;
                (0..model.layers().len())
                    .map(|i| view.layer_params(i, self.step))
                    .collect()
            }
            _ => Ok(model.layers().iter().map(|l| l.param_values()).collect()),
        }
    }

    pub fn step(&mut self, model: &mut ModelGraph, batch: &LabeledBatch) -> Result<StepOutput> {
        model.check_input(batch.inputs())?;
        let params = self.forward_params(model)?;

        let mut tape = Tape::new();
        let mut h = tape.leaf(batch.inputs().clone(), false);
        let mut leaves = Vec::with_capacity(model.layers().len());
        for (layer, values) in model.layers().iter().zip(params) {
            let trainable = self.plan.is_trainable(layer.id());
            let ids: Vec<_> = values.into_iter().map(|v| tape.leaf(v, trainable)).collect();
            h = record_layer(&mut tape, layer.spec(), h, &ids)?;
            leaves.push(ids);
        }
        let loss_node = tape.softmax_cross_entropy(h, batch.labels())?;
        let loss = tape.value(loss_node).data()[0];
        let grads = tape.backward(loss_node)?;

        let lr = self.learning_rate;
        let mut out = BTreeMap::new();
        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            let id = layer.id().to_string();
            if !self.plan.is_trainable(&id) {
                continue;
            }
            let mut layer_grads = Vec::new();
            for (pi, var) in layer.params_mut().iter_mut().enumerate() {
                let g = grads
                    .get(leaves[li][pi])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(var.value().shape()));
                let direction = match self.optimizer {
                    Optimizer::Sgd => g.clone(),
                    Optimizer::SgdMomentum { beta } => {
                        let v = self
                            .velocity
                            .entry((li, pi))
                            .or_insert_with(|| Tensor::zeros(g.shape()));
                        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                            *vv = beta * *vv + gv;
                        }
                        v.clone()
                    }
                };
                for (w, d) in var.value_mut().data_mut().iter_mut().zip(direction.data()) {
                    *w -= lr * d;
                }
                layer_grads.push(g);
            }
            *self.grad_update_count.get_mut(&id).expect("layer registered") += 1;
            out.insert(id, layer_grads);
        }

        self.step += 1;
        self.counters += tape.counters();
        Ok(StepOutput {
            loss,
            grads: out,
            counters: tape.counters(),
        })
    }
}

/// Accuracy and mean loss of a scoring pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Scores `data` in fixed-size batches; `forward(x, batch_index)` produces logits.
pub(crate) fn score_batches(
    data: &LabeledBatch,
    mut forward: impl FnMut(&Tensor, u64) -> Result<Tensor>,
) -> Result<EvalMetrics> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for (b, chunk) in data.chunks(EVAL_BATCH_SIZE).enumerate() {
        let chunk = chunk?;
        let logits = forward(chunk.inputs(), b as u64)?;
        loss_sum += softmax_cross_entropy(&logits, chunk.labels())? * chunk.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk.labels())
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

/// Like [`evaluate`], also reporting mean cross-entropy.
pub fn evaluate_metrics(
    model: &ModelGraph,
    data: &LabeledBatch,
    spec: Option<&NoiseSpec>,
    eval_seed: u64,
) -> Result<EvalMetrics> {
    match spec {
        None => score_batches(data, |x, _| model.forward(x)),
        Some(spec) => {
            let view = NoisyModel::new(model, spec.with_seed(eval_seed))?;
            score_batches(data, |x, b| view.forward_at(x, b))
        }
    }
}

/// Fraction of `data` classified correctly.
///
/// Under noise, each evaluation batch gets its own draw from the stream
/// seeded by `eval_seed`, so the score is reproducible.
pub fn evaluate(
    model: &ModelGraph,
    data: &LabeledBatch,
    spec: Option<&NoiseSpec>,
    eval_seed: u64,
) -> Result<f64> {
    Ok(evaluate_metrics(model, data, spec, eval_seed)?.accuracy)
}

fn train_loop(
    model: &mut ModelGraph,
    train_noise: Option<&NoiseSpec>,
    eval_noise: Option<&NoiseSpec>,
    plan: &FreezePlan,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(model, train_noise.copied(), plan.clone(), cfg)?;
    let start = Instant::now();
    let mut per_epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_wall_time_ms = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.train.select(idx)?;
            loss_sum += trainer.step(model, &batch)?.loss;
            batches += 1;
        }
        per_epoch_loss.push(loss_sum / batches as f64);
        epoch_wall_time_ms.push(epoch_start.elapsed().as_millis() as u64);
    }
    let wall_time_ms = start.elapsed().as_millis() as u64;

    let final_accuracy_clean = evaluate(model, &data.test, None, cfg.eval_seed)?;
    let final_accuracy_noisy = match eval_noise {
        Some(spec) => evaluate(model, &data.test, Some(spec), cfg.eval_seed)?,
        None => final_accuracy_clean,
    };
    Ok(TrainResult {
        final_accuracy_clean,
        final_accuracy_noisy,
        per_epoch_loss,
        wall_time_ms,
        epoch_wall_time_ms,
        grad_update_count: trainer.grad_update_count().clone(),
        work: trainer.counters().into(),
    })
}

/// Noise-injection training of the layers `plan` leaves trainable.
pub fn noise_injection_train(
    model: &mut ModelGraph,
    spec: &NoiseSpec,
    plan: &FreezePlan,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<TrainResult> {
    train_loop(model, Some(spec), Some(spec), plan, cfg, data)
}

/// Noise-free training of every layer; `eval_noise` only affects the reported noisy accuracy.
pub fn train_clean(
    model: &mut ModelGraph,
    cfg: &TrainConfig,
    data: &Dataset,
    eval_noise: Option<&NoiseSpec>,
) -> Result<TrainResult> {
    let plan = FreezePlan::all_trainable(model);
    train_loop(model, None, eval_noise, &plan, cfg, data)
}

#[derive(Clone, Debug)]
pub struct SaftOutcome {
    pub report: SensitivityReport,
    pub plan: FreezePlan,
    pub result: TrainResult,
    pub sensitivity_time_ms: u64,
}

/// Sensitivity analysis on one training batch, top-k selection, then
/// noise-injection training of the selected layers.
pub fn saft_pipeline(
    model: &mut ModelGraph,
    spec: &NoiseSpec,
    k: usize,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<SaftOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let sample = data.train.slice(0, cfg.batch_size)?;
    let mut report = {
        let view = NoisyModel::new(model, *spec)?;
        compute_stats(model, &view, sample.inputs(), &StatsOptions::default())?
    };
    let plan = select_top_k(&mut report, k)?;
    let sensitivity_time_ms = start.elapsed().as_millis() as u64;
    let result = noise_injection_train(model, spec, &plan, cfg, data)?;
    Ok(SaftOutcome {
        report,
        plan,
        result,
        sensitivity_time_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_blobs;
    use crate::model::LayerSpec;
    use crate::noise::NoiseMode;

    fn mlp(seed: u64) -> ModelGraph {
        ModelGraph::build(
            vec![
                LayerSpec::linear("fc1", 4, 8),
                LayerSpec::relu("r1"),
                LayerSpec::linear("fc2", 8, 8),
                LayerSpec::relu("r2"),
                LayerSpec::linear("fc3", 8, 3),
            ],
            &[4],
            seed,
        )
        .unwrap()
    }

    fn data() -> Dataset {
        gen_blobs(3, 50, 4, 0.2, 3).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plan_rejects_ineligible_layers() {
        let m = mlp(0);
        assert!(FreezePlan::new(&m, ["r1"]).is_err());
        let plan = FreezePlan::new(&m, ["fc2"]).unwrap();
        assert_eq!(plan.frozen().len(), 4);
        assert!(plan.frozen().contains("r1"));
    }

    #[test]
    fn all_frozen_plan_rejected() {
        let mut m = mlp(0);
        let plan = FreezePlan::new(&m, Vec::<String>::new()).unwrap();
        let spec = NoiseSpec::gaussian(0.05, NoiseMode::Multiplicative, 1);
        assert!(matches!(
            noise_injection_train(&mut m, &spec, &plan, &cfg(), &data()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig {
            optimizer: Optimizer::SgdMomentum { beta: 1.5 },
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sgd_update_equals_minus_lr_times_noisy_gradient() {
        let mut m = mlp(1);
        let before = m.clone();
        let d = data();
        let spec = NoiseSpec::gaussian(0.1, NoiseMode::Multiplicative, 7);
        let plan = FreezePlan::new(&m, ["fc1", "fc3"]).unwrap();
        let c = cfg();
        let mut trainer = Trainer::new(&m, Some(spec), plan, &c).unwrap();
        let batch = d.train.slice(0, 16).unwrap();
        let out = trainer.step(&mut m, &batch).unwrap();
        for (li, layer) in m.layers().iter().enumerate() {
            let old = &before.layers()[li];
            match out.grads.get(layer.id()) {
                Some(grads) => {
                    for (pi, g) in grads.iter().enumerate() {
                        let expected: Vec<f64> = old.params()[pi]
                            .value()
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(w, g)| w - c.learning_rate * g)
                            .collect();
                        assert_eq!(layer.params()[pi].value().data(), &expected[..]);
                    }
                }
                None => assert_eq!(layer.params(), old.params()),
            }
        }
        // Noisy gradient differs from the clean one.
        let mut clean_trainer = Trainer::new(&before, None, FreezePlan::new(&before, ["fc1", "fc3"]).unwrap(), &c).unwrap();
        let clean = clean_trainer.step(&mut before.clone(), &batch).unwrap();
        assert_ne!(clean.grads["fc1"][0], out.grads["fc1"][0]);
    }

    #[test]
    fn frozen_layers_cost_no_parameter_gradients() {
        let m = mlp(2);
        let d = data();
        let batch = d.train.slice(0, 16).unwrap();
        let spec = NoiseSpec::gaussian(0.05, NoiseMode::Multiplicative, 1);
        let mut full = Trainer::new(&m, Some(spec), FreezePlan::all_trainable(&m), &cfg()).unwrap();
        let full_out = full.step(&mut m.clone(), &batch).unwrap();
        let mut saft = Trainer::new(&m, Some(spec), FreezePlan::new(&m, ["fc3"]).unwrap(), &cfg()).unwrap();
        let saft_out = saft.step(&mut m.clone(), &batch).unwrap();
        assert_eq!(full_out.counters.param_grad_kernels, 6);
        assert_eq!(saft_out.counters.param_grad_kernels, 2);
        assert!(saft_out.counters.backward_macs < full_out.counters.backward_macs);
        assert_eq!(saft_out.counters.forward_macs, full_out.counters.forward_macs);
        assert_eq!(saft_out.loss.to_bits(), full_out.loss.to_bits());
    }

    #[test]
    fn zero_noise_training_lowers_loss() {
        let mut m = mlp(3);
        let d = data();
        let c = TrainConfig { epochs: 3, ..cfg() };
        let r = train_clean(&mut m, &c, &d, None).unwrap();
        assert!(r.per_epoch_loss[2] < r.per_epoch_loss[0], "{:?}", r.per_epoch_loss);
        assert!(r.final_accuracy_clean > 0.9);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let d = data();
        let spec = NoiseSpec::uniform(0.1, NoiseMode::Multiplicative, 4);
        let run = || {
            let mut m = mlp(4);
            let plan = FreezePlan::all_trainable(&m);
            let r = noise_injection_train(&mut m, &spec, &plan, &cfg(), &d).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1, m2);
        assert!(r1.same_outcome(&r2));
    }

    #[test]
    fn momentum_optimizer_trains() {
        let mut m = mlp(5);
        let c = TrainConfig {
            optimizer: Optimizer::SgdMomentum { beta: 0.9 },
            learning_rate: 0.02,
            epochs: 3,
            ..cfg()
        };
        let r = train_clean(&mut m, &c, &data(), None).unwrap();
        assert!(r.per_epoch_loss[2] < r.per_epoch_loss[0]);
    }

    #[test]
    fn evaluate_is_reproducible_and_zero_noise_is_clean() {
        let m = mlp(6);
        let d = data();
        let clean = evaluate(&m, &d.test, None, 0).unwrap();
        let zero = NoiseSpec::gaussian(0.0, NoiseMode::Additive, 0);
        assert_eq!(evaluate(&m, &d.test, Some(&zero), 3).unwrap(), clean);
        let spec = NoiseSpec::gaussian(0.5, NoiseMode::Multiplicative, 0);
        assert_eq!(
            evaluate(&m, &d.test, Some(&spec), 9).unwrap(),
            evaluate(&m, &d.test, Some(&spec), 9).unwrap()
        );
    }

    #[test]
    fn pipeline_with_all_layers_matches_full_training() {
        let d = data();
        let spec = NoiseSpec::gaussian(0.1, NoiseMode::Multiplicative, 2);
        let mut a = mlp(7);
        let mut b = mlp(7);
        let plan = FreezePlan::all_trainable(&a);
        let full = noise_injection_train(&mut a, &spec, &plan, &cfg(), &d).unwrap();
        let saft = saft_pipeline(&mut b, &spec, 3, &cfg(), &d).unwrap();
        assert_eq!(saft.plan.trainable().len(), 3);
        assert!(full.same_outcome(&saft.result));
        assert_eq!(a, b);
    }
}
