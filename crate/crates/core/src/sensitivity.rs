//! Per-layer noise sensitivity.
//!
//! The clean model is run once over a sample batch, storing every layer's
//! input and output. Each eligible layer's stored input is then pushed through
//! the same layer with noisy weights, and the layer's sensitivity is the
//! standard deviation of `noisy_output - clean_output`, pooled over every
//! element of the batch. One clean pass plus one single-layer pass per layer:
//! the cost of a single evaluation, versus one full evaluation per layer for
//! the brute-force perturb-and-evaluate oracle also provided here.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::LabeledBatch;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::noise::{NoiseSpec, NoisyModel};
use crate::tensor::Tensor;
use crate::trainer::{score_batches, FreezePlan};

/// Default histogram resolution for [`kl_sensitivity`].
pub const DEFAULT_KL_BINS: usize = 128;
const KL_SMOOTHING: f64 = 1e-10;

/// Single-pass mean/variance accumulator (Welford), mergeable across partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[f64]) {
        for &x in xs {
            self.push(x);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        let count = self.count + other.count;
        if count == 0 {
            return RunningStats::default();
        }
        let delta = other.mean - self.mean;
        let w = other.count as f64 / count as f64;
        RunningStats {
            count,
            mean: self.mean + delta * w,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * w,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance; zero for fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSensitivity {
    pub id: String,
    pub index: usize,
    pub kind: String,
    pub eligible: bool,
    pub std: f64,
    pub kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    layers: Vec<LayerSensitivity>,
    ranking: Vec<String>,
    selected: Vec<String>,
    k: Option<usize>,
    batch_size: usize,
}

impl SensitivityReport {
    /// Builds a report from per-layer values and ranks the eligible layers.
    pub fn from_layers(layers: Vec<LayerSensitivity>, batch_size: usize) -> Self {
        let mut eligible: Vec<&LayerSensitivity> = layers.iter().filter(|l| l.eligible).collect();
        // Descending std; ties go to the earlier layer.
        eligible.sort_by(|a, b| b.std.total_cmp(&a.std).then(a.index.cmp(&b.index)));
        let ranking = eligible.iter().map(|l| l.id.clone()).collect();
        Self {
            layers,
            ranking,
            selected: Vec::new(),
            k: None,
            batch_size,
        }
    }

    pub fn layers(&self) -> &[LayerSensitivity] {
        &self.layers
    }

    pub fn get(&self, id: &str) -> Option<&LayerSensitivity> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Eligible layer ids by decreasing std.
    pub fn ranking(&self) -> &[String] {
        &self.ranking
    }

    /// Selected layers, in ranking order. Empty until [`select_top_k`] runs.
    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// std per eligible layer.
    pub fn std_scores(&self) -> BTreeMap<String, f64> {
        self.layers
            .iter()
            .filter(|l| l.eligible)
            .map(|l| (l.id.clone(), l.std))
            .collect()
    }

    /// Attaches KL values; layers missing from `kl` keep `None`.
    pub fn set_kl(&mut self, kl: &BTreeMap<String, f64>) {
        for l in &mut self.layers {
            l.kl = kl.get(&l.id).copied();
        }
    }

    /// Writes `layer_id,layer_index,kind,std,kl,rank,selected`, one row per layer.
    ///
    /// `rank` is 1-based within the eligible ranking and blank for other layers;
    /// `kl` is blank when not computed.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["layer_id", "layer_index", "kind", "std", "kl", "rank", "selected"])?;
        for l in &self.layers {
            let rank = self
                .ranking
                .iter()
                .position(|id| *id == l.id)
                .map(|p| (p + 1).to_string())
                .unwrap_or_default();
            let selected = self.selected.contains(&l.id);
            w.write_record([
                l.id.clone(),
                l.index.to_string(),
                l.kind.clone(),
                l.std.to_string(),
                l.kl.map(|v| v.to_string()).unwrap_or_default(),
                rank,
                selected.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsOptions {
    /// Noise draws per layer; differences from all draws are pooled. Default 1.
    pub repeats: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self { repeats: 1 }
    }
}

fn check_pair(m: &ModelGraph, n: &NoisyModel<'_>) -> Result<()> {
    if !m.same_structure(n.model()) {
        return Err(Error::Contract(
            "clean model and noisy view have different layer structure".into(),
        ));
    }
    Ok(())
}

fn report_from_stats(m: &ModelGraph, stats: &[RunningStats], batch_size: usize) -> SensitivityReport {
    let layers = m
        .layers()
        .iter()
        .zip(stats)
        .enumerate()
        .map(|(index, (layer, s))| LayerSensitivity {
            id: layer.id().to_string(),
            index,
            kind: layer.spec().kind.name().to_string(),
            eligible: layer.spec().noise_eligible(),
            std: s.std(),
            kl: None,
        })
        .collect();
    SensitivityReport::from_layers(layers, batch_size)
}

/// Folds the clean-vs-noisy differences of one sample batch into `stats`.
fn accumulate_batch(
    m: &ModelGraph,
    n: &NoisyModel<'_>,
    x: &Tensor,
    steps: impl Iterator<Item = u64> + Clone,
    stats: &mut [RunningStats],
) -> Result<()> {
    let io = m.save_data(x)?;
    for (i, entry) in io.entries().iter().enumerate() {
        if !m.layers()[i].spec().noise_eligible() {
            continue;
        }
        for step in steps.clone() {
            let noisy = n.apply_layer(i, &entry.input, step)?;
            let diff = noisy.sub(&entry.output)?;
            stats[i].extend(diff.data());
        }
    }
    Ok(())
}

/// Std of per-layer output differences on the sample batch `x`.
///
/// Noise is drawn at the view's current step (and the following
/// `repeats - 1` steps). Parameter-free layers report 0.
pub fn compute_stats(
    m: &ModelGraph,
    n: &NoisyModel<'_>,
    x: &Tensor,
    opts: &StatsOptions,
) -> Result<SensitivityReport> {
    check_pair(m, n)?;
    if opts.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut stats = vec![RunningStats::new(); m.layers().len()];
    let first = n.step();
    accumulate_batch(m, n, x, first..first + opts.repeats as u64, &mut stats)?;
    Ok(report_from_stats(m, &stats, x.rows()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccumulateOptions {
    /// Draw fresh noise for every sample instead of reusing one draw for the whole stream.
    pub redraw_per_sample: bool,
}

/// Streaming version of [`compute_stats`] over samples processed one at a time.
///
/// With the default options all samples share one noise draw, so the result
/// matches [`compute_stats`] on the concatenated batch.
pub fn accumulate_stats<'s, I>(
    m: &ModelGraph,
    n: &NoisyModel<'_>,
    samples: I,
    opts: &AccumulateOptions,
) -> Result<SensitivityReport>
where
    I: IntoIterator<Item = &'s Tensor>,
{
    check_pair(m, n)?;
    let mut stats = vec![RunningStats::new(); m.layers().len()];
    let mut rows = 0;
    for (j, x) in samples.into_iter().enumerate() {
        let step = n.step() + if opts.redraw_per_sample { j as u64 } else { 0 };
        accumulate_batch(m, n, x, step..step + 1, &mut stats)?;
        rows += x.rows();
    }
    if rows == 0 {
        return Err(Error::invalid("accumulate_stats needs at least one sample"));
    }
    Ok(report_from_stats(m, &stats, rows))
}

/// KL(clean ‖ noisy) of each layer's output histogram.
///
/// Both outputs are binned over the clean output's `[min, max]`, noisy values
/// outside that range landing in the edge bins. Constant clean outputs give 0.
pub fn kl_sensitivity(
    m: &ModelGraph,
    n: &NoisyModel<'_>,
    x: &Tensor,
    bins: usize,
) -> Result<BTreeMap<String, f64>> {
    check_pair(m, n)?;
    if bins < 2 {
        return Err(Error::invalid(format!("KL needs at least 2 bins, got {bins}")));
    }
    let io = m.save_data(x)?;
    let mut out = BTreeMap::new();
    for (i, entry) in io.entries().iter().enumerate() {
        let kl = if m.layers()[i].spec().noise_eligible() {
            let noisy = n.apply_layer(i, &entry.input, n.step())?;
            histogram_kl(entry.output.data(), noisy.data(), bins)
        } else {
            0.0
        };
        out.insert(entry.id.clone(), kl);
    }
    Ok(out)
}

fn histogram_kl(clean: &[f64], noisy: &[f64], bins: usize) -> f64 {
    let lo = clean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |values: &[f64]| -> Vec<f64> {
        let mut counts = vec![0.0; bins];
        for &v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0.0 } else { b.clamp(0.0, (bins - 1) as f64) };
            counts[b as usize] += 1.0;
        }
        let total = values.len() as f64;
        let mut p: Vec<f64> = counts.iter().map(|c| c / total + KL_SMOOTHING).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    };
    let p = histogram(clean);
    let q = histogram(noisy);
    p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| if pi == qi { 0.0 } else { pi * (pi / qi).ln() })
        .sum::<f64>()
        .max(0.0)
}

/// Marks the first `k` ranked layers as selected and returns the matching freeze plan.
///
/// Every other layer, including parameter-free ones, is frozen.
pub fn select_top_k(report: &mut SensitivityReport, k: usize) -> Result<FreezePlan> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let take = k.min(report.ranking.len());
    report.selected = report.ranking[..take].to_vec();
    report.k = Some(k);
    let trainable: BTreeSet<String> = report.selected.iter().cloned().collect();
    let frozen = report
        .layers
        .iter()
        .map(|l| l.id.clone())
        .filter(|id| !trainable.contains(id))
        .collect();
    Ok(FreezePlan::from_parts(trainable, frozen))
}

/// Knee heuristic: cut the ranking at the largest relative drop between
/// consecutive std values. Returns `None` when fewer than two layers have
/// non-zero std.
pub fn suggest_k(report: &SensitivityReport) -> Option<usize> {
    let stds: Vec<f64> = report
        .ranking
        .iter()
        .filter_map(|id| report.get(id).map(|l| l.std))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, pair) in stds.windows(2).enumerate() {
        if pair[0] <= 0.0 {
            break;
        }
        let gap = (pair[0] - pair[1]) / pair[0];
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((i + 1, gap));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMetric {
    /// Drop = clean accuracy − noisy accuracy.
    Accuracy,
    /// Drop = noisy mean cross-entropy − clean mean cross-entropy.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub metric: OracleMetric,
    pub baseline: f64,
    /// Per eligible layer, in layer order.
    pub drops: Vec<(String, f64)>,
    /// Full evaluations of the eval set, excluding the clean baseline.
    pub noisy_evaluations: usize,
}

impl OracleReport {
    pub fn drop_scores(&self) -> BTreeMap<String, f64> {
        self.drops.iter().cloned().collect()
    }

    /// Layer with the largest drop; ties go to the earlier layer.
    pub fn top_layer(&self) -> Option<&str> {
        let mut best: Option<&(String, f64)> = None;
        for d in &self.drops {
            if best.is_none_or(|b| d.1 > b.1) {
                best = Some(d);
            }
        }
        best.map(|b| b.0.as_str())
    }
}

/// Perturbs one eligible layer at a time with `spec` (pinned to `spec.seed`)
/// and records how much the metric degrades on `eval_set`.
///
/// Layers are evaluated in parallel on the current rayon pool; results are
/// merged in layer order.
pub fn brute_force_oracle(
    m: &ModelGraph,
    spec: &NoiseSpec,
    eval_set: &LabeledBatch,
    metric: OracleMetric,
) -> Result<OracleReport> {
    spec.validate()?;
    let pick = |e: crate::trainer::EvalMetrics| match metric {
        OracleMetric::Accuracy => e.accuracy,
        OracleMetric::Loss => e.loss,
    };
    let baseline = pick(score_batches(eval_set, |x, _| m.forward(x))?);
    let eligible: Vec<usize> = (0..m.layers().len())
        .filter(|&i| m.layers()[i].spec().noise_eligible())
        .collect();
    let drops = eligible
        .par_iter()
        .map(|&i| {
            let view = NoisyModel::new(m, *spec)?.restricted_to(i);
            let noisy = pick(score_batches(eval_set, |x, b| view.forward_at(x, b))?);
            let drop = match metric {
                OracleMetric::Accuracy => baseline - noisy,
                OracleMetric::Loss => noisy - baseline,
            };
            Ok((m.layers()[i].id().to_string(), drop))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport {
        metric,
        baseline,
        drops,
        noisy_evaluations: eligible.len(),
    })
}

/// Ranks with ties sharing their average (1-based) rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho of paired samples; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "spearman needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least two items"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Spearman agreement between two keyed score maps over the same keys.
pub fn rank_agreement(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<Option<f64>> {
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(Error::invalid("rank agreement needs identical key sets"));
    }
    let xs: Vec<f64> = a.values().copied().collect();
    let ys: Vec<f64> = a.keys().map(|k| b[k]).collect();
    spearman(&xs, &ys)
}

/// Converts an ordered ranking (most sensitive first) into descending scores.
pub fn ranking_scores(ranking: &[String]) -> BTreeMap<String, f64> {
    let n = ranking.len();
    ranking
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), (n - i) as f64))
        .collect()
}
