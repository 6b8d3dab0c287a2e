//! Toy block-wise local distillation.
//!
//! Every layer of a small random parent transformer gets a set of candidate
//! replacement blocks (attention kept or dropped, FFN narrowed). Each
//! candidate is trained in isolation to reproduce its parent block's output
//! on Gaussian calibration activations and scored by held-out MSE. Only FFN
//! weights train; kept attention is copied from the parent verbatim.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_cost::{block_costs, BlockVariantSpec, CostError, CostModel, CostVector, ParentArch, Precision};
use crate::linalg::{dot, Matrix};
use crate::seed;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("non-finite input activations")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("layer {layer}, variant {spec}: {source}")]
    Variant {
        layer: usize,
        spec: String,
        #[source]
        source: Box<LibraryError>,
    },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Smooth FFN nonlinearity with a closed-form derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// RMS normalization with a learned per-channel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsNorm {
    pub scale: Vec<f64>,
    pub eps: f64,
}

impl RmsNorm {
    pub fn ones(d: usize) -> Self {
        Self { scale: vec![1.0; d], eps: 1e-6 }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + self.eps).sqrt();
        x.iter().zip(&self.scale).map(|(v, g)| v * inv * g).collect()
    }

    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let n = self.apply(x.row(r));
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&n);
        }
        out
    }
}

/// Two-matrix FFN: `f(z) = act(z · w1) · w2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnWeights {
    /// d_model × hidden
    pub w1: Matrix,
    /// hidden × d_model
    pub w2: Matrix,
}

impl FfnWeights {
    pub fn hidden(&self) -> usize {
        self.w1.cols
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows
    }

    pub fn random(d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s1 = 1.0 / (d_model as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::from_fn(d_model, hidden, |_, _| rng.sample::<f64, _>(StandardNormal) * s1);
        let w2 = Matrix::from_fn(hidden, d_model, |_, _| rng.sample::<f64, _>(StandardNormal) * s2);
        Self { w1, w2 }
    }

    pub fn check_shape(&self) -> Result<(), LibraryError> {
        if self.w1.cols != self.w2.rows || self.w1.rows != self.w2.cols {
            return Err(LibraryError::Shape(format!(
                "w1 {}x{} incompatible with w2 {}x{}",
                self.w1.rows, self.w1.cols, self.w2.rows, self.w2.cols
            )));
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64], act: Activation) -> Vec<f64> {
        let a = self.w1.left_mul(z);
        let s: Vec<f64> = a.into_iter().map(|v| act.apply(v)).collect();
        self.w2.left_mul(&s)
    }

    /// Keeps the listed hidden units (columns of `w1`, rows of `w2`).
    pub fn select_hidden(&self, units: &[usize]) -> Self {
        Self { w1: self.w1.select_cols(units), w2: self.w2.select_rows(units) }
    }

    /// Per-unit importance `|w1[:, j]| * |w2[j, :]|`.
    pub fn unit_importance(&self) -> Vec<f64> {
        (0..self.hidden())
            .map(|j| {
                let c: f64 = (0..self.w1.rows).map(|r| self.w1.get(r, j).powi(2)).sum();
                let r: f64 = self.w2.row(j).iter().map(|v| v * v).sum();
                (c * r).sqrt()
            })
            .collect()
    }
}

/// Causal grouped-query self-attention over a short sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// d_model × d_model
    pub wq: Matrix,
    /// d_model × kv_dim
    pub wk: Matrix,
    /// d_model × kv_dim
    pub wv: Matrix,
    /// d_model × d_model
    pub wo: Matrix,
}

impl AttentionWeights {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let seq = x.rows;
        let q: Vec<Vec<f64>> = (0..seq).map(|t| self.wq.left_mul(x.row(t))).collect();
        let k: Vec<Vec<f64>> = (0..seq).map(|t| self.wk.left_mul(x.row(t))).collect();
        let v: Vec<Vec<f64>> = (0..seq).map(|t| self.wv.left_mul(x.row(t))).collect();
        let group = self.n_heads / self.n_kv_heads;
        let hd = self.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(seq, self.wo.cols);
        for t in 0..seq {
            let mut heads = vec![0.0; self.n_heads * hd];
            for h in 0..self.n_heads {
                let g = h / group;
                let qh = &q[t][h * hd..(h + 1) * hd];
                let scores: Vec<f64> =
                    (0..=t).map(|s| dot(qh, &k[s][g * hd..(g + 1) * hd]) * scale).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, w) in e.iter().enumerate() {
                    let p = w / z;
                    for i in 0..hd {
                        heads[h * hd + i] += p * v[s][g * hd + i];
                    }
                }
            }
            let o = self.wo.left_mul(&heads);
            out.data[t * out.cols..(t + 1) * out.cols].copy_from_slice(&o);
        }
        out
    }
}

/// One layer of the parent model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentBlock {
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
    pub norm: RmsNorm,
    pub activation: Activation,
}

impl ParentBlock {
    pub fn random(arch: &ParentArch, activation: Activation, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let d = arch.d_model;
        let kv = arch.kv_dim();
        let s = 1.0 / (d as f64).sqrt();
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal) * s);
        let attention = AttentionWeights {
            n_heads: arch.n_heads,
            n_kv_heads: arch.n_kv_heads,
            head_dim: arch.head_dim,
            wq: m(d, d),
            wk: m(d, kv),
            wv: m(d, kv),
            wo: m(d, d),
        };
        let ffn = FfnWeights::random(d, arch.d_ffn, &mut rng);
        Self { attention, ffn, norm: RmsNorm::ones(d), activation }
    }

    pub fn zeros(arch: &ParentArch, activation: Activation) -> Self {
        let d = arch.d_model;
        let kv = arch.kv_dim();
        Self {
            attention: AttentionWeights {
                n_heads: arch.n_heads,
                n_kv_heads: arch.n_kv_heads,
                head_dim: arch.head_dim,
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, kv),
                wv: Matrix::zeros(d, kv),
                wo: Matrix::zeros(d, d),
            },
            ffn: FfnWeights { w1: Matrix::zeros(d, arch.d_ffn), w2: Matrix::zeros(arch.d_ffn, d) },
            norm: RmsNorm::ones(d),
            activation,
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm.scale.len()
    }

    /// Residual stream after the attention sublayer (or `x` when skipped).
    fn after_attention(&self, x: &Matrix, with_attention: bool) -> Matrix {
        if !with_attention {
            return x.clone();
        }
        let a = self.attention.forward(&self.norm.apply_rows(x));
        let mut h = x.clone();
        for (hv, av) in h.data.iter_mut().zip(&a.data) {
            *hv += av;
        }
        h
    }
}

fn check_inputs(d_model: usize, x: &[Matrix]) -> Result<(), LibraryError> {
    for (i, m) in x.iter().enumerate() {
        if m.cols != d_model {
            return Err(LibraryError::Shape(format!("sample {i} has width {} (expected {d_model})", m.cols)));
        }
        if !m.is_finite() {
            return Err(LibraryError::NonFiniteInput);
        }
    }
    Ok(())
}

/// `y = h + FFN(norm(h))` with `h = x + Attn(norm(x))`, per sample.
pub fn forward_parent(block: &ParentBlock, x: &[Matrix]) -> Result<Vec<Matrix>, LibraryError> {
    check_inputs(block.d_model(), x)?;
    Ok(x.iter().map(|s| forward_block(block, Some(&block.ffn), true, s)).collect())
}

fn forward_block(parent: &ParentBlock, ffn: Option<&FfnWeights>, with_attention: bool, x: &Matrix) -> Matrix {
    let mut h = parent.after_attention(x, with_attention);
    if let Some(ffn) = ffn {
        let z = parent.norm.apply_rows(&h);
        for r in 0..h.rows {
            let f = ffn.forward(z.row(r), parent.activation);
            for (hv, fv) in h.data[r * h.cols..(r + 1) * h.cols].iter_mut().zip(f) {
                *hv += fv;
            }
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// Calibration activations and the parent block's outputs on them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub split: Split,
    pub sample_ids: Vec<usize>,
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub n_train: usize,
    pub n_held_out: usize,
    pub seq_len: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { n_train: 16, n_held_out: 8, seq_len: 8 }
    }
}

/// Draws standard-normal inputs and labels them with the parent block.
/// Sample ids `0..n_train` are train, the rest held out.
pub fn calibration_sets(
    parent: &ParentBlock,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<(CalibrationSet, CalibrationSet), LibraryError> {
    if cfg.n_train == 0 || cfg.n_held_out == 0 || cfg.seq_len == 0 {
        return Err(LibraryError::InvalidArgument("calibration sizes must be positive".into()));
    }
    let mut rng = seed::rng(seed);
    let d = parent.d_model();
    let total = cfg.n_train + cfg.n_held_out;
    let inputs: Vec<Matrix> = (0..total)
        .map(|_| Matrix::from_fn(cfg.seq_len, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let targets = forward_parent(parent, &inputs)?;
    let mut inputs = inputs;
    let mut targets = targets;
    let held_inputs = inputs.split_off(cfg.n_train);
    let held_targets = targets.split_off(cfg.n_train);
    Ok((
        CalibrationSet { split: Split::Train, sample_ids: (0..cfg.n_train).collect(), inputs, targets },
        CalibrationSet {
            split: Split::HeldOut,
            sample_ids: (cfg.n_train..total).collect(),
            inputs: held_inputs,
            targets: held_targets,
        },
    ))
}

/// Per-token rows the FFN sees during training: residual `h`, FFN input
/// `z = norm(h)` and the parent output `y`.
#[derive(Debug, Clone)]
pub struct FfnProblem {
    pub h: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl FfnProblem {
    pub fn new(parent: &ParentBlock, has_attention: bool, set: &CalibrationSet) -> Self {
        let mut p = FfnProblem { h: vec![], z: vec![], y: vec![], activation: parent.activation };
        for (x, y) in set.inputs.iter().zip(&set.targets) {
            let h = parent.after_attention(x, has_attention);
            let z = parent.norm.apply_rows(&h);
            for r in 0..h.rows {
                p.h.push(h.row(r).to_vec());
                p.z.push(z.row(r).to_vec());
                p.y.push(y.row(r).to_vec());
            }
        }
        p
    }

    fn denom(&self) -> f64 {
        (self.h.len() * self.h.first().map_or(1, |r| r.len())) as f64
    }

    /// Mean squared error over tokens and channels.
    pub fn loss(&self, ffn: Option<&FfnWeights>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.h.len() {
            let out = self.output_row(ffn, i);
            acc += out.iter().zip(&self.y[i]).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
        }
        acc / self.denom()
    }

    fn output_row(&self, ffn: Option<&FfnWeights>, i: usize) -> Vec<f64> {
        let mut out = self.h[i].clone();
        if let Some(ffn) = ffn {
            for (o, f) in out.iter_mut().zip(ffn.forward(&self.z[i], self.activation)) {
                *o += f;
            }
        }
        out
    }

    /// Loss and its analytic gradient with respect to both FFN matrices.
    pub fn loss_and_grad(&self, ffn: &FfnWeights) -> (f64, FfnWeights) {
        let act = self.activation;
        let hidden = ffn.hidden();
        let d = ffn.d_model();
        let mut g1 = Matrix::zeros(d, hidden);
        let mut g2 = Matrix::zeros(hidden, d);
        let denom = self.denom();
        let mut acc = 0.0;
        for i in 0..self.h.len() {
            let z = &self.z[i];
            let a = ffn.w1.left_mul(z);
            let s: Vec<f64> = a.iter().map(|&v| act.apply(v)).collect();
            let f = ffn.w2.left_mul(&s);
            let mut err = vec![0.0; d];
            for c in 0..d {
                // (h + f) - y, matching the forward pass exactly
                let e = (self.h[i][c] + f[c]) - self.y[i][c];
                acc += e * e;
                err[c] = 2.0 * e / denom;
            }
            for j in 0..hidden {
                let sj = s[j];
                let row = &mut g2.data[j * d..(j + 1) * d];
                for (g, e) in row.iter_mut().zip(&err) {
                    *g += sj * e;
                }
            }
            for j in 0..hidden {
                let ds = dot(ffn.w2.row(j), &err);
                let da = ds * act.derivative(a[j]);
                if da == 0.0 {
                    continue;
                }
                for (r, &zr) in z.iter().enumerate() {
                    g1.data[r * hidden + j] += zr * da;
                }
            }
        }
        (acc / denom, FfnWeights { w1: g1, w2: g2 })
    }
}

/// How a narrowed FFN is initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnInit {
    /// Keep the parent's most important hidden units, in original order.
    #[default]
    ParentTruncate,
    /// Fresh random weights from the variant seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillHyper {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: FfnInit,
}

impl Default for DistillHyper {
    fn default() -> Self {
        Self { steps: 100, learning_rate: 0.5, seed: 0, init: FfnInit::ParentTruncate }
    }
}

/// Result of distilling one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub spec: BlockVariantSpec,
    pub ffn: Option<FfnWeights>,
    pub hidden: usize,
    pub train_loss_initial: f64,
    pub train_loss_final: f64,
    /// Held-out MSE.
    pub quality_loss: f64,
}

pub fn init_ffn(parent: &ParentBlock, hidden: usize, init: FfnInit, seed: u64) -> Option<FfnWeights> {
    if hidden == 0 {
        return None;
    }
    let parent_hidden = parent.ffn.hidden();
    match init {
        FfnInit::ParentTruncate if hidden <= parent_hidden => {
            let imp = parent.ffn.unit_importance();
            let mut order: Vec<usize> = (0..parent_hidden).collect();
            order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
            let mut keep = order[..hidden].to_vec();
            keep.sort_unstable();
            Some(parent.ffn.select_hidden(&keep))
        }
        _ => {
            let mut rng = seed::rng(seed);
            Some(FfnWeights::random(parent.d_model(), hidden, &mut rng))
        }
    }
}

/// Trains one variant's FFN by full-batch gradient descent.
pub fn distill_variant(
    parent: &ParentBlock,
    spec: &BlockVariantSpec,
    hidden: usize,
    train: &CalibrationSet,
    held_out: &CalibrationSet,
    hyper: &DistillHyper,
) -> Result<DistillOutcome, LibraryError> {
    if train.split != Split::Train || held_out.split != Split::HeldOut {
        return Err(LibraryError::InvalidArgument("calibration splits are mislabeled".into()));
    }
    if train.sample_ids.iter().any(|id| held_out.sample_ids.contains(id)) {
        return Err(LibraryError::InvalidArgument("train and held-out splits overlap".into()));
    }
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) {
        return Err(LibraryError::InvalidArgument("learning_rate must be positive".into()));
    }
    let problem = FfnProblem::new(parent, spec.has_attention, train);
    let mut ffn = init_ffn(parent, hidden, hyper.init, hyper.seed);
    let train_loss_initial = problem.loss(ffn.as_ref());
    let mut train_loss_final = train_loss_initial;
    if let Some(w) = ffn.as_mut() {
        for step in 0..hyper.steps {
            let (loss, grad) = problem.loss_and_grad(w);
            if !loss.is_finite() {
                return Err(LibraryError::Diverged { step, loss });
            }
            for (p, g) in w.w1.data.iter_mut().zip(&grad.w1.data) {
                *p -= hyper.learning_rate * g;
            }
            for (p, g) in w.w2.data.iter_mut().zip(&grad.w2.data) {
                *p -= hyper.learning_rate * g;
            }
        }
        train_loss_final = problem.loss(Some(w));
        if !train_loss_final.is_finite() {
            return Err(LibraryError::Diverged { step: hyper.steps, loss: train_loss_final });
        }
    }
    let held = FfnProblem::new(parent, spec.has_attention, held_out);
    let quality_loss = held.loss(ffn.as_ref());
    Ok(DistillOutcome { spec: *spec, ffn, hidden, train_loss_initial, train_loss_final, quality_loss })
}

/// A distilled variant with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVariant {
    pub spec: BlockVariantSpec,
    pub weights: Option<FfnWeights>,
    pub quality_loss: f64,
    pub cost: CostVector,
    pub seed: u64,
}

/// Serialized catalog record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: usize,
    pub spec: BlockVariantSpec,
    pub quality_loss: f64,
    pub cost: CostVector,
    #[serde(default)]
    pub seed: u64,
}

/// Scored variants per layer; entry ids are positions within their layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub precision: Precision,
    pub cost_model: CostModel,
    #[serde(default)]
    pub arch: Option<ParentArch>,
    pub layers: Vec<Vec<CatalogEntry>>,
}

impl Catalog {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<(), LibraryError> {
        for (l, entries) in self.layers.iter().enumerate() {
            if entries.is_empty() {
                return Err(LibraryError::InvalidArgument(format!("layer {l} has no variants")));
            }
            for (i, e) in entries.iter().enumerate() {
                if e.id != i || e.spec.layer_index != l {
                    return Err(LibraryError::InvalidArgument(format!(
                        "layer {l} entry {i} has id {} / layer_index {}",
                        e.id, e.spec.layer_index
                    )));
                }
                if !(e.quality_loss.is_finite() && e.quality_loss >= 0.0) || !e.cost.latency_per_token.is_finite() {
                    return Err(LibraryError::InvalidArgument(format!("layer {l} entry {i} has non-finite values")));
                }
            }
        }
        Ok(())
    }

    /// Index of the full parent block in each layer, if present.
    pub fn parent_ids(&self) -> Option<Vec<usize>> {
        self.layers.iter().map(|es| es.iter().position(|e| e.spec.is_parent())).collect()
    }
}

/// Enumerates the variant grid for one layer: attention kept first, then
/// dropped, ratios in grid order. Empty blocks are skipped.
pub fn variant_specs(layer_index: usize, ratio_grid: &[f64]) -> Vec<BlockVariantSpec> {
    let mut out = Vec::new();
    for has_attention in [true, false] {
        for &ffn_ratio in ratio_grid {
            let s = BlockVariantSpec { layer_index, has_attention, ffn_ratio };
            if !has_attention && ffn_ratio == 0.0 {
                continue;
            }
            out.push(s);
        }
    }
    out
}

pub fn variant_seed(seed: u64, spec: &BlockVariantSpec) -> u64 {
    seed::derive(
        seed,
        "variant",
        &[spec.layer_index as u64, spec.has_attention as u64, spec.ffn_ratio.to_bits()],
    )
}

pub fn calibration_seed(seed: u64, layer_index: usize) -> u64 {
    seed::derive(seed, "calibration", &[layer_index as u64])
}

pub fn parent_seed(seed: u64, layer_index: usize) -> u64 {
    seed::derive(seed, "parent", &[layer_index as u64])
}

/// Everything needed to score variants besides the specs themselves.
#[derive(Debug, Clone)]
pub struct LibrarySettings {
    pub arch: ParentArch,
    pub cost_model: CostModel,
    pub precision: Precision,
    pub calibration: CalibrationConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub init: FfnInit,
    pub seed: u64,
}

/// Scores an arbitrary list of variants. Results depend only on each
/// variant's own derived seed, never on which others are scored with it.
pub fn score_variants(
    settings: &LibrarySettings,
    parents: &[ParentBlock],
    specs: &[BlockVariantSpec],
) -> Result<Vec<ScoredVariant>, LibraryError> {
    settings.arch.validate()?;
    settings.cost_model.validate()?;
    if parents.len() != settings.arch.n_layers {
        return Err(LibraryError::Shape(format!(
            "{} parent blocks for {} layers",
            parents.len(),
            settings.arch.n_layers
        )));
    }
    for (l, p) in parents.iter().enumerate() {
        if p.d_model() != settings.arch.d_model || p.ffn.hidden() != settings.arch.d_ffn {
            return Err(LibraryError::Shape(format!("parent block {l} does not match the architecture")));
        }
        p.ffn.check_shape()?;
    }
    let mut layers: Vec<usize> = specs.iter().map(|s| s.layer_index).collect();
    layers.sort_unstable();
    layers.dedup();
    for s in specs {
        s.validate(&settings.arch)?;
    }
    let calib: Vec<(usize, (CalibrationSet, CalibrationSet))> = layers
        .par_iter()
        .map(|&l| {
            calibration_sets(&parents[l], &settings.calibration, calibration_seed(settings.seed, l)).map(|c| (l, c))
        })
        .collect::<Result<_, _>>()?;
    specs
        .par_iter()
        .map(|spec| {
            let (_, (train, held)) = calib.iter().find(|(l, _)| *l == spec.layer_index).expect("layer calibrated");
            let vseed = variant_seed(settings.seed, spec);
            let hidden = settings.cost_model.ffn_hidden(&settings.arch, spec.ffn_ratio);
            let hyper = DistillHyper {
                steps: settings.steps,
                learning_rate: settings.learning_rate,
                seed: vseed,
                init: settings.init,
            };
            let wrap = |e: LibraryError| LibraryError::Variant {
                layer: spec.layer_index,
                spec: spec.label(),
                source: Box::new(e),
            };
            let out = distill_variant(&parents[spec.layer_index], spec, hidden, train, held, &hyper).map_err(wrap)?;
            let cost = block_costs(&settings.arch, spec, settings.precision, &settings.cost_model)
                .map_err(|e| wrap(e.into()))?;
            Ok(ScoredVariant { spec: *spec, weights: out.ffn, quality_loss: out.quality_loss, cost, seed: vseed })
        })
        .collect()
}

/// Output of [`build_library`]: the serializable catalog plus trained weights
/// aligned with it.
#[derive(Debug, Clone)]
pub struct Library {
    pub catalog: Catalog,
    pub weights: Vec<Vec<Option<FfnWeights>>>,
}

/// Scores the full cross product of layers × attention on/off × ratio grid.
pub fn build_library(
    settings: &LibrarySettings,
    parents: &[ParentBlock],
    ratio_grid: &[f64],
) -> Result<Library, LibraryError> {
    if ratio_grid.is_empty() {
        return Err(LibraryError::InvalidArgument("ratio grid is empty".into()));
    }
    let specs: Vec<BlockVariantSpec> =
        (0..settings.arch.n_layers).flat_map(|l| variant_specs(l, ratio_grid)).collect();
    let scored = score_variants(settings, parents, &specs)?;
    let mut layers: Vec<Vec<CatalogEntry>> = vec![Vec::new(); settings.arch.n_layers];
    let mut weights: Vec<Vec<Option<FfnWeights>>> = vec![Vec::new(); settings.arch.n_layers];
    for v in scored {
        let l = v.spec.layer_index;
        let id = layers[l].len();
        layers[l].push(CatalogEntry {
            id,
            spec: v.spec,
            quality_loss: v.quality_loss,
            cost: v.cost,
            seed: v.seed,
        });
        weights[l].push(v.weights);
    }
    Ok(Library {
        catalog: Catalog {
            precision: settings.precision,
            cost_model: settings.cost_model,
            arch: Some(settings.arch.clone()),
            layers,
        },
        weights,
    })
}

/// Random parent blocks, one per layer, from the run seed. Each layer's
/// attention output is scaled by a gain in `[0.05, 1]` so layers differ in
/// how much they rely on attention.
pub fn random_parents(arch: &ParentArch, activation: Activation, seed: u64) -> Vec<ParentBlock> {
    (0..arch.n_layers)
        .map(|l| {
            let mut b = ParentBlock::random(arch, activation, parent_seed(seed, l));
            let u = seed::derive(seed, "attention_gain", &[l as u64]) as f64 / u64::MAX as f64;
            let gain = 0.05 + 0.95 * u * u;
            for w in b.attention.wo.data.iter_mut() {
                *w *= gain;
            }
            b
        })
        .collect()
}

const WEIGHTS_MAGIC: &[u8; 4] = b"AOW1";

/// One FFN's weights in the sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub layer: u32,
    pub variant: u32,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Writes the weights sidecar.
///
/// Layout, all little-endian: magic `AOW1`, `u32` record count, then per
/// record `u32 layer`, `u32 variant`, and two tensors each encoded as
/// `u32 ndim` (always 2), `u32 rows`, `u32 cols`, `rows*cols` row-major `f32`.
pub fn write_weights(mut w: impl Write, library: &Library) -> Result<(), LibraryError> {
    let records: Vec<(u32, u32, &FfnWeights)> = library
        .weights
        .iter()
        .enumerate()
        .flat_map(|(l, vs)| {
            vs.iter().enumerate().filter_map(move |(i, f)| f.as_ref().map(|f| (l as u32, i as u32, f)))
        })
        .collect();
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (l, i, f) in records {
        w.write_all(&l.to_le_bytes())?;
        w.write_all(&i.to_le_bytes())?;
        for m in [&f.w1, &f.w2] {
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(m.rows as u32).to_le_bytes())?;
            w.write_all(&(m.cols as u32).to_le_bytes())?;
            for v in &m.data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_weights(mut r: impl Read) -> Result<Vec<WeightRecord>, LibraryError> {
    fn u32_of(r: &mut impl Read) -> Result<u32, LibraryError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn tensor(r: &mut impl Read) -> Result<Matrix, LibraryError> {
        let ndim = u32_of(r)?;
        if ndim != 2 {
            return Err(LibraryError::WeightsFormat(format!("expected 2-d tensor, got {ndim}-d")));
        }
        let rows = u32_of(r)? as usize;
        let cols = u32_of(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        Ok(Matrix { rows, cols, data })
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(LibraryError::WeightsFormat("bad magic".into()));
    }
    let n = u32_of(&mut r)?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let layer = u32_of(&mut r)?;
        let variant = u32_of(&mut r)?;
        let w1 = tensor(&mut r)?;
        let w2 = tensor(&mut r)?;
        out.push(WeightRecord { layer, variant, w1, w2 });
    }
    Ok(out)
}
