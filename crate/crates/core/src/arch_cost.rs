//! Parent architecture description and the analytic per-block cost model.
//!
//! Costs are modeled, not measured: parameters and FLOPs are closed forms of
//! the block shape, and latency is a two-term roofline
//! `flops / compute_rate + weight_bytes / bandwidth`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("model does not fit: {weight_bytes} weight bytes >= {device_memory} bytes of device memory")]
    DoesNotFit { weight_bytes: u64, device_memory: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Storage precision. Only these three widths exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "FP8")]
    Fp8,
    #[serde(rename = "BF16")]
    Bf16,
    #[serde(rename = "FP32")]
    Fp32,
}

impl Precision {
    pub const fn bytes_per_element(self) -> u64 {
        match self {
            Precision::Fp8 => 1,
            Precision::Bf16 => 2,
            Precision::Fp32 => 4,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Precision::Fp8 => "FP8",
            Precision::Bf16 => "BF16",
            Precision::Fp32 => "FP32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FP8" => Ok(Precision::Fp8),
            "BF16" => Ok(Precision::Bf16),
            "FP32" => Ok(Precision::Fp32),
            other => Err(CostError::InvalidArgument(format!("unknown precision {other:?}"))),
        }
    }
}

/// Which sublayers a layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComposition {
    pub has_attention: bool,
    pub has_ffn: bool,
}

/// The reference transformer every variant approximates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentArch {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
}

impl ParentArch {
    pub fn validate(&self) -> Result<(), CostError> {
        let fail = |m: &str| Err(CostError::ConstraintViolation(m.to_string()));
        if self.n_layers == 0 {
            return fail("n_layers >= 1");
        }
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.d_ffn == 0
            || self.vocab_size == 0
        {
            return fail("all widths > 0");
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail("n_kv_heads divides n_heads");
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail("d_model = n_heads * head_dim");
        }
        Ok(())
    }

    /// The parent keeps every sublayer in every layer.
    pub fn layer_composition(&self) -> Vec<LayerComposition> {
        vec![LayerComposition { has_attention: true, has_ffn: true }; self.n_layers]
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Untied input embedding plus output head; not part of any block.
    pub fn embedding_params(&self) -> u64 {
        2 * self.vocab_size as u64 * self.d_model as u64
    }
}

/// One candidate replacement for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockVariantSpec {
    pub layer_index: usize,
    pub has_attention: bool,
    /// Fraction of the parent FFN width; 0 removes the FFN.
    pub ffn_ratio: f64,
}

impl BlockVariantSpec {
    pub fn parent(layer_index: usize) -> Self {
        Self { layer_index, has_attention: true, ffn_ratio: 1.0 }
    }

    pub fn validate(&self, arch: &ParentArch) -> Result<(), CostError> {
        if self.layer_index >= arch.n_layers {
            return Err(CostError::ConstraintViolation(format!(
                "layer_index < n_layers ({} >= {})",
                self.layer_index, arch.n_layers
            )));
        }
        if !(self.ffn_ratio.is_finite() && (0.0..=1.0).contains(&self.ffn_ratio)) {
            return Err(CostError::ConstraintViolation(format!(
                "ffn_ratio in (0, 1] or 0 (got {})",
                self.ffn_ratio
            )));
        }
        if !self.has_attention && self.ffn_ratio == 0.0 {
            return Err(CostError::ConstraintViolation(
                "not (has_attention = false and ffn_ratio = 0): empty block".to_string(),
            ));
        }
        Ok(())
    }

    pub fn is_parent(&self) -> bool {
        self.has_attention && self.ffn_ratio == 1.0
    }

    pub fn is_attention_free_ffn(&self) -> bool {
        !self.has_attention && self.ffn_ratio > 0.0
    }

    /// Short stable label, e.g. `attn+ffn0.75` or `noattn+ffn0.5`.
    pub fn label(&self) -> String {
        let a = if self.has_attention { "attn" } else { "noattn" };
        format!("{a}+ffn{}", self.ffn_ratio)
    }
}

/// Configuration constants of the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// FLOPs per model time unit.
    pub compute_rate: f64,
    /// Bytes streamed per model time unit.
    pub bandwidth: f64,
    /// FFN hidden widths are rounded to a multiple of this.
    pub ffn_alignment: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        // H100 SXM dense BF16 peak and HBM3 bandwidth; time unit is seconds.
        Self { compute_rate: 989e12, bandwidth: 3.35e12, ffn_alignment: 1 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.compute_rate > 0.0 && self.compute_rate.is_finite()) {
            return Err(CostError::InvalidArgument("compute_rate must be positive".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(CostError::InvalidArgument("bandwidth must be positive".into()));
        }
        if self.ffn_alignment == 0 {
            return Err(CostError::InvalidArgument("ffn_alignment must be >= 1".into()));
        }
        Ok(())
    }

    /// Hidden width actually used for a ratio: nearest multiple of the
    /// alignment, never rounded down to zero for a nonzero ratio.
    pub fn ffn_hidden(&self, arch: &ParentArch, ratio: f64) -> usize {
        if ratio <= 0.0 {
            return 0;
        }
        let align = self.ffn_alignment.max(1) as f64;
        let units = (ratio * arch.d_ffn as f64 / align).round().max(1.0);
        units as usize * self.ffn_alignment.max(1)
    }

    pub fn compute_time(&self, flops: u64) -> f64 {
        flops as f64 / self.compute_rate
    }

    pub fn streaming_time(&self, weight_bytes: u64) -> f64 {
        weight_bytes as f64 / self.bandwidth
    }

    pub fn latency(&self, flops: u64, weight_bytes: u64) -> f64 {
        self.compute_time(flops) + self.streaming_time(weight_bytes)
    }
}

/// Modeled cost of a block (or a sum of blocks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub params: u64,
    pub flops_per_token: u64,
    pub kv_bytes_per_token: u64,
    pub latency_per_token: f64,
    pub weight_bytes: u64,
}

impl CostVector {
    /// Accumulates `other` into `self`; latency is summed in call order.
    pub fn accumulate(&mut self, other: &CostVector) {
        self.params += other.params;
        self.flops_per_token += other.flops_per_token;
        self.kv_bytes_per_token += other.kv_bytes_per_token;
        self.latency_per_token += other.latency_per_token;
        self.weight_bytes += other.weight_bytes;
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a CostVector>) -> CostVector {
        let mut total = CostVector::default();
        for c in items {
            total.accumulate(c);
        }
        total
    }
}

/// Parameter counts of the attention and FFN sublayers of a variant.
pub fn block_params(arch: &ParentArch, cost: &CostModel, spec: &BlockVariantSpec) -> (u64, u64) {
    let d = arch.d_model as u64;
    let attn = if spec.has_attention {
        // Q and O are d x d; K and V shrink with KV-head sharing.
        2 * d * d + 2 * d * arch.kv_dim() as u64
    } else {
        0
    };
    let ffn = 2 * d * cost.ffn_hidden(arch, spec.ffn_ratio) as u64;
    (attn, ffn)
}

/// Analytic cost of one block variant.
pub fn block_costs(
    arch: &ParentArch,
    spec: &BlockVariantSpec,
    precision: Precision,
    cost: &CostModel,
) -> Result<CostVector, CostError> {
    arch.validate()?;
    spec.validate(arch)?;
    let (attn, ffn) = block_params(arch, cost, spec);
    let params = attn + ffn;
    let bpe = precision.bytes_per_element();
    let kv_bytes_per_token =
        if spec.has_attention { 2 * arch.kv_dim() as u64 * bpe } else { 0 };
    let flops_per_token = 2 * params;
    let weight_bytes = params * bpe;
    Ok(CostVector {
        params,
        flops_per_token,
        kv_bytes_per_token,
        latency_per_token: cost.latency(flops_per_token, weight_bytes),
        weight_bytes,
    })
}

/// Sum of per-layer costs, accumulated in layer order.
pub fn model_costs(
    arch: &ParentArch,
    specs: &[BlockVariantSpec],
    precision: Precision,
    cost: &CostModel,
) -> Result<CostVector, CostError> {
    let mut total = CostVector::default();
    for s in specs {
        total.accumulate(&block_costs(arch, s, precision, cost)?);
    }
    Ok(total)
}

pub fn model_weight_bytes(total_params: u64, precision: Precision) -> u64 {
    total_params * precision.bytes_per_element()
}

/// Tokens of KV cache that fit beside the weights.
///
/// `floor(((1 - reserve) * device_memory - weight_bytes) / kv_bytes_per_token)`,
/// clamped at zero when the reserve eats the remaining budget.
pub fn max_cached_tokens(
    kv_bytes_per_token: u64,
    device_memory: u64,
    weight_bytes: u64,
    reserve_fraction: f64,
) -> Result<u64, CostError> {
    if weight_bytes >= device_memory {
        return Err(CostError::DoesNotFit { weight_bytes, device_memory });
    }
    if !(0.0..1.0).contains(&reserve_fraction) {
        return Err(CostError::InvalidArgument(format!(
            "reserve_fraction must be in [0, 1), got {reserve_fraction}"
        )));
    }
    if kv_bytes_per_token == 0 {
        return Err(CostError::InvalidArgument("kv_bytes_per_token must be > 0".into()));
    }
    let usable = usable_memory(device_memory, reserve_fraction);
    if usable <= weight_bytes {
        return Ok(0);
    }
    Ok((usable - weight_bytes) / kv_bytes_per_token)
}

/// `floor((1 - reserve) * device_memory)`, exact when the reserve is zero.
pub fn usable_memory(device_memory: u64, reserve_fraction: f64) -> u64 {
    if reserve_fraction == 0.0 {
        device_memory
    } else {
        ((1.0 - reserve_fraction) * device_memory as f64).floor() as u64
    }
}

/// KV bytes per token implied by a stated cached-token capacity (reserve 0).
pub fn kv_bytes_for_capacity(device_memory: u64, weight_bytes: u64, tokens: u64) -> Result<u64, CostError> {
    if weight_bytes >= device_memory {
        return Err(CostError::DoesNotFit { weight_bytes, device_memory });
    }
    if tokens == 0 {
        return Err(CostError::InvalidArgument("tokens must be > 0".into()));
    }
    Ok((device_memory - weight_bytes) / tokens)
}
