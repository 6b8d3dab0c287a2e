//! Exact block selection: one variant per layer, minimum summed quality loss,
//! subject to weight-memory, latency and cached-token constraints.
//!
//! The problem is a multi-dimensional multiple-choice knapsack. [`solve`] runs
//! a layer-by-layer dynamic program over Pareto labels (partial assignments
//! that are not dominated in loss and every resource axis), with a lookahead
//! bound that drops prefixes no completion can make feasible. Costs are kept
//! at full precision throughout, so no discretization error can leak into
//! the result. [`brute_force`] enumerates every assignment and serves as the
//! oracle.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_cost::{usable_memory, BlockVariantSpec, CostModel, CostVector, Precision};
use crate::block_library::Catalog;
use crate::ffn_fusion::FusionReport;

pub const DEFAULT_BRUTE_FORCE_CAP: u64 = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("infeasible: {0}")]
    Infeasible(InfeasibilityReport),
    #[error("brute force refused: {assignments} assignments exceed the cap of {cap}")]
    CapExceeded { assignments: u128, cap: u64 },
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("solutions are not comparable: {0}")]
    Mismatch(String),
}

/// Minimum cached-token capacity at a given device memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedTokenConstraint {
    pub tokens: u64,
    pub device_memory: u64,
    #[serde(default)]
    pub reserve_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    #[serde(default)]
    pub max_weight_bytes: Option<u64>,
    #[serde(default)]
    pub max_latency: Option<f64>,
    #[serde(default)]
    pub min_cached_tokens: Option<CachedTokenConstraint>,
    pub precision: Precision,
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConstraints(m.to_string()));
        if self.max_weight_bytes.is_none() && self.max_latency.is_none() && self.min_cached_tokens.is_none() {
            return bad("at least one constraint is required");
        }
        if self.max_weight_bytes == Some(0) {
            return bad("max_weight_bytes must be positive");
        }
        if let Some(l) = self.max_latency {
            if !(l > 0.0 && l.is_finite()) {
                return bad("max_latency must be positive and finite");
            }
        }
        if let Some(c) = &self.min_cached_tokens {
            if c.tokens == 0 || c.device_memory == 0 {
                return bad("cached-token constraint needs positive tokens and device memory");
            }
            if !(0.0..1.0).contains(&c.reserve_fraction) {
                return bad("reserve_fraction must be in [0, 1)");
            }
        }
        Ok(())
    }
}

/// Per-constraint headroom of a solution; `None` where unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub weight_bytes: Option<i128>,
    pub latency: Option<f64>,
    /// Usable device memory left after weights and the required KV cache.
    pub cached_token_bytes: Option<i128>,
    /// Cached tokens the solution supports; `None` with no attention anywhere.
    pub achieved_cached_tokens: Option<u64>,
}

/// The resolved choice for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionBlock {
    pub variant_id: usize,
    pub spec: BlockVariantSpec,
    pub quality_loss: f64,
    pub cost: CostVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleSolution {
    pub n_layers: usize,
    pub precision: Precision,
    pub cost_model: CostModel,
    pub choice: Vec<usize>,
    pub blocks: Vec<SolutionBlock>,
    pub total_quality_loss: f64,
    pub cost: CostVector,
    pub slack: Slack,
    /// Sequential block count; drops when FFN runs are fused.
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionReport>,
}

impl PuzzleSolution {
    /// Builds a solution from explicit per-layer variant ids.
    pub fn from_choice(
        catalog: &Catalog,
        choice: &[usize],
        constraints: Option<&ConstraintSet>,
    ) -> Result<Self, SearchError> {
        if choice.len() != catalog.n_layers() {
            return Err(SearchError::InvalidCatalog(format!(
                "{} choices for {} layers",
                choice.len(),
                catalog.n_layers()
            )));
        }
        let mut blocks = Vec::with_capacity(choice.len());
        for (l, &c) in choice.iter().enumerate() {
            let e = catalog.layers[l]
                .get(c)
                .ok_or_else(|| SearchError::InvalidCatalog(format!("layer {l} has no variant {c}")))?;
            blocks.push(SolutionBlock { variant_id: c, spec: e.spec, quality_loss: e.quality_loss, cost: e.cost });
        }
        let mut total_quality_loss = 0.0;
        for b in &blocks {
            total_quality_loss += b.quality_loss;
        }
        let cost = CostVector::sum(blocks.iter().map(|b| &b.cost));
        let slack = constraints.map(|c| slack_of(&cost, c)).unwrap_or_default();
        Ok(PuzzleSolution {
            n_layers: choice.len(),
            precision: catalog.precision,
            cost_model: catalog.cost_model,
            choice: choice.to_vec(),
            blocks,
            total_quality_loss,
            cost,
            slack,
            depth: choice.len(),
            fusion: None,
        })
    }

    /// Re-checks every constraint against the full-precision aggregates.
    pub fn is_feasible(&self, constraints: &ConstraintSet) -> bool {
        feasible(&Totals::of(&self.cost), constraints)
    }
}

/// The parent architecture as a solution: the full block at every layer.
pub fn parent_solution(catalog: &Catalog) -> Result<PuzzleSolution, SearchError> {
    let ids = catalog
        .parent_ids()
        .ok_or_else(|| SearchError::InvalidCatalog("catalog lacks the parent block in some layer".into()))?;
    PuzzleSolution::from_choice(catalog, &ids, None)
}

#[derive(Debug, Clone, Copy)]
struct Totals {
    lat: f64,
    weight: u64,
    kv: u64,
}

impl Totals {
    fn of(c: &CostVector) -> Self {
        Totals { lat: c.latency_per_token, weight: c.weight_bytes, kv: c.kv_bytes_per_token }
    }
}

fn required_memory(weight: u64, kv: u64, tokens: u64) -> u128 {
    weight as u128 + tokens as u128 * kv as u128
}

fn feasible(t: &Totals, c: &ConstraintSet) -> bool {
    if let Some(b) = c.max_weight_bytes {
        if t.weight > b {
            return false;
        }
    }
    if let Some(b) = c.max_latency {
        if t.lat > b {
            return false;
        }
    }
    if let Some(m) = &c.min_cached_tokens {
        if t.weight >= m.device_memory {
            return false;
        }
        if required_memory(t.weight, t.kv, m.tokens) > usable_memory(m.device_memory, m.reserve_fraction) as u128 {
            return false;
        }
    }
    true
}

fn slack_of(cost: &CostVector, c: &ConstraintSet) -> Slack {
    let mut s = Slack::default();
    if let Some(b) = c.max_weight_bytes {
        s.weight_bytes = Some(b as i128 - cost.weight_bytes as i128);
    }
    if let Some(b) = c.max_latency {
        s.latency = Some(b - cost.latency_per_token);
    }
    if let Some(m) = &c.min_cached_tokens {
        let usable = usable_memory(m.device_memory, m.reserve_fraction);
        s.cached_token_bytes =
            Some(usable as i128 - required_memory(cost.weight_bytes, cost.kv_bytes_per_token, m.tokens) as i128);
        if cost.kv_bytes_per_token > 0 && cost.weight_bytes < usable {
            s.achieved_cached_tokens = Some((usable - cost.weight_bytes) / cost.kv_bytes_per_token);
        }
    }
    s
}

/// The best value each constrained quantity can reach over all assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBound {
    pub constraint: String,
    pub bound: f64,
    pub min_achievable: f64,
    pub satisfiable_alone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    pub constraints: Vec<ConstraintBound>,
}

impl std::fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .constraints
            .iter()
            .map(|c| format!("{} bound {} vs min achievable {}", c.constraint, c.bound, c.min_achievable))
            .collect();
        if self.constraints.iter().all(|c| c.satisfiable_alone) {
            write!(f, "constraints are jointly unsatisfiable ({})", parts.join("; "))
        } else {
            write!(f, "{}", parts.join("; "))
        }
    }
}

fn infeasibility_report(catalog: &Catalog, c: &ConstraintSet) -> InfeasibilityReport {
    let mut out = Vec::new();
    if let Some(b) = c.max_weight_bytes {
        let m: u64 = catalog.layers.iter().map(|es| es.iter().map(|e| e.cost.weight_bytes).min().unwrap_or(0)).sum();
        out.push(ConstraintBound {
            constraint: "max_weight_bytes".into(),
            bound: b as f64,
            min_achievable: m as f64,
            satisfiable_alone: m <= b,
        });
    }
    if let Some(b) = c.max_latency {
        let mut m = 0.0;
        for es in &catalog.layers {
            m += es.iter().map(|e| e.cost.latency_per_token).fold(f64::INFINITY, f64::min);
        }
        out.push(ConstraintBound {
            constraint: "max_latency".into(),
            bound: b,
            min_achievable: m,
            satisfiable_alone: m <= b,
        });
    }
    if let Some(t) = &c.min_cached_tokens {
        let usable = usable_memory(t.device_memory, t.reserve_fraction);
        let m: u128 = catalog
            .layers
            .iter()
            .map(|es| es.iter().map(|e| required_memory(e.cost.weight_bytes, e.cost.kv_bytes_per_token, t.tokens)).min().unwrap_or(0))
            .sum();
        out.push(ConstraintBound {
            constraint: "min_cached_tokens (bytes for weights + KV cache)".into(),
            bound: usable as f64,
            min_achievable: m as f64,
            satisfiable_alone: m <= usable as u128,
        });
    }
    InfeasibilityReport { constraints: out }
}

fn check_inputs(catalog: &Catalog, c: &ConstraintSet) -> Result<(), SearchError> {
    c.validate()?;
    if catalog.layers.is_empty() {
        return Err(SearchError::InvalidCatalog("catalog has no layers".into()));
    }
    catalog.validate().map_err(|e| SearchError::InvalidCatalog(e.to_string()))?;
    if catalog.precision != c.precision {
        return Err(SearchError::InvalidConstraints(format!(
            "constraints are stated at {} but the catalog is costed at {}",
            c.precision.name(),
            catalog.precision.name()
        )));
    }
    Ok(())
}

/// Final ordering: loss, then latency, then weight bytes, then the choice
/// vector lexicographically.
fn key_cmp(a_loss: f64, a_lat: f64, a_w: u64, a_ch: &[u32], b_loss: f64, b_lat: f64, b_w: u64, b_ch: &[u32]) -> Ordering {
    a_loss
        .total_cmp(&b_loss)
        .then(a_lat.total_cmp(&b_lat))
        .then(a_w.cmp(&b_w))
        .then_with(|| a_ch.cmp(b_ch))
}

#[derive(Debug, Clone)]
struct Label {
    loss: f64,
    lat: f64,
    weight: u64,
    kv: u64,
    mem: u128,
    choice: Vec<u32>,
}

impl Label {
    fn key_cmp(&self, o: &Label) -> Ordering {
        key_cmp(self.loss, self.lat, self.weight, &self.choice, o.loss, o.lat, o.weight, &o.choice)
    }

    /// `self` can replace `o`: no worse on any axis, and every completion of
    /// `self` sorts no later than the same completion of `o`.
    fn dominates(&self, o: &Label) -> bool {
        if self.loss > o.loss || self.lat > o.lat || self.weight > o.weight || self.mem > o.mem {
            return false;
        }
        if self.loss < o.loss || self.lat < o.lat || self.weight < o.weight {
            return true;
        }
        self.choice <= o.choice
    }
}

/// Exact constrained selection by Pareto-label dynamic programming.
pub fn solve(catalog: &Catalog, constraints: &ConstraintSet) -> Result<PuzzleSolution, SearchError> {
    check_inputs(catalog, constraints)?;
    let n = catalog.n_layers();
    let tokens = constraints.min_cached_tokens.map(|m| m.tokens).unwrap_or(0);
    let mem_budget = constraints
        .min_cached_tokens
        .map(|m| usable_memory(m.device_memory, m.reserve_fraction) as u128);

    // Per-layer minima of each resource, for the lookahead bound.
    let min_lat: Vec<f64> = catalog
        .layers
        .iter()
        .map(|es| es.iter().map(|e| e.cost.latency_per_token).fold(f64::INFINITY, f64::min))
        .collect();
    let mut suffix_w = vec![0u64; n + 1];
    let mut suffix_mem = vec![0u128; n + 1];
    for l in (0..n).rev() {
        let es = &catalog.layers[l];
        suffix_w[l] = suffix_w[l + 1] + es.iter().map(|e| e.cost.weight_bytes).min().unwrap_or(0);
        suffix_mem[l] = suffix_mem[l + 1]
            + es.iter().map(|e| required_memory(e.cost.weight_bytes, e.cost.kv_bytes_per_token, tokens)).min().unwrap_or(0);
    }

    let mut labels = vec![Label { loss: 0.0, lat: 0.0, weight: 0, kv: 0, mem: 0, choice: Vec::new() }];
    for l in 0..n {
        let mut next: Vec<Label> = Vec::with_capacity(labels.len() * catalog.layers[l].len());
        for lab in &labels {
            for e in &catalog.layers[l] {
                let weight = lab.weight + e.cost.weight_bytes;
                let kv = lab.kv + e.cost.kv_bytes_per_token;
                let cand = Label {
                    loss: lab.loss + e.quality_loss,
                    lat: lab.lat + e.cost.latency_per_token,
                    weight,
                    kv,
                    mem: if mem_budget.is_some() { required_memory(weight, kv, tokens) } else { 0 },
                    choice: {
                        let mut c = lab.choice.clone();
                        c.push(e.id as u32);
                        c
                    },
                };
                if prunable(&cand, l + 1, constraints, &min_lat, &suffix_w, &suffix_mem, mem_budget) {
                    continue;
                }
                next.push(cand);
            }
        }
        next.sort_by(|a, b| a.key_cmp(b));
        let mut kept: Vec<Label> = Vec::with_capacity(next.len());
        for cand in next {
            if !kept.iter().any(|k| k.dominates(&cand)) {
                kept.push(cand);
            }
        }
        labels = kept;
        if labels.is_empty() {
            break;
        }
    }

    let best = labels
        .into_iter()
        .filter(|lab| feasible(&Totals { lat: lab.lat, weight: lab.weight, kv: lab.kv }, constraints))
        .min_by(|a, b| a.key_cmp(b));
    match best {
        Some(lab) => {
            let choice: Vec<usize> = lab.choice.iter().map(|&c| c as usize).collect();
            let sol = PuzzleSolution::from_choice(catalog, &choice, Some(constraints))?;
            debug_assert!(sol.is_feasible(constraints));
            Ok(sol)
        }
        None => Err(SearchError::Infeasible(infeasibility_report(catalog, constraints))),
    }
}

/// True when no completion of the prefix `lab` (covering layers `0..done`)
/// can satisfy the constraints.
fn prunable(
    lab: &Label,
    done: usize,
    c: &ConstraintSet,
    min_lat: &[f64],
    suffix_w: &[u64],
    suffix_mem: &[u128],
    mem_budget: Option<u128>,
) -> bool {
    if let Some(b) = c.max_weight_bytes {
        if lab.weight + suffix_w[done] > b {
            return true;
        }
    }
    if let Some(b) = c.max_latency {
        // Summed in layer order: rounding is monotone, so this is a true
        // lower bound on every completion's accumulated latency.
        let mut lat = lab.lat;
        for m in &min_lat[done..] {
            lat += m;
        }
        if lat > b {
            return true;
        }
    }
    if let (Some(budget), Some(m)) = (mem_budget, &c.min_cached_tokens) {
        if lab.mem + suffix_mem[done] > budget || lab.weight + suffix_w[done] >= m.device_memory {
            return true;
        }
    }
    false
}

/// Exhaustive oracle with the same objective and tie-breaking as [`solve`].
pub fn brute_force(catalog: &Catalog, constraints: &ConstraintSet, cap: u64) -> Result<PuzzleSolution, SearchError> {
    check_inputs(catalog, constraints)?;
    let sizes: Vec<usize> = catalog.layers.iter().map(|es| es.len()).collect();
    let assignments = sizes.iter().try_fold(1u128, |acc, &s| acc.checked_mul(s as u128)).unwrap_or(u128::MAX);
    if assignments > cap as u128 {
        return Err(SearchError::CapExceeded { assignments, cap });
    }
    let n = sizes.len();
    let mut idx = vec![0u32; n];
    let mut best: Option<(f64, f64, u64, Vec<u32>)> = None;
    loop {
        let mut loss = 0.0;
        let mut lat = 0.0;
        let mut weight = 0u64;
        let mut kv = 0u64;
        for (l, &i) in idx.iter().enumerate() {
            let e = &catalog.layers[l][i as usize];
            loss += e.quality_loss;
            lat += e.cost.latency_per_token;
            weight += e.cost.weight_bytes;
            kv += e.cost.kv_bytes_per_token;
        }
        if feasible(&Totals { lat, weight, kv }, constraints) {
            let better = match &best {
                None => true,
                Some((bl, bt, bw, bc)) => key_cmp(loss, lat, weight, &idx, *bl, *bt, *bw, bc) == Ordering::Less,
            };
            if better {
                best = Some((loss, lat, weight, idx.clone()));
            }
        }
        // odometer, last layer fastest
        let mut l = n;
        loop {
            if l == 0 {
                let Some((_, _, _, choice)) = best else {
                    return Err(SearchError::Infeasible(infeasibility_report(catalog, constraints)));
                };
                let choice: Vec<usize> = choice.iter().map(|&c| c as usize).collect();
                return PuzzleSolution::from_choice(catalog, &choice, Some(constraints));
            }
            l -= 1;
            idx[l] += 1;
            if (idx[l] as usize) < sizes[l] {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// One grid point of a Pareto sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub budget: f64,
    pub solution: Option<PuzzleSolution>,
    pub infeasible: Option<InfeasibilityReport>,
    /// Another grid point is at least as good on loss and latency and
    /// strictly better on one.
    pub dominated: bool,
}

/// Solves once per latency budget, all other constraints held fixed.
pub fn pareto_frontier(
    catalog: &Catalog,
    latency_grid: &[f64],
    fixed: &ConstraintSet,
) -> Result<Vec<ParetoPoint>, SearchError> {
    if latency_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SearchError::InvalidConstraints("latency budgets must be strictly increasing".into()));
    }
    let results: Vec<Result<ParetoPoint, SearchError>> = latency_grid
        .par_iter()
        .map(|&budget| {
            let c = ConstraintSet { max_latency: Some(budget), ..fixed.clone() };
            match solve(catalog, &c) {
                Ok(s) => Ok(ParetoPoint { budget, solution: Some(s), infeasible: None, dominated: false }),
                Err(SearchError::Infeasible(r)) => {
                    Ok(ParetoPoint { budget, solution: None, infeasible: Some(r), dominated: false })
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut points = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summary: Vec<Option<(f64, f64)>> = points
        .iter()
        .map(|p| p.solution.as_ref().map(|s| (s.total_quality_loss, s.cost.latency_per_token)))
        .collect();
    for (i, p) in points.iter_mut().enumerate() {
        if let Some((li, ti)) = summary[i] {
            p.dominated = summary.iter().enumerate().any(|(j, o)| {
                j != i && matches!(o, Some((lj, tj)) if *lj <= li && *tj <= ti && (*lj < li || *tj < ti))
            });
        }
    }
    Ok(points)
}

/// Parent-over-optimized ratios of the modeled aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub latency_ratio: f64,
    /// Compute-bound throughput proxy: ratio of FLOPs per token.
    pub throughput_proxy_ratio: f64,
    /// `None` when the optimized model keeps no KV cache at all.
    pub kv_ratio: Option<f64>,
}

pub fn speedup_report(solution: &PuzzleSolution, parent: &PuzzleSolution) -> Result<SpeedupReport, SearchError> {
    if solution.n_layers != parent.n_layers {
        return Err(SearchError::Mismatch(format!("{} vs {} layers", solution.n_layers, parent.n_layers)));
    }
    if solution.precision != parent.precision || solution.cost_model != parent.cost_model {
        return Err(SearchError::Mismatch("different precision or cost model".into()));
    }
    let kv = solution.cost.kv_bytes_per_token;
    Ok(SpeedupReport {
        latency_ratio: parent.cost.latency_per_token / solution.cost.latency_per_token,
        throughput_proxy_ratio: parent.cost.flops_per_token as f64 / solution.cost.flops_per_token as f64,
        kv_ratio: (kv > 0).then(|| parent.cost.kv_bytes_per_token as f64 / kv as f64),
    })
}
