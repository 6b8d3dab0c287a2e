//! (tp, pp, cp, dp) planning for a heterogeneous layer profile.
//!
//! Stages are balanced exactly (min-max contiguous partition), optionally
//! padded with zero-cost identity layers so every stage holds the same layer
//! count. Per-GPU memory is weights + optimizer states + in-flight
//! activations, each divided by the parallel degrees that shard it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_cost::Precision;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{pp} pipeline stages for {layers} layers")]
    TooManyStages { pp: usize, layers: usize },
    #[error("out of memory: {component} needs {required} bytes, budget {budget}")]
    OutOfMemory { component: String, required: u64, budget: u64 },
    #[error("no feasible parallelism plan among {} candidates", rejected.len())]
    NoFeasiblePlan { rejected: Vec<RejectedCandidate> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBalance {
    /// `pp + 1` cut positions over the (padded) layer list.
    pub stage_boundaries: Vec<usize>,
    pub identity_layers_inserted: usize,
    pub bottleneck_cost: f64,
    /// Real layers `[start, end)` held by each stage.
    pub stage_layers: Vec<(usize, usize)>,
}

fn segment_sum(costs: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in costs {
        s += c;
    }
    s
}

fn check_costs(costs: &[f64], pp: usize) -> Result<(), PlanError> {
    if pp == 0 {
        return Err(PlanError::InvalidArgument("pp must be >= 1".into()));
    }
    if costs.is_empty() {
        return Err(PlanError::InvalidArgument("layer costs are empty".into()));
    }
    if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(PlanError::InvalidArgument("layer costs must be finite and non-negative".into()));
    }
    if pp > costs.len() {
        return Err(PlanError::TooManyStages { pp, layers: costs.len() });
    }
    Ok(())
}

/// Fewest stages whose sums stay within `limit`, greedily from the left,
/// returned as stage start indices. `None` if a single layer exceeds it.
fn greedy_starts(costs: &[f64], limit: f64) -> Option<Vec<usize>> {
    let mut starts = vec![0];
    let mut acc = 0.0;
    for (i, &c) in costs.iter().enumerate() {
        if c > limit {
            return None;
        }
        if i > 0 && acc + c > limit {
            starts.push(i);
            acc = 0.0;
        }
        acc += c;
    }
    Some(starts)
}

/// Partitions `costs` into `pp` contiguous stages.
///
/// With `uniform_count = false` the maximum stage sum is minimized exactly:
/// the optimum is one of the contiguous segment sums, so a binary search over
/// the sorted candidates with a greedy feasibility test finds it. With
/// `uniform_count = true` every stage is padded with identity layers (at its
/// tail) up to `ceil(n / pp)` slots, and the real-layer split minimizing the
/// bottleneck under that per-stage capacity is found by dynamic programming.
pub fn balance_stages(costs: &[f64], pp: usize, uniform_count: bool) -> Result<StageBalance, PlanError> {
    check_costs(costs, pp)?;
    if uniform_count {
        return balance_uniform(costs, pp);
    }
    let n = costs.len();
    let mut candidates = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        let mut s = 0.0;
        for c in &costs[i..] {
            s += c;
            candidates.push(s);
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let fits = |b: f64| greedy_starts(costs, b).is_some_and(|s| s.len() <= pp);
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fits(candidates[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut starts = greedy_starts(costs, candidates[lo]).expect("largest candidate always fits");
    // Reach exactly pp non-empty stages by splitting multi-layer stages;
    // a piece of a stage never costs more than the stage.
    while starts.len() < pp {
        let ends: Vec<usize> = starts.iter().skip(1).copied().chain([n]).collect();
        let k = (0..starts.len()).find(|&k| ends[k] - starts[k] >= 2).expect("pp <= n");
        starts.insert(k + 1, ends[k] - 1);
    }
    let mut boundaries = starts.clone();
    boundaries.push(n);
    let stage_layers: Vec<(usize, usize)> = boundaries.windows(2).map(|w| (w[0], w[1])).collect();
    let bottleneck_cost = stage_layers.iter().map(|&(a, b)| segment_sum(&costs[a..b])).fold(0.0, f64::max);
    Ok(StageBalance { stage_boundaries: boundaries, identity_layers_inserted: 0, bottleneck_cost, stage_layers })
}

fn balance_uniform(costs: &[f64], pp: usize) -> Result<StageBalance, PlanError> {
    let n = costs.len();
    let slots = n.div_ceil(pp);
    let identities = slots * pp - n;
    // best[k][i]: min bottleneck placing layers 0..i into k stages of 1..=slots layers.
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; n + 1]; pp + 1];
    let mut from = vec![vec![usize::MAX; n + 1]; pp + 1];
    best[0][0] = 0.0;
    for k in 1..=pp {
        for i in k..=n {
            for len in 1..=slots.min(i) {
                let j = i - len;
                if best[k - 1][j] == inf {
                    continue;
                }
                let v = best[k - 1][j].max(segment_sum(&costs[j..i]));
                if v < best[k][i] {
                    best[k][i] = v;
                    from[k][i] = j;
                }
            }
        }
    }
    let mut cuts = vec![n];
    let mut i = n;
    for k in (1..=pp).rev() {
        i = from[k][i];
        cuts.push(i);
    }
    cuts.reverse();
    let stage_layers: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    Ok(StageBalance {
        stage_boundaries: (0..=pp).map(|k| k * slots).collect(),
        identity_layers_inserted: identities,
        bottleneck_cost: best[pp][n],
        stage_layers,
    })
}

/// O(n² · pp) dynamic program for the unconstrained min-max partition; used
/// as an independent cross-check of [`balance_stages`].
pub fn min_bottleneck_dp(costs: &[f64], pp: usize) -> Result<f64, PlanError> {
    check_costs(costs, pp)?;
    let n = costs.len();
    let mut best = vec![vec![f64::INFINITY; n + 1]; pp + 1];
    best[0][0] = 0.0;
    for k in 1..=pp {
        for i in k..=n {
            for j in (k - 1)..i {
                let v = best[k - 1][j].max(segment_sum(&costs[j..i]));
                if v < best[k][i] {
                    best[k][i] = v;
                }
            }
        }
    }
    Ok(best[pp][n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanDims {
    pub tp: usize,
    pub pp: usize,
    pub cp: usize,
    pub dp: usize,
}

impl PlanDims {
    pub fn gpus(&self) -> usize {
        self.tp * self.pp * self.cp * self.dp
    }
}

/// Optimizer storage: `state_multiplier` copies of each parameter at
/// `precision` (default FP32 master weights plus two Adam moments).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerLayout {
    pub precision: Precision,
    pub state_multiplier: u64,
}

impl Default for OptimizerLayout {
    fn default() -> Self {
        Self { precision: Precision::Fp32, state_multiplier: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRequest {
    pub total_params: u64,
    /// Per-layer parameter counts; empty means spread evenly over stages.
    pub layer_params: Vec<u64>,
    pub dims: PlanDims,
    /// Activation bytes one micro-batch leaves on one stage, before
    /// sequence/context sharding.
    pub microbatch_activation_bytes: u64,
    pub precision_weights: Precision,
    pub optimizer: OptimizerLayout,
    pub sequence_parallel: bool,
    /// In-flight micro-batches per pipeline stage count (1 for 1F1B fill).
    pub schedule_multiplier: u64,
    pub gpu_memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub stage_params: u64,
    pub microbatches_in_flight: u64,
    pub weights: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub total: u64,
}

/// Parameters held by the heaviest stage; non-layer parameters sit on stage 0.
fn heaviest_stage_params(total: u64, layer_params: &[u64], stages: &[(usize, usize)]) -> u64 {
    let layer_total: u64 = layer_params.iter().sum();
    let extra = total.saturating_sub(layer_total);
    stages
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| layer_params[a..b].iter().sum::<u64>() + if k == 0 { extra } else { 0 })
        .max()
        .unwrap_or(0)
}

fn div_ceil_u128(a: u128, b: u128) -> u64 {
    a.div_ceil(b) as u64
}

pub fn plan_memory(req: &MemoryRequest) -> Result<MemoryBreakdown, PlanError> {
    let d = req.dims;
    if d.tp == 0 || d.pp == 0 || d.cp == 0 || d.dp == 0 {
        return Err(PlanError::InvalidArgument("plan dimensions must be positive".into()));
    }
    if req.total_params == 0 || req.schedule_multiplier == 0 {
        return Err(PlanError::InvalidArgument("total_params and schedule_multiplier must be positive".into()));
    }
    let stage_params = if req.layer_params.is_empty() {
        req.total_params.div_ceil(d.pp as u64)
    } else {
        let costs: Vec<f64> = req.layer_params.iter().map(|&p| p as f64).collect();
        let bal = balance_stages(&costs, d.pp, true)?;
        heaviest_stage_params(req.total_params, &req.layer_params, &bal.stage_layers)
    };
    let tp = d.tp as u128;
    let weights = div_ceil_u128(stage_params as u128 * req.precision_weights.bytes_per_element() as u128, tp);
    let optimizer = div_ceil_u128(
        stage_params as u128 * req.optimizer.precision.bytes_per_element() as u128 * req.optimizer.state_multiplier as u128,
        tp,
    );
    let microbatches_in_flight = d.pp as u64 * req.schedule_multiplier;
    let act_div = if req.sequence_parallel { tp } else { 1 } * d.cp as u128;
    let activations = div_ceil_u128(req.microbatch_activation_bytes as u128 * microbatches_in_flight as u128, act_div);
    let total = weights + optimizer + activations;
    for (component, required) in [("weights", weights), ("optimizer", optimizer), ("activations", activations), ("total", total)] {
        if required > req.gpu_memory {
            return Err(PlanError::OutOfMemory { component: component.into(), required, budget: req.gpu_memory });
        }
    }
    Ok(MemoryBreakdown { stage_params, microbatches_in_flight, weights, optimizer, activations, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterShape {
    pub n_nodes: usize,
    pub gpus_per_node: usize,
    pub gpu_memory: u64,
    pub cpu_memory_per_node: u64,
}

impl ClusterShape {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_nodes == 0 || self.gpus_per_node == 0 || self.gpu_memory == 0 || self.cpu_memory_per_node == 0 {
            return Err(PlanError::InvalidArgument("cluster shape fields must be positive".into()));
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> usize {
        self.n_nodes * self.gpus_per_node
    }
}

/// Per-layer profile of the model being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub layer_params: Vec<u64>,
    /// Per-layer cost used to rank stage balance; defaults to parameters.
    #[serde(default)]
    pub layer_costs: Vec<f64>,
    /// Parameters outside the layer stack (embeddings, head).
    #[serde(default)]
    pub extra_params: u64,
    pub activation_bytes_per_layer: u64,
}

impl ArchProfile {
    pub fn total_params(&self) -> u64 {
        self.layer_params.iter().sum::<u64>() + self.extra_params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Fewest pipeline stages, then lowest bottleneck, then most headroom.
    #[default]
    MinPipeline,
    /// Most activation headroom, then fewest stages.
    MaxHeadroom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchOptions {
    pub precision_weights: Precision,
    pub optimizer: OptimizerLayout,
    pub sequence_parallel: bool,
    pub schedule_multiplier: u64,
    pub objective: Objective,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            precision_weights: Precision::Bf16,
            optimizer: OptimizerLayout::default(),
            sequence_parallel: true,
            schedule_multiplier: 1,
            objective: Objective::MinPipeline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub tp: usize,
    pub pp: usize,
    pub cp: usize,
    pub dp: usize,
    pub stage_boundaries: Vec<usize>,
    pub identity_layers_inserted: usize,
    pub microbatches_in_flight: u64,
    pub per_gpu_memory: MemoryBreakdown,
    pub bottleneck_cost: f64,
    /// GPU memory left after everything else is placed.
    pub headroom: u64,
}

impl ParallelismPlan {
    pub fn dims(&self) -> PlanDims {
        PlanDims { tp: self.tp, pp: self.pp, cp: self.cp, dp: self.dp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub dims: PlanDims,
    pub component: String,
    pub required: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ParallelismPlan,
    /// Every feasible plan, best first.
    pub feasible: Vec<ParallelismPlan>,
    pub rejected: Vec<RejectedCandidate>,
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn evaluate(
    profile: &ArchProfile,
    cluster: &ClusterShape,
    opts: &SearchOptions,
    dims: PlanDims,
    balance: &StageBalance,
) -> Result<ParallelismPlan, RejectedCandidate> {
    let reject = |component: &str, required: u64, budget: u64| RejectedCandidate {
        dims,
        component: component.to_string(),
        required,
        budget,
    };
    let max_layers = balance.stage_layers.iter().map(|(a, b)| b - a).max().unwrap_or(0) as u64;
    let req = MemoryRequest {
        total_params: profile.total_params(),
        layer_params: profile.layer_params.clone(),
        dims,
        microbatch_activation_bytes: profile.activation_bytes_per_layer * max_layers,
        precision_weights: opts.precision_weights,
        optimizer: opts.optimizer,
        sequence_parallel: opts.sequence_parallel,
        schedule_multiplier: opts.schedule_multiplier,
        gpu_memory: cluster.gpu_memory,
    };
    let mem = match plan_memory(&req) {
        Ok(m) => m,
        Err(PlanError::OutOfMemory { component, required, budget }) => return Err(reject(&component, required, budget)),
        Err(e) => return Err(reject(&e.to_string(), 0, 0)),
    };
    // Checkpoint staging gathers every local GPU's shard into host memory.
    let cpu = (mem.weights + mem.optimizer).saturating_mul(cluster.gpus_per_node as u64);
    if cpu > cluster.cpu_memory_per_node {
        return Err(reject("cpu_checkpoint", cpu, cluster.cpu_memory_per_node));
    }
    Ok(ParallelismPlan {
        tp: dims.tp,
        pp: dims.pp,
        cp: dims.cp,
        dp: dims.dp,
        stage_boundaries: balance.stage_boundaries.clone(),
        identity_layers_inserted: balance.identity_layers_inserted,
        microbatches_in_flight: mem.microbatches_in_flight,
        headroom: cluster.gpu_memory - mem.total,
        per_gpu_memory: mem,
        bottleneck_cost: balance.bottleneck_cost,
    })
}

/// Enumerates every (tp, pp, cp, dp) whose product is the cluster's GPU
/// count, with tp dividing the GPUs of one node and pp at most the layer
/// count, keeps the memory-feasible ones and ranks them by the objective.
pub fn search_parallelism(
    profile: &ArchProfile,
    cluster: &ClusterShape,
    opts: &SearchOptions,
) -> Result<SearchOutcome, PlanError> {
    cluster.validate()?;
    let n = profile.layer_params.len();
    if n == 0 || profile.activation_bytes_per_layer == 0 && profile.total_params() == 0 {
        return Err(PlanError::InvalidArgument("empty profile".into()));
    }
    let costs: Vec<f64> = if profile.layer_costs.is_empty() {
        profile.layer_params.iter().map(|&p| p as f64).collect()
    } else if profile.layer_costs.len() == n {
        profile.layer_costs.clone()
    } else {
        return Err(PlanError::InvalidArgument("layer_costs and layer_params differ in length".into()));
    };
    let g = cluster.total_gpus();
    let mut feasible = Vec::new();
    let mut rejected = Vec::new();
    for pp in divisors(g).into_iter().filter(|&pp| pp <= n) {
        let balance = balance_stages(&costs, pp, true)?;
        for tp in divisors(cluster.gpus_per_node) {
            if (g / pp) % tp != 0 {
                continue;
            }
            for cp in divisors(g / pp / tp) {
                let dp = g / pp / tp / cp;
                let dims = PlanDims { tp, pp, cp, dp };
                match evaluate(profile, cluster, opts, dims, &balance) {
                    Ok(p) => feasible.push(p),
                    Err(r) => rejected.push(r),
                }
            }
        }
    }
    let rank = |a: &ParallelismPlan, b: &ParallelismPlan| {
        let tail = |a: &ParallelismPlan, b: &ParallelismPlan| (a.tp, a.cp, a.dp).cmp(&(b.tp, b.cp, b.dp));
        match opts.objective {
            Objective::MinPipeline => a
                .pp
                .cmp(&b.pp)
                .then(a.bottleneck_cost.total_cmp(&b.bottleneck_cost))
                .then(b.headroom.cmp(&a.headroom))
                .then_with(|| tail(a, b)),
            Objective::MaxHeadroom => b.headroom.cmp(&a.headroom).then(a.pp.cmp(&b.pp)).then_with(|| tail(a, b)),
        }
    };
    feasible.sort_by(rank);
    match feasible.first() {
        Some(best) => Ok(SearchOutcome { best: best.clone(), feasible, rejected }),
        None => Err(PlanError::NoFeasiblePlan { rejected }),
    }
}
