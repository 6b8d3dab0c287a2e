//! FFN fusion: runs of consecutive attention-free blocks become one wider FFN.
//!
//! Fused semantics is the parallel sum `x + Σ_i FFN_i(norm(x))` with one
//! shared input normalization. Concatenating the members' `w1` along the
//! hidden axis and stacking their `w2` realizes that sum as a single FFN,
//! so the identity below holds exactly in exact arithmetic:
//!
//! `x + act(norm(x) · [W1_1 | … | W1_k]) · [W2_1; …; W2_k] = x + Σ_i FFN_i(norm(x))`
//!
//! Replacing the original sequential blocks by the parallel form is an
//! approximation of the source network; reports flag every fused run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block_library::{Activation, FfnWeights, RmsNorm};
use crate::linalg::Matrix;
use crate::search::PuzzleSolution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("member {member} (layer {layer}): {reason}")]
    MemberShape { member: usize, layer: usize, reason: String },
    #[error("stale run starting at layer {start}: {reason}")]
    StaleRun { start: usize, reason: String },
    #[error("runs overlap at layer {0}")]
    Overlap(usize),
}

/// A maximal run of at least two attention-free FFN blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusableRun {
    pub start_layer: usize,
    pub length: usize,
    /// FFN parameter count of each member, in layer order.
    pub member_params: Vec<u64>,
}

impl FusableRun {
    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start_layer..self.start_layer + self.length
    }
}

/// A layer span already replaced by a fused block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedSpan {
    pub start_layer: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRunReport {
    pub start_layer: usize,
    pub length: usize,
    pub latency_before: f64,
    pub latency_after: f64,
    /// Sequential-to-parallel rewriting changes the network's function.
    pub approximation: bool,
}

/// Appended to a solution when fusion has been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub runs: Vec<FusedRunReport>,
    pub spans: Vec<FusedSpan>,
    pub depth_before: usize,
    pub depth_after: usize,
    pub latency_before: f64,
    pub latency_after: f64,
    /// One normalization feeds every member of a fused block.
    pub shared_normalization: bool,
    /// Max relative deviation of the fused block from the parallel-sum form,
    /// per run, when weights were available to check.
    #[serde(default)]
    pub equivalence_residuals: Vec<f64>,
}

fn fused_layers(solution: &PuzzleSolution) -> Vec<bool> {
    let mut out = vec![false; solution.n_layers];
    if let Some(r) = &solution.fusion {
        for s in &r.spans {
            for l in s.start_layer..s.start_layer + s.length {
                out[l] = true;
            }
        }
    }
    out
}

/// All maximal runs of length ≥ 2 in layer order. Layers already fused are
/// treated as boundaries.
pub fn find_fusable_runs(solution: &PuzzleSolution) -> Vec<FusableRun> {
    let fused = fused_layers(solution);
    let eligible: Vec<bool> = solution
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| b.spec.is_attention_free_ffn() && !fused[l])
        .collect();
    let mut runs = Vec::new();
    let mut l = 0;
    while l < eligible.len() {
        if !eligible[l] {
            l += 1;
            continue;
        }
        let start = l;
        while l < eligible.len() && eligible[l] {
            l += 1;
        }
        if l - start >= 2 {
            runs.push(FusableRun {
                start_layer: start,
                length: l - start,
                member_params: solution.blocks[start..l].iter().map(|b| b.cost.params).collect(),
            });
        }
    }
    runs
}

/// One wide FFN standing in for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedBlock {
    /// d_model × Σ hidden_i
    pub w1: Matrix,
    /// Σ hidden_i × d_model
    pub w2: Matrix,
    pub member_layers: Vec<usize>,
    pub member_hidden: Vec<usize>,
}

impl FusedBlock {
    pub fn hidden(&self) -> usize {
        self.w1.cols
    }

    /// `x + act(norm(x) · w1) · w2`.
    pub fn forward(&self, norm: &RmsNorm, act: Activation, x: &[f64]) -> Vec<f64> {
        let f = FfnWeights { w1: self.w1.clone(), w2: self.w2.clone() }.forward(&norm.apply(x), act);
        x.iter().zip(f).map(|(a, b)| a + b).collect()
    }
}

pub fn fuse_run(run: &FusableRun, members: &[FfnWeights]) -> Result<FusedBlock, FusionError> {
    if members.len() != run.length {
        return Err(FusionError::StaleRun {
            start: run.start_layer,
            reason: format!("{} member weights for a run of length {}", members.len(), run.length),
        });
    }
    let d = members[0].d_model();
    for (i, m) in members.iter().enumerate() {
        let layer = run.start_layer + i;
        let shape_err = |reason: String| FusionError::MemberShape { member: i, layer, reason };
        if m.d_model() != d || m.w2.cols != d {
            return Err(shape_err(format!("d_model {} differs from {d}", m.d_model())));
        }
        if m.w1.cols != m.w2.rows {
            return Err(shape_err(format!("w1 has {} hidden units but w2 has {}", m.w1.cols, m.w2.rows)));
        }
        let params = 2 * (d * m.hidden()) as u64;
        if run.member_params.get(i) != Some(&params) {
            return Err(shape_err(format!(
                "weights hold {params} parameters, run expects {:?}",
                run.member_params.get(i)
            )));
        }
    }
    let w1s: Vec<&Matrix> = members.iter().map(|m| &m.w1).collect();
    let w2s: Vec<&Matrix> = members.iter().map(|m| &m.w2).collect();
    Ok(FusedBlock {
        w1: Matrix::hcat(&w1s).expect("row counts checked"),
        w2: Matrix::vcat(&w2s).expect("column counts checked"),
        member_layers: run.layers().collect(),
        member_hidden: members.iter().map(|m| m.hidden()).collect(),
    })
}

/// Reference form `x + Σ_i FFN_i(norm(x))`.
pub fn parallel_sum(members: &[FfnWeights], norm: &RmsNorm, act: Activation, x: &[f64]) -> Vec<f64> {
    let z = norm.apply(x);
    let mut out = x.to_vec();
    for m in members {
        for (o, f) in out.iter_mut().zip(m.forward(&z, act)) {
            *o += f;
        }
    }
    out
}

/// Max over inputs of `|fused - reference|_∞ / max(|reference|_∞, 1e-300)`.
pub fn equivalence_residual(
    fused: &FusedBlock,
    members: &[FfnWeights],
    norm: &RmsNorm,
    act: Activation,
    inputs: &[Vec<f64>],
) -> f64 {
    inputs
        .iter()
        .map(|x| {
            let a = fused.forward(norm, act, x);
            let b = parallel_sum(members, norm, act, x);
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            diff / scale
        })
        .fold(0.0, f64::max)
}

/// Latency of a run executed as one parallel block: the slowest member's
/// compute plus one streaming pass over all members' weights.
fn fused_latency(solution: &PuzzleSolution, start: usize, length: usize) -> f64 {
    let cm = &solution.cost_model;
    let members = &solution.blocks[start..start + length];
    let compute = members.iter().map(|b| cm.compute_time(b.cost.flops_per_token)).fold(0.0, f64::max);
    let bytes: u64 = members.iter().map(|b| b.cost.weight_bytes).sum();
    compute + cm.streaming_time(bytes)
}

fn validate_run(solution: &PuzzleSolution, fused: &[bool], run: &FusableRun) -> Result<(), FusionError> {
    let stale = |reason: &str| FusionError::StaleRun { start: run.start_layer, reason: reason.to_string() };
    let n = solution.n_layers;
    if run.length < 2 {
        return Err(stale("length must be at least 2"));
    }
    if run.start_layer + run.length > n {
        return Err(stale("extends past the last layer"));
    }
    for l in run.layers() {
        if fused[l] {
            return Err(stale("layer already fused"));
        }
        if !solution.blocks[l].spec.is_attention_free_ffn() {
            return Err(stale("member keeps attention or has no FFN"));
        }
    }
    let eligible = |l: usize| solution.blocks[l].spec.is_attention_free_ffn() && !fused[l];
    if (run.start_layer > 0 && eligible(run.start_layer - 1)) || (run.layers().end < n && eligible(run.layers().end)) {
        return Err(stale("run is not maximal"));
    }
    let params: Vec<u64> = solution.blocks[run.layers()].iter().map(|b| b.cost.params).collect();
    if params != run.member_params {
        return Err(stale("member shapes do not match the solution"));
    }
    Ok(())
}

/// Replaces each run with one fused block and recomputes depth and latency.
/// Parameters and quality loss are unchanged.
pub fn apply_fusion(solution: &PuzzleSolution, runs: &[FusableRun]) -> Result<PuzzleSolution, FusionError> {
    if runs.is_empty() {
        return Ok(solution.clone());
    }
    let mut fused = fused_layers(solution);
    let mut sorted: Vec<&FusableRun> = runs.iter().collect();
    sorted.sort_by_key(|r| r.start_layer);
    for w in sorted.windows(2) {
        if w[1].start_layer < w[0].start_layer + w[0].length {
            return Err(FusionError::Overlap(w[1].start_layer));
        }
    }
    for r in &sorted {
        validate_run(solution, &fused, r)?;
    }

    let mut out = solution.clone();
    let mut report = solution.fusion.clone().unwrap_or(FusionReport {
        runs: Vec::new(),
        spans: Vec::new(),
        depth_before: solution.depth,
        depth_after: solution.depth,
        latency_before: solution.cost.latency_per_token,
        latency_after: solution.cost.latency_per_token,
        shared_normalization: true,
        equivalence_residuals: Vec::new(),
    });
    for r in &sorted {
        for l in r.layers() {
            fused[l] = true;
        }
        let mut before = 0.0;
        for b in &solution.blocks[r.layers()] {
            before += b.cost.latency_per_token;
        }
        report.runs.push(FusedRunReport {
            start_layer: r.start_layer,
            length: r.length,
            latency_before: before,
            latency_after: fused_latency(solution, r.start_layer, r.length),
            approximation: true,
        });
        report.spans.push(FusedSpan { start_layer: r.start_layer, length: r.length });
    }
    report.spans.sort_by_key(|s| s.start_layer);
    report.runs.sort_by_key(|s| s.start_layer);

    // Total latency in layer order, each span contributing once.
    let mut latency = 0.0;
    let mut l = 0;
    let mut spans = report.spans.iter().peekable();
    while l < solution.n_layers {
        match spans.peek() {
            Some(s) if s.start_layer == l => {
                latency += fused_latency(solution, s.start_layer, s.length);
                l += s.length;
                spans.next();
            }
            _ => {
                latency += solution.blocks[l].cost.latency_per_token;
                l += 1;
            }
        }
    }
    let removed: usize = report.spans.iter().map(|s| s.length - 1).sum();
    out.depth = solution.n_layers - removed;
    if let Some(s) = out.slack.latency.as_mut() {
        let bound = solution.cost.latency_per_token + *s;
        *s = bound - latency;
    }
    out.cost.latency_per_token = latency;
    report.depth_after = out.depth;
    report.latency_after = latency;
    out.fusion = Some(report);
    Ok(out)
}
