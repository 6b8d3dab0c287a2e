//! RL data machinery: pass-rate filtering, Gaussian progressive batching,
//! group-relative advantages and the format/toggle reward.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const REASONING_ON: &str = "detailed thinking on";
pub const REASONING_OFF: &str = "detailed thinking off";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("invalid record {prompt_id}: {reason}")]
    InvalidRecord { prompt_id: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient samples: need {needed}, have {available} ({})", fmt_levels(.per_level))]
    Insufficient { needed: usize, available: usize, per_level: Vec<LevelCount> },
    #[error("unknown reasoning toggle {0:?}")]
    UnknownToggle(String),
}

fn fmt_levels(levels: &[LevelCount]) -> String {
    levels.iter().map(|l| format!("{}: {}", l.level, l.remaining)).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCount {
    pub level: f64,
    pub remaining: usize,
}

/// Outcome of sampling `attempts` responses for one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRateRecord {
    pub prompt_id: String,
    pub successes: u32,
    pub attempts: u32,
}

impl PassRateRecord {
    pub fn new(prompt_id: impl Into<String>, successes: u32, attempts: u32) -> Result<Self, CurriculumError> {
        let r = Self { prompt_id: prompt_id.into(), successes, attempts };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |reason: &str| CurriculumError::InvalidRecord { prompt_id: self.prompt_id.clone(), reason: reason.into() };
        if self.attempts == 0 {
            return Err(bad("attempts must be positive"));
        }
        if self.successes > self.attempts {
            return Err(bad("successes exceed attempts"));
        }
        Ok(())
    }

    pub fn pass_rate(&self) -> f64 {
        self.successes as f64 / self.attempts as f64
    }
}

/// Parses `prompt_id, k, n` lines. Blank lines and `#` comments are skipped.
pub fn parse_records(text: &str) -> Result<Vec<PassRateRecord>, CurriculumError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |reason: String| CurriculumError::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(perr(format!("expected 3 comma-separated fields, got {}", fields.len())));
        }
        let k = fields[1].parse::<u32>().map_err(|e| perr(format!("successes: {e}")))?;
        let n = fields[2].parse::<u32>().map_err(|e| perr(format!("attempts: {e}")))?;
        let rec = PassRateRecord { prompt_id: fields[0].to_string(), successes: k, attempts: n };
        rec.validate().map_err(|e| perr(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Keeps records whose pass rate is strictly below `threshold`, in order.
pub fn filter_prompts(records: &[PassRateRecord], threshold: f64) -> Vec<PassRateRecord> {
    records.iter().filter(|r| r.pass_rate() < threshold).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTarget {
    pub mean: f64,
    pub sigma: f64,
    /// Normalized weight per level, aligned with the level list.
    pub weights: Vec<f64>,
}

/// Per-batch Gaussian weights over pass-rate levels, the mean moving
/// linearly from `start_level` to `end_level`.
pub fn gaussian_targets(
    n_batches: usize,
    levels: &[f64],
    start_level: f64,
    end_level: f64,
    sigma: f64,
) -> Result<Vec<BatchTarget>, CurriculumError> {
    if levels.is_empty() {
        return Err(CurriculumError::InvalidArgument("levels are empty".into()));
    }
    if levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(CurriculumError::InvalidArgument("levels must be sorted ascending".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CurriculumError::InvalidArgument("sigma must be positive".into()));
    }
    if n_batches == 0 {
        return Err(CurriculumError::InvalidArgument("n_batches must be >= 1".into()));
    }
    Ok((0..n_batches)
        .map(|b| {
            let mean = if n_batches == 1 {
                start_level
            } else {
                start_level + (end_level - start_level) * (b as f64 / (n_batches - 1) as f64)
            };
            // Shift exponents by the nearest level's so the peak is exp(0) = 1
            // and tiny sigmas cannot underflow every weight.
            let sq: Vec<f64> = levels.iter().map(|l| (l - mean).powi(2)).collect();
            let min_sq = sq.iter().cloned().fold(f64::INFINITY, f64::min);
            let raw: Vec<f64> = sq.iter().map(|s| (-(s - min_sq) / (2.0 * sigma * sigma)).exp()).collect();
            let z: f64 = raw.iter().sum();
            BatchTarget { mean, sigma, weights: raw.into_iter().map(|w| w / z).collect() }
        })
        .collect())
}

/// Largest-remainder rounding of `weights * total` to integers summing to `total`.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub batch_size: usize,
    pub n_batches: usize,
    pub sigma: f64,
    /// Mean of the first batch; defaults to the easiest populated level.
    pub start_level: Option<f64>,
    /// Mean of the last batch; defaults to the hardest populated level.
    pub end_level: Option<f64>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { batch_size: 32, n_batches: 8, sigma: 0.15, start_level: None, end_level: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumBatch {
    pub target: BatchTarget,
    /// Samples drawn per level, aligned with [`CurriculumPlan::levels`].
    pub level_counts: Vec<usize>,
    pub prompt_ids: Vec<String>,
    pub mean_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub levels: Vec<f64>,
    pub batch_size: usize,
    pub batches: Vec<CurriculumBatch>,
}

impl CurriculumPlan {
    /// Least-squares slope of batch mean pass rate over batch index.
    pub fn difficulty_slope(&self) -> f64 {
        regression_slope(&self.batches.iter().map(|b| b.mean_pass_rate).collect::<Vec<_>>())
    }
}

pub fn regression_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        num += (i as f64 - mx) * (y - my);
        den += (i as f64 - mx).powi(2);
    }
    num / den
}

/// Level grid for a pool: every `k/n` when all records share `n`, otherwise
/// the distinct pass rates present. Values are exact rationals keyed by
/// `(k, n)` reduced to lowest terms.
fn level_grid(records: &[PassRateRecord]) -> Vec<(u32, u32)> {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    let reduce = |k: u32, n: u32| {
        let g = gcd(k, n).max(1);
        (k / g, n / g)
    };
    let mut set: Vec<(u32, u32)> = match records.first() {
        Some(f) if records.iter().all(|r| r.attempts == f.attempts) => {
            (0..=f.attempts).map(|k| reduce(k, f.attempts)).collect()
        }
        _ => records.iter().map(|r| reduce(r.successes, r.attempts)).collect(),
    };
    set.sort_by(|a, b| (a.0 as u64 * b.1 as u64).cmp(&(b.0 as u64 * a.1 as u64)));
    set.dedup();
    set
}

/// Builds batches whose pass-rate mix follows the per-batch Gaussian target.
///
/// For each batch in order: the target is apportioned over levels by largest
/// remainder and capped by what each level has left; leftover capacity is
/// filled one sample at a time from the level with the largest remaining
/// pool (lower level on ties). Members are drawn uniformly without
/// replacement and the batch is shuffled. Per-level counts depend only on the
/// pool, never on the seed.
pub fn build_curriculum(
    records: &[PassRateRecord],
    cfg: &CurriculumConfig,
    seed: u64,
) -> Result<CurriculumPlan, CurriculumError> {
    if cfg.batch_size == 0 || cfg.n_batches == 0 {
        return Err(CurriculumError::InvalidArgument("batch_size and n_batches must be positive".into()));
    }
    for r in records {
        r.validate()?;
    }
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.prompt_id.as_str()) {
            return Err(CurriculumError::InvalidRecord { prompt_id: r.prompt_id.clone(), reason: "duplicate prompt id".into() });
        }
    }
    let grid = level_grid(records);
    let levels: Vec<f64> = grid.iter().map(|&(k, n)| k as f64 / n as f64).collect();
    let index: BTreeMap<(u32, u32), usize> = grid.iter().enumerate().map(|(i, &kn)| (kn, i)).collect();
    let mut pools: Vec<Vec<&PassRateRecord>> = vec![Vec::new(); levels.len()];
    for r in records {
        let g = {
            let (mut a, mut b) = (r.successes, r.attempts);
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a.max(1)
        };
        pools[index[&(r.successes / g, r.attempts / g)]].push(r);
    }
    let needed = cfg.batch_size * cfg.n_batches;
    if records.len() < needed {
        return Err(CurriculumError::Insufficient {
            needed,
            available: records.len(),
            per_level: levels.iter().zip(&pools).map(|(&level, p)| LevelCount { level, remaining: p.len() }).collect(),
        });
    }
    let populated: Vec<f64> = levels.iter().zip(&pools).filter(|(_, p)| !p.is_empty()).map(|(l, _)| *l).collect();
    let start = cfg.start_level.unwrap_or(*populated.last().expect("non-empty pool"));
    let end = cfg.end_level.unwrap_or(populated[0]);
    let targets = gaussian_targets(cfg.n_batches, &levels, start, end, cfg.sigma)?;

    let mut rng = seed::rng(seed);
    let mut remaining: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    // Shuffle each pool once; drawing from the front is then uniform without replacement.
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; levels.len()];
    let mut batches = Vec::with_capacity(cfg.n_batches);
    for target in targets {
        let mut counts: Vec<usize> = apportion(&target.weights, cfg.batch_size)
            .into_iter()
            .zip(&remaining)
            .map(|(want, &have)| want.min(have))
            .collect();
        let mut filled: usize = counts.iter().sum();
        while filled < cfg.batch_size {
            let (li, _) = remaining
                .iter()
                .zip(&counts)
                .enumerate()
                .map(|(i, (r, c))| (i, r - c))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("levels non-empty");
            counts[li] += 1;
            filled += 1;
        }
        let mut members: Vec<&PassRateRecord> = Vec::with_capacity(cfg.batch_size);
        for (li, &c) in counts.iter().enumerate() {
            members.extend_from_slice(&pools[li][cursor[li]..cursor[li] + c]);
            cursor[li] += c;
            remaining[li] -= c;
        }
        members.shuffle(&mut rng);
        let mean_pass_rate = members.iter().map(|r| r.pass_rate()).sum::<f64>() / members.len() as f64;
        batches.push(CurriculumBatch {
            target,
            level_counts: counts,
            prompt_ids: members.iter().map(|r| r.prompt_id.clone()).collect(),
            mean_pass_rate,
        });
    }
    Ok(CurriculumPlan { levels, batch_size: cfg.batch_size, batches })
}

/// Group-relative advantages `(r_i - mean) / (std_pop + eps)`, re-centered
/// so the outputs average to zero to working precision.
pub fn grpo_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, CurriculumError> {
    if rewards.len() < 2 {
        return Err(CurriculumError::InvalidArgument("a group needs at least 2 rewards".into()));
    }
    if !(epsilon > 0.0) {
        return Err(CurriculumError::InvalidArgument("epsilon must be positive".into()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(CurriculumError::InvalidArgument("rewards must be finite".into()));
    }
    let m = rewards.len() as f64;
    // Work with offsets from the first reward so a constant shift of every
    // reward cancels before any rounding happens.
    let offs: Vec<f64> = rewards.iter().map(|r| r - rewards[0]).collect();
    let mean = offs.iter().sum::<f64>() / m;
    let dev: Vec<f64> = offs.iter().map(|o| o - mean).collect();
    let std = (dev.iter().map(|d| d * d).sum::<f64>() / m).sqrt();
    let mut adv: Vec<f64> = dev.iter().map(|d| d / (std + epsilon)).collect();
    let drift = adv.iter().sum::<f64>() / m;
    if drift != 0.0 {
        for a in adv.iter_mut() {
            *a -= drift;
        }
    }
    Ok(adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningMode {
    ReasoningOn,
    ReasoningOff,
}

impl ReasoningMode {
    /// Byte-exact match against the two toggle strings.
    pub fn from_system_prompt(s: &str) -> Result<Self, CurriculumError> {
        match s {
            REASONING_ON => Ok(ReasoningMode::ReasoningOn),
            REASONING_OFF => Ok(ReasoningMode::ReasoningOff),
            other => Err(CurriculumError::UnknownToggle(other.to_string())),
        }
    }

    pub fn system_prompt(self) -> &'static str {
        match self {
            ReasoningMode::ReasoningOn => REASONING_ON,
            ReasoningMode::ReasoningOff => REASONING_OFF,
        }
    }
}

/// 1 when the response follows the tag discipline of `mode`, else 0.
pub fn format_reward(response: &str, mode: ReasoningMode) -> u8 {
    let opens = response.matches(THINK_OPEN).count();
    let closes = response.matches(THINK_CLOSE).count();
    let ok = match mode {
        ReasoningMode::ReasoningOff => opens == 0 && closes == 0,
        ReasoningMode::ReasoningOn => {
            opens == 1 && closes == 1 && {
                let o = response.find(THINK_OPEN).unwrap();
                let c = response.find(THINK_CLOSE).unwrap();
                o < c && !response[o + THINK_OPEN.len()..c].trim().is_empty()
            }
        }
    };
    ok as u8
}

/// The part of a response a verifier should judge: text after the closing
/// think tag when present, otherwise the whole response.
pub fn final_answer(response: &str) -> &str {
    match response.rfind(THINK_CLOSE) {
        Some(i) => response[i + THINK_CLOSE.len()..].trim(),
        None => response.trim(),
    }
}

/// Pluggable accuracy check.
pub trait Verifier {
    fn verify(&self, answer: &str, reference: &str) -> bool;
}

/// Exact match after trimming surrounding whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl Verifier for ExactMatch {
    fn verify(&self, answer: &str, reference: &str) -> bool {
        answer.trim() == reference.trim()
    }
}

/// Numeric equality within an absolute-or-relative tolerance.
#[derive(Debug, Clone, Copy)]
pub struct NumericEquality {
    pub tolerance: f64,
}

impl Default for NumericEquality {
    fn default() -> Self {
        Self { tolerance: 1e-9 }
    }
}

impl Verifier for NumericEquality {
    fn verify(&self, answer: &str, reference: &str) -> bool {
        match (answer.trim().parse::<f64>(), reference.trim().parse::<f64>()) {
            (Ok(a), Ok(b)) => (a - b).abs() <= self.tolerance * b.abs().max(1.0),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub accuracy_reward: u8,
    pub format_reward: u8,
    pub mode: ReasoningMode,
}

pub fn score_response(
    system_prompt: &str,
    response: &str,
    reference: &str,
    verifier: &dyn Verifier,
) -> Result<RewardOutcome, CurriculumError> {
    let mode = ReasoningMode::from_system_prompt(system_prompt)?;
    Ok(RewardOutcome {
        accuracy_reward: verifier.verify(final_answer(response), reference) as u8,
        format_reward: format_reward(response, mode),
        mode,
    })
}

/// Synthetic pool: `count` prompts with binomially distributed successes
/// around a per-prompt difficulty drawn uniformly.
pub fn synthetic_records(count: usize, attempts: u32, seed: u64) -> Vec<PassRateRecord> {
    use rand::Rng;
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|i| {
            let p: f64 = rng.random();
            let k = (0..attempts).filter(|_| rng.random::<f64>() < p).count() as u32;
            PassRateRecord { prompt_id: format!("p{i:05}"), successes: k, attempts }
        })
        .collect()
}
