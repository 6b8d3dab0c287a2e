//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p archopt --test acceptance`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use archopt::arch_cost::{max_cached_tokens, model_weight_bytes, Precision};
use archopt::block_library::{
    calibration_sets, distill_variant, Activation, CalibrationConfig, DistillHyper, FfnProblem, FfnWeights,
    ParentBlock, RmsNorm,
};
use archopt::ffn_fusion::{apply_fusion, equivalence_residual, find_fusable_runs, fuse_run, FusableRun};
use archopt::linalg::Matrix;
use archopt::pipeline_planner::{
    balance_stages, plan_memory, search_parallelism, ArchProfile, ClusterShape, MemoryRequest, OptimizerLayout,
    PlanDims, SearchOptions,
};
use archopt::rl_curriculum::{
    build_curriculum, filter_prompts, format_reward, gaussian_targets, grpo_advantages, synthetic_records,
    CurriculumConfig, PassRateRecord, ReasoningMode,
};
use archopt::search::{brute_force, pareto_frontier, solve, PuzzleSolution, SearchError, DEFAULT_BRUTE_FORCE_CAP};
use archopt::{BlockVariantSpec, ParentArch};
use rand::Rng;
use rand_distr::StandardNormal;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(u32, &str, Duration, Check); 12] = [
        (1, "memory arithmetic", Duration::from_secs(1), memory_arithmetic),
        (2, "cached-token consistency", Duration::from_secs(1), cached_tokens),
        (3, "solver optimality", Duration::from_secs(60), solver_optimality),
        (4, "pareto monotonicity", Duration::from_secs(30), pareto_monotonicity),
        (5, "fusion equivalence", Duration::from_secs(30), fusion_equivalence),
        (6, "distillation sanity", Duration::from_secs(120), distillation_sanity),
        (7, "stage balancing", Duration::from_secs(30), stage_balancing),
        (8, "parallelism regime", Duration::from_secs(10), parallelism_regime),
        (9, "curriculum properties", Duration::from_secs(30), curriculum_properties),
        (10, "grpo advantages", Duration::from_secs(5), grpo),
        (11, "toggle/format contract", Duration::from_secs(1), toggle_format),
        (12, "end-to-end determinism", Duration::from_secs(300), determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let t0 = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let dt = t0.elapsed();
        let res = match res {
            Ok(detail) if dt > limit => Err(format!("{detail}; runtime {dt:.2?} exceeds {limit:?}")),
            other => other,
        };
        match res {
            Ok(detail) => println!("PASS  {id:>2} {name:<24} {:>8.2?}  {detail}", dt),
            Err(why) => {
                failed += 1;
                println!("FAIL  {id:>2} {name:<24} {:>8.2?}  {why}", dt);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn memory_arithmetic() -> Result<String, String> {
    let total = model_weight_bytes(253_000_000_000, Precision::Bf16);
    ensure!((500e9..=510e9).contains(&(total as f64)), "model bytes {total}");
    let req = MemoryRequest {
        total_params: 253_000_000_000,
        layer_params: vec![],
        dims: PlanDims { tp: 8, pp: 1, cp: 1, dp: 1 },
        microbatch_activation_bytes: 0,
        precision_weights: Precision::Bf16,
        optimizer: OptimizerLayout::default(),
        sequence_parallel: true,
        schedule_multiplier: 1,
        gpu_memory: u64::MAX,
    };
    let per_gpu = plan_memory(&req).map_err(|e| e.to_string())?.weights;
    ensure!((62e9..=64e9).contains(&(per_gpu as f64)), "per-GPU weights {per_gpu}");
    Ok(format!("model {total} B, per-GPU {per_gpu} B at tp=8"))
}

fn cached_tokens() -> Result<String, String> {
    let node: f64 = 640e9;
    let fp8_weights: f64 = 253e9;
    // Invert the FP8 statement for the per-token KV footprint.
    let kv_fp8 = ((node - fp8_weights) / 3e6).round() as u64;
    let fp8 = max_cached_tokens(kv_fp8, node as u64, fp8_weights as u64, 0.0).map_err(|e| e.to_string())?;
    ensure!(fp8 == 3_000_000, "round trip at FP8 gave {fp8}");
    let bf16 = max_cached_tokens(2 * kv_fp8, node as u64, model_weight_bytes(253_000_000_000, Precision::Bf16), 0.0)
        .map_err(|e| e.to_string())?;
    ensure!((450_000..=750_000).contains(&bf16), "BF16 prediction {bf16}");
    Ok(format!("kv {kv_fp8} B/token at FP8, BF16 limit {bf16} tokens (reference 600000)"))
}

fn solver_optimality() -> Result<String, String> {
    let mut rng = common::rng(3);
    let (mut feasible, mut infeasible, mut choice_diffs) = (0, 0, 0);
    for i in 0..200 {
        let n = rng.random_range(1..=10);
        let cat = common::random_catalog(&mut rng, n, 5);
        let c = common::random_constraints(&mut rng, &cat);
        let fast = solve(&cat, &c);
        let slow = brute_force(&cat, &c, DEFAULT_BRUTE_FORCE_CAP);
        match (fast, slow) {
            (Ok(a), Ok(b)) => {
                ensure!(a.total_quality_loss == b.total_quality_loss, "instance {i}: {} vs {}", a.total_quality_loss, b.total_quality_loss);
                ensure!(a.is_feasible(&c) && b.is_feasible(&c), "instance {i}: infeasible result");
                let resum: f64 = a.choice.iter().enumerate().fold(0.0, |s, (l, &v)| s + cat.layers[l][v].quality_loss);
                ensure!(resum == a.total_quality_loss, "instance {i}: objective not additive");
                if a.choice != b.choice {
                    choice_diffs += 1;
                }
                feasible += 1;
            }
            (Err(SearchError::Infeasible(x)), Err(SearchError::Infeasible(y))) => {
                ensure!(x == y, "instance {i}: infeasibility reports differ");
                infeasible += 1;
            }
            (a, b) => return Err(format!("instance {i}: solve {:?} vs brute force {:?}", a.map(|s| s.choice), b.map(|s| s.choice))),
        }
    }
    ensure!(feasible >= 100, "only {feasible} feasible instances");
    Ok(format!("{feasible} feasible + {infeasible} infeasible agree; {choice_diffs} choice differences"))
}

fn pareto_monotonicity() -> Result<String, String> {
    let mut rng = common::rng(4);
    let mut points = 0;
    for i in 0..50 {
        let n = rng.random_range(2..=10);
        let cat = common::random_catalog(&mut rng, n, 5);
        let (lo, hi) = common::latency_range(&cat);
        let grid: Vec<f64> = (0..8).map(|k| lo * 0.9 + (hi - lo * 0.9) * k as f64 / 7.0).collect();
        let mut fixed = common::random_constraints(&mut rng, &cat);
        fixed.max_latency = None;
        if fixed.max_weight_bytes.is_none() && fixed.min_cached_tokens.is_none() {
            fixed.max_weight_bytes = Some(u64::MAX);
        }
        let pts = pareto_frontier(&cat, &grid, &fixed).map_err(|e| e.to_string())?;
        let mut prev: Option<f64> = None;
        for p in &pts {
            match (&p.solution, prev) {
                (Some(s), Some(l)) => ensure!(s.total_quality_loss <= l, "catalog {i}: loss rose at budget {}", p.budget),
                (None, Some(_)) => return Err(format!("catalog {i}: infeasible after a feasible budget")),
                _ => {}
            }
            if let Some(s) = &p.solution {
                prev = Some(s.total_quality_loss);
                points += 1;
            }
        }
    }
    Ok(format!("{points} feasible grid points, 0 violations"))
}

fn random_ffn(rng: &mut impl Rng, d: usize, h: usize) -> FfnWeights {
    FfnWeights {
        w1: Matrix::from_fn(d, h, |_, _| rng.sample::<f64, _>(StandardNormal)),
        w2: Matrix::from_fn(h, d, |_, _| rng.sample::<f64, _>(StandardNormal)),
    }
}

fn fusion_equivalence() -> Result<String, String> {
    let mut rng = common::rng(5);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let d = rng.random_range(2..=12);
        let len = rng.random_range(2..=4);
        let members: Vec<FfnWeights> = (0..len).map(|_| {
            let h = rng.random_range(1..=8);
            random_ffn(&mut rng, d, h)
        }).collect();
        let run = FusableRun {
            start_layer: 0,
            length: len,
            member_params: members.iter().map(|m| 2 * (d * m.hidden()) as u64).collect(),
        };
        let fused = fuse_run(&run, &members).map_err(|e| e.to_string())?;
        ensure!(fused.hidden() == members.iter().map(|m| m.hidden()).sum::<usize>(), "pair {i}: fused width");
        let norm = RmsNorm { scale: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(), eps: 1e-6 };
        let act = if i % 2 == 0 { Activation::Silu } else { Activation::Tanh };
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let r = equivalence_residual(&fused, &members, &norm, act, &[x.clone()]);
        // Independent reference: x + Σ_i W2_iᵀ σ(W1_iᵀ norm(x)) written out longhand.
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let z: Vec<f64> = x.iter().zip(&norm.scale).map(|(v, s)| v / (ms + 1e-6).sqrt() * s).collect();
        let mut reference = x.clone();
        for m in &members {
            for j in 0..m.hidden() {
                let a: f64 = (0..d).map(|r| z[r] * m.w1.get(r, j)).sum();
                let s = act.apply(a);
                for (c, o) in reference.iter_mut().enumerate() {
                    *o += s * m.w2.get(j, c);
                }
            }
        }
        let y = fused.forward(&norm, act, &x);
        let scale = reference.iter().map(|v| v.abs()).fold(1e-300, f64::max);
        let direct = y.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(r).max(direct);
        ensure!(r <= 1e-6 && direct <= 1e-6, "pair {i}: residual {r:e} / {direct:e}");
    }

    // Depth, idempotence and parameter conservation on random solutions.
    for i in 0..300 {
        let n = rng.random_range(1..=12);
        let cat = common::random_catalog(&mut rng, n, 5);
        let choice: Vec<usize> = cat.layers.iter().map(|es| rng.random_range(0..es.len())).collect();
        let sol = PuzzleSolution::from_choice(&cat, &choice, None).map_err(|e| e.to_string())?;
        let runs = find_fusable_runs(&sol);
        let once = apply_fusion(&sol, &runs).map_err(|e| e.to_string())?;
        let saved: usize = runs.iter().map(|r| r.length - 1).sum();
        ensure!(once.depth == sol.depth - saved, "solution {i}: depth {} vs {} - {saved}", once.depth, sol.depth);
        ensure!(once.cost.params == sol.cost.params, "solution {i}: params changed");
        ensure!(once.cost.latency_per_token <= sol.cost.latency_per_token, "solution {i}: latency rose");
        let twice = apply_fusion(&once, &find_fusable_runs(&once)).map_err(|e| e.to_string())?;
        ensure!(twice == once, "solution {i}: fusion not idempotent");
    }
    Ok(format!("max relative residual {worst:.2e} over 1000 pairs"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

fn distillation_sanity() -> Result<String, String> {
    let mut rng = common::rng(6);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = rng.random_range(1..=5);
        let h = rng.random_range(1..=6);
        let rows = rng.random_range(1..=6);
        let mut row = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let problem = FfnProblem {
            h: (0..rows).map(|_| row(d)).collect(),
            z: (0..rows).map(|_| row(d)).collect(),
            y: (0..rows).map(|_| row(d)).collect(),
            activation: if i % 2 == 0 { Activation::Silu } else { Activation::Tanh },
        };
        let w = random_ffn(&mut rng, d, h);
        let (_, g) = problem.loss_and_grad(&w);
        let step = 1e-5;
        let fd = |which: usize| -> Vec<f64> {
            let len = if which == 1 { w.w1.data.len() } else { w.w2.data.len() };
            (0..len)
                .map(|k| {
                    let mut p = w.clone();
                    let mut m = w.clone();
                    if which == 1 {
                        p.w1.data[k] += step;
                        m.w1.data[k] -= step;
                    } else {
                        p.w2.data[k] += step;
                        m.w2.data[k] -= step;
                    }
                    (problem.loss(Some(&p)) - problem.loss(Some(&m))) / (2.0 * step)
                })
                .collect()
        };
        let e = rel_err(&g.w1.data, &fd(1)).max(rel_err(&g.w2.data, &fd(2)));
        worst = worst.max(e);
        ensure!(e <= 1e-5, "shape {i} ({d}x{h}, {rows} rows): gradient relative error {e:e}");
    }

    let mut descended = 0;
    for t in 0..100u64 {
        let d = 4 + 2 * (t as usize % 4);
        let arch = ParentArch { n_layers: 1, d_model: d, n_heads: 2, n_kv_heads: 1, head_dim: d / 2, d_ffn: 4 * d, vocab_size: 8 };
        let parent = ParentBlock::random(&arch, if t % 2 == 0 { Activation::Silu } else { Activation::Tanh }, t);
        let (train, held) = calibration_sets(&parent, &CalibrationConfig::default(), t + 10_000).map_err(|e| e.to_string())?;
        let ratio = [0.87, 0.75, 0.5, 0.1][t as usize % 4];
        let spec = BlockVariantSpec { layer_index: 0, has_attention: t % 3 != 0, ffn_ratio: ratio };
        let hidden = ((4 * d) as f64 * ratio).round().max(1.0) as usize;
        let hyper = DistillHyper { seed: t, ..DistillHyper::default() };
        let out = distill_variant(&parent, &spec, hidden, &train, &held, &hyper).map_err(|e| e.to_string())?;
        if out.train_loss_final <= out.train_loss_initial {
            descended += 1;
        }
    }
    ensure!(descended >= 95, "descent in {descended}/100 trials");

    let arch = ParentArch { n_layers: 1, d_model: 8, n_heads: 2, n_kv_heads: 1, head_dim: 4, d_ffn: 32, vocab_size: 8 };
    let parent = ParentBlock::random(&arch, Activation::Silu, 99);
    let (train, held) = calibration_sets(&parent, &CalibrationConfig::default(), 100).map_err(|e| e.to_string())?;
    let hyper = DistillHyper { steps: 0, ..DistillHyper::default() };
    let out = distill_variant(&parent, &BlockVariantSpec::parent(0), 32, &train, &held, &hyper).map_err(|e| e.to_string())?;
    ensure!(out.quality_loss == 0.0, "parent-equal variant scored {}", out.quality_loss);
    Ok(format!("max gradient error {worst:.2e}; descent {descended}/100; parent loss 0"))
}

fn brute_min_bottleneck(costs: &[f64], pp: usize) -> f64 {
    fn rec(costs: &[f64], start: usize, left: usize, cur: f64, best: &mut f64) {
        let n = costs.len();
        if left == 1 {
            let mut s = 0.0;
            for c in &costs[start..] {
                s += c;
            }
            *best = best.min(cur.max(s));
            return;
        }
        for end in start + 1..=n - (left - 1) {
            let mut s = 0.0;
            for c in &costs[start..end] {
                s += c;
            }
            rec(costs, end, left - 1, cur.max(s), best);
        }
    }
    let mut best = f64::INFINITY;
    rec(costs, 0, pp, 0.0, &mut best);
    best
}

fn stage_balancing() -> Result<String, String> {
    let mut rng = common::rng(7);
    for i in 0..500 {
        let n = rng.random_range(1..=12);
        let pp = rng.random_range(1..=n);
        let costs: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(1..4) as f64 } else { rng.random_range(0.0..10.0) })
            .collect();
        let b = balance_stages(&costs, pp, false).map_err(|e| e.to_string())?;
        let oracle = brute_min_bottleneck(&costs, pp);
        ensure!(b.bottleneck_cost == oracle, "instance {i}: {} vs {oracle} ({costs:?}, pp={pp})", b.bottleneck_cost);
        ensure!(b.stage_boundaries.len() == pp + 1 && b.stage_boundaries[pp] == n, "instance {i}: boundaries");
        let u = balance_stages(&costs, pp, true).map_err(|e| e.to_string())?;
        let forced = pp * n.div_ceil(pp) - n;
        ensure!(u.identity_layers_inserted == forced, "instance {i}: {} identities, expected {forced}", u.identity_layers_inserted);
        ensure!(*u.stage_boundaries.last().unwrap() == n + forced, "instance {i}: padded length");
    }
    Ok("500 instances match the exhaustive minimum".into())
}

fn parallelism_regime() -> Result<String, String> {
    // 250e9 parameters (500e9 BF16 bytes) over 162 layers of uneven size.
    let pattern = [1.0, 1.0, 0.5, 1.0, 0.25, 1.0, 0.75, 1.0, 0.5];
    let extra = 2_000_000_000u64;
    let raw: Vec<f64> = (0..162).map(|i| pattern[i % pattern.len()]).collect();
    let total: f64 = raw.iter().sum();
    let layer_params: Vec<u64> = raw.iter().map(|r| (r / total * (250e9 - extra as f64)) as u64).collect();
    let profile = ArchProfile {
        layer_costs: layer_params.iter().map(|&p| p as f64).collect(),
        layer_params,
        extra_params: extra,
        activation_bytes_per_layer: 1_000_000_000,
    };
    let weights = model_weight_bytes(profile.total_params(), Precision::Bf16) as f64;
    ensure!((weights - 500e9).abs() / 500e9 < 0.01, "profile weighs {weights} bytes");
    let cluster = ClusterShape { n_nodes: 72, gpus_per_node: 8, gpu_memory: 80_000_000_000, cpu_memory_per_node: 2_000_000_000_000 };
    let out = search_parallelism(&profile, &cluster, &SearchOptions::default()).map_err(|e| e.to_string())?;
    for p in &out.feasible {
        ensure!(p.tp * p.pp * p.cp * p.dp == 576, "plan {:?} uses the wrong GPU count", p.dims());
        ensure!(p.per_gpu_memory.total <= cluster.gpu_memory, "plan {:?} exceeds memory", p.dims());
    }
    let hit = out.feasible.iter().find(|p| (p.tp, p.pp, p.cp, p.dp) == (8, 18, 2, 2));
    ensure!(hit.is_some(), "(tp=8, pp=18, cp=2, dp=2) not among {} feasible plans", out.feasible.len());
    let m = &hit.unwrap().per_gpu_memory;
    ensure!(m.microbatches_in_flight == 18, "in-flight micro-batches {}", m.microbatches_in_flight);
    Ok(format!(
        "{} feasible plans include tp=8 pp=18 cp=2 dp=2 ({:.1} GB/GPU)",
        out.feasible.len(),
        m.total as f64 / 1e9
    ))
}

fn curriculum_properties() -> Result<String, String> {
    let boundary = [PassRateRecord::new("a", 6, 8).unwrap(), PassRateRecord::new("b", 5, 8).unwrap(), PassRateRecord::new("c", 0, 8).unwrap()];
    let kept: Vec<_> = filter_prompts(&boundary, 0.75).into_iter().map(|r| r.prompt_id).collect();
    ensure!(kept == ["b", "c"], "boundary filter kept {kept:?}");

    let mut rng = common::rng(9);
    let mut worst_slope = f64::NEG_INFINITY;
    for pool in 0..100u64 {
        let records = synthetic_records(600, 8, pool);
        let kept = filter_prompts(&records, 0.75);
        // Integer oracle for "pass rate >= 0.75": 4k >= 3n.
        let expect = records.iter().filter(|r| 4 * r.successes < 3 * r.attempts).count();
        ensure!(kept.len() == expect, "pool {pool}: filter kept {} of expected {expect}", kept.len());
        let levels: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
        let sigma = rng.random_range(0.05..0.5);
        for t in gaussian_targets(8, &levels, 0.875, 0.0, sigma).map_err(|e| e.to_string())? {
            let s: f64 = t.weights.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-12 && t.weights.iter().all(|w| *w >= 0.0), "weights sum {s}");
        }
        let plan = build_curriculum(&kept, &CurriculumConfig::default(), pool).map_err(|e| e.to_string())?;
        let mut ids: Vec<&String> = plan.batches.iter().flat_map(|b| &b.prompt_ids).collect();
        let n = ids.len();
        ensure!(n == 256 && plan.batches.iter().all(|b| b.prompt_ids.len() == 32), "pool {pool}: batch sizes");
        ids.sort();
        ids.dedup();
        ensure!(ids.len() == n, "pool {pool}: duplicate samples");
        let slope = plan.difficulty_slope();
        worst_slope = worst_slope.max(slope);
        ensure!(slope <= 0.0, "pool {pool}: slope {slope}");
    }
    Ok(format!("100 pools, max slope {worst_slope:.4}"))
}

fn grpo() -> Result<String, String> {
    let mut rng = common::rng(10);
    for i in 0..2000 {
        let m = rng.random_range(2..=64);
        let rewards: Vec<f64> = match i % 3 {
            0 => (0..m).map(|_| rng.random_range(0..2) as f64).collect(),
            1 => (0..m).map(|_| rng.random_range(0..9) as f64 / 8.0).collect(),
            _ => (0..m).map(|_| rng.random_range(-1e3..1e3)).collect(),
        };
        let a = grpo_advantages(&rewards, 1e-6).map_err(|e| e.to_string())?;
        let mean = a.iter().sum::<f64>() / m as f64;
        ensure!(mean.abs() <= 1e-12, "group {i}: mean {mean:e}");
        if i % 3 != 2 {
            let c = rng.random_range(-100..=100) as f64;
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            ensure!(grpo_advantages(&shifted, 1e-6).unwrap() == a, "group {i}: shift by {c} changed advantages");
        }
    }
    let a = grpo_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-6).map_err(|e| e.to_string())?;
    let expect = [3f64.sqrt(), -1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt()];
    ensure!(a.iter().zip(expect).all(|(x, y)| (x - y).abs() <= 1e-3), "[1,0,0,0] gave {a:?}");
    ensure!(grpo_advantages(&[0.5; 5], 1e-6).unwrap().iter().all(|v| *v == 0.0), "equal rewards");
    Ok(format!("[1,0,0,0] -> {:.4?}", a))
}

fn toggle_format() -> Result<String, String> {
    let on = ReasoningMode::from_system_prompt("detailed thinking on").map_err(|e| e.to_string())?;
    let off = ReasoningMode::from_system_prompt("detailed thinking off").map_err(|e| e.to_string())?;
    ensure!(on == ReasoningMode::ReasoningOn && off == ReasoningMode::ReasoningOff, "toggle parse");
    for bad in ["Detailed thinking on", "detailed thinking on ", "detailed  thinking off", "detailed thinking"] {
        ensure!(ReasoningMode::from_system_prompt(bad).is_err(), "accepted {bad:?}");
    }
    let cases = [
        ("<think>steps</think>answer", on, 1),
        ("answer", on, 0),
        ("<think>x</think>", off, 0),
        ("</think>steps<think>answer", on, 0),
        ("<think>a</think><think>b</think>answer", on, 0),
        ("<think></think>answer", on, 0),
    ];
    for (resp, mode, want) in cases {
        let got = format_reward(resp, mode);
        ensure!(got == want, "{resp:?} in {mode:?}: {got}, expected {want}");
    }
    Ok("6 examples".into())
}

fn json_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(json_files(&p));
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.json");
    std::fs::write(&cfg, r#"{"seed": 2024, "solver": {"min_latency_reduction": 1.5, "pareto_points": 6}}"#).unwrap();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_archopt"))
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "run {run} failed: {}", String::from_utf8_lossy(&status.stderr));
        dirs.push(out);
    }
    let a = json_files(&dirs[0]);
    let b = json_files(&dirs[1]);
    ensure!(a.len() >= 6 && a.len() == b.len(), "artifact counts {} vs {}", a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        ensure!(x.strip_prefix(&dirs[0]).unwrap() == y.strip_prefix(&dirs[1]).unwrap(), "artifact names differ");
        ensure!(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "{} differs", x.display());
    }
    let wa = std::fs::read(dirs[0].join("library/weights.bin")).unwrap();
    let wb = std::fs::read(dirs[1].join("library/weights.bin")).unwrap();
    ensure!(wa == wb, "weights sidecar differs");
    Ok(format!("{} JSON artifacts byte-identical", a.len()))
}
