mod common;

use archopt::arch_cost::{block_costs, max_cached_tokens, model_costs, CostModel, Precision};
use archopt::ffn_fusion::{apply_fusion, find_fusable_runs};
use archopt::pipeline_planner::{
    balance_stages, min_bottleneck_dp, plan_memory, search_parallelism, ArchProfile, ClusterShape, MemoryRequest,
    OptimizerLayout, PlanDims, SearchOptions,
};
use archopt::rl_curriculum::{
    build_curriculum, gaussian_targets, grpo_advantages, CurriculumConfig, PassRateRecord,
};
use archopt::search::{brute_force, solve, speedup_report, parent_solution, ConstraintSet, PuzzleSolution, DEFAULT_BRUTE_FORCE_CAP};
use archopt::{BlockVariantSpec, ParentArch};
use proptest::prelude::*;

fn arch_strategy() -> impl Strategy<Value = ParentArch> {
    (1usize..6, 1usize..5, 1usize..9, 1usize..4, 1usize..512).prop_flat_map(|(layers, kv_heads, group, head_dim, d_ffn)| {
        let n_heads = kv_heads * group;
        Just(ParentArch {
            n_layers: layers,
            d_model: n_heads * head_dim,
            n_heads,
            n_kv_heads: kv_heads,
            head_dim,
            d_ffn,
            vocab_size: 1000,
        })
    })
}

fn precision_strategy() -> impl Strategy<Value = Precision> {
    prop_oneof![Just(Precision::Fp8), Just(Precision::Bf16), Just(Precision::Fp32)]
}

proptest! {
    #[test]
    fn cost_monotone_in_ratio_and_attention(
        arch in arch_strategy(),
        r1 in 0.01f64..=1.0,
        r2 in 0.01f64..=1.0,
        attn in any::<bool>(),
        precision in precision_strategy(),
        align in prop_oneof![Just(1usize), Just(8), Just(64)],
    ) {
        let cm = CostModel { ffn_alignment: align, ..CostModel::default() };
        let (hi, lo) = if r1 >= r2 { (r1, r2) } else { (r2, r1) };
        let big = BlockVariantSpec { layer_index: 0, has_attention: true, ffn_ratio: hi };
        for small in [
            BlockVariantSpec { layer_index: 0, has_attention: attn, ffn_ratio: lo },
            BlockVariantSpec { layer_index: 0, has_attention: false, ffn_ratio: hi },
        ] {
            let a = block_costs(&arch, &big, precision, &cm).unwrap();
            let b = block_costs(&arch, &small, precision, &cm).unwrap();
            prop_assert!(b.params <= a.params);
            prop_assert!(b.flops_per_token <= a.flops_per_token);
            prop_assert!(b.kv_bytes_per_token <= a.kv_bytes_per_token);
            prop_assert!(b.weight_bytes <= a.weight_bytes);
            prop_assert!(b.latency_per_token <= a.latency_per_token);
        }
    }

    #[test]
    fn model_cost_is_sum_and_matches_closed_form(
        arch in arch_strategy(),
        choices in prop::collection::vec((any::<bool>(), prop_oneof![Just(1.0f64), Just(0.87), Just(0.5), Just(0.1)]), 1..6),
        precision in precision_strategy(),
    ) {
        let cm = CostModel::default();
        let specs: Vec<BlockVariantSpec> = choices
            .iter()
            .enumerate()
            .filter(|(_, (a, _))| *a)
            .chain(choices.iter().enumerate().filter(|(_, (a, _))| !*a))
            .map(|(i, &(a, r))| BlockVariantSpec { layer_index: i % arch.n_layers, has_attention: a, ffn_ratio: r })
            .collect();
        let total = model_costs(&arch, &specs, precision, &cm).unwrap();
        // Whole-model closed form, written independently of the per-block code.
        let d = arch.d_model as u64;
        let kv_dim = (arch.n_kv_heads * arch.head_dim) as u64;
        let mut params = 0u64;
        let mut kv = 0u64;
        for s in &specs {
            let hidden = ((arch.d_ffn as f64 * s.ffn_ratio).round() as u64).max(1);
            params += 2 * d * hidden;
            if s.has_attention {
                params += 2 * d * d + 2 * d * kv_dim;
                kv += 2 * kv_dim * precision.bytes_per_element();
            }
        }
        prop_assert_eq!(total.params, params);
        prop_assert_eq!(total.flops_per_token, 2 * params);
        prop_assert_eq!(total.weight_bytes, params * precision.bytes_per_element());
        prop_assert_eq!(total.kv_bytes_per_token, kv);
        let lat: f64 = specs.iter().map(|s| block_costs(&arch, s, precision, &cm).unwrap().latency_per_token).sum();
        prop_assert!((total.latency_per_token - lat).abs() <= 1e-12 * lat.max(1e-30));
    }

    #[test]
    fn precision_scales_bytes_exactly(arch in arch_strategy(), attn in any::<bool>(), r in 0.05f64..=1.0) {
        let cm = CostModel::default();
        let s = BlockVariantSpec { layer_index: 0, has_attention: attn, ffn_ratio: r };
        let f8 = block_costs(&arch, &s, Precision::Fp8, &cm).unwrap();
        let b16 = block_costs(&arch, &s, Precision::Bf16, &cm).unwrap();
        let f32 = block_costs(&arch, &s, Precision::Fp32, &cm).unwrap();
        prop_assert_eq!(b16.weight_bytes, 2 * f8.weight_bytes);
        prop_assert_eq!(f32.weight_bytes, 4 * f8.weight_bytes);
        prop_assert_eq!(b16.kv_bytes_per_token, 2 * f8.kv_bytes_per_token);
        prop_assert_eq!(f32.kv_bytes_per_token, 4 * f8.kv_bytes_per_token);
        prop_assert_eq!(f8.params, f32.params);
    }

    #[test]
    fn cached_tokens_monotone(
        kv in 1u64..10_000,
        weights in 0u64..1_000_000,
        extra in 1u64..1_000_000,
        more in 0u64..1_000_000,
        r in 0.0f64..0.9,
    ) {
        let device = weights + extra;
        let base = max_cached_tokens(kv, device, weights, r).unwrap();
        prop_assert!(max_cached_tokens(kv, device + more, weights, r).unwrap() >= base);
        prop_assert!(max_cached_tokens(kv + 1, device, weights, r).unwrap() <= base);
        prop_assert!(max_cached_tokens(kv, device, weights, (r + 0.05).min(0.99)).unwrap() <= base);
        if r == 0.0 {
            prop_assert_eq!(base, extra / kv);
        }
    }

    #[test]
    fn solver_matches_brute_force(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = common::rng(seed);
        let cat = common::random_catalog(&mut rng, n, 4);
        let c = common::random_constraints(&mut rng, &cat);
        let a = solve(&cat, &c);
        let b = brute_force(&cat, &c, DEFAULT_BRUTE_FORCE_CAP);
        prop_assert_eq!(&a, &b);
        if let Ok(s) = a {
            prop_assert!(s.is_feasible(&c));
        }
    }

    #[test]
    fn latency_constraint_implies_speedup(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = common::rng(seed);
        let cat = common::random_catalog(&mut rng, n, 5);
        let parent = parent_solution(&cat).unwrap();
        let c = ConstraintSet {
            max_weight_bytes: None,
            max_latency: Some(parent.cost.latency_per_token / 1.5),
            min_cached_tokens: None,
            precision: cat.precision,
        };
        if let Ok(s) = solve(&cat, &c) {
            prop_assert!(speedup_report(&s, &parent).unwrap().latency_ratio >= 1.5);
        }
    }

    #[test]
    fn fusion_accounting(seed in any::<u64>(), n in 1usize..16) {
        let mut rng = common::rng(seed);
        let cat = common::random_catalog(&mut rng, n, 5);
        let choice: Vec<usize> = cat.layers.iter().map(|es| (seed as usize ^ es.len()) % es.len()).collect();
        let sol = PuzzleSolution::from_choice(&cat, &choice, None).unwrap();
        let runs = find_fusable_runs(&sol);
        for r in &runs {
            prop_assert!(r.length >= 2);
            for l in r.layers() {
                prop_assert!(sol.blocks[l].spec.is_attention_free_ffn());
            }
        }
        let fused = apply_fusion(&sol, &runs).unwrap();
        prop_assert_eq!(fused.depth, n - runs.iter().map(|r| r.length - 1).sum::<usize>());
        prop_assert!(fused.cost.latency_per_token <= sol.cost.latency_per_token);
        prop_assert_eq!(fused.total_quality_loss, sol.total_quality_loss);
        prop_assert_eq!(apply_fusion(&fused, &find_fusable_runs(&fused)).unwrap(), fused);
    }

    #[test]
    fn balance_matches_dp(costs in prop::collection::vec(0.0f64..100.0, 1..40), pp_seed in any::<usize>()) {
        let pp = 1 + pp_seed % costs.len();
        let b = balance_stages(&costs, pp, false).unwrap();
        prop_assert_eq!(b.bottleneck_cost, min_bottleneck_dp(&costs, pp).unwrap());
        prop_assert_eq!(b.identity_layers_inserted, 0);
        let u = balance_stages(&costs, pp, true).unwrap();
        prop_assert_eq!(u.identity_layers_inserted, pp * costs.len().div_ceil(pp) - costs.len());
        // Identities pad counts only: real layers are covered exactly once.
        let covered: usize = u.stage_layers.iter().map(|(a, b)| b - a).sum();
        prop_assert_eq!(covered, costs.len());
        prop_assert!(u.stage_layers.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn memory_proportional_to_divisors(
        params in 1_000u64..1_000_000_000,
        act in 1u64..1_000_000,
        tp in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        cp in prop_oneof![Just(1usize), Just(2), Just(4)],
        pp in 1usize..8,
    ) {
        let req = |tp: usize, cp: usize, pp: usize| MemoryRequest {
            total_params: params * 64,
            layer_params: vec![],
            dims: PlanDims { tp, pp, cp, dp: 1 },
            microbatch_activation_bytes: act * 64,
            precision_weights: Precision::Bf16,
            optimizer: OptimizerLayout::default(),
            sequence_parallel: true,
            schedule_multiplier: 1,
            gpu_memory: u64::MAX,
        };
        let base = plan_memory(&req(1, 1, 1)).unwrap();
        let m = plan_memory(&req(tp, cp, pp)).unwrap();
        prop_assert_eq!(m.microbatches_in_flight, pp as u64);
        prop_assert_eq!(m.weights, ((params * 64).div_ceil(pp as u64) * 2).div_ceil(tp as u64));
        let double_cp = plan_memory(&req(tp, 2 * cp, pp)).unwrap();
        prop_assert_eq!(double_cp.activations * 2, m.activations);
        prop_assert_eq!(m.activations, base.activations * pp as u64 / (tp * cp) as u64);
    }

    #[test]
    fn gaussian_weights_normalized(mean in 0.0f64..=1.0, sigma in 1e-6f64..2.0, n in 1usize..12) {
        let levels: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
        let ts = gaussian_targets(n, &levels, 1.0 - mean, mean, sigma).unwrap();
        for t in &ts {
            prop_assert!((t.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(t.weights.iter().all(|w| *w >= 0.0));
        }
        let means: Vec<f64> = ts.iter().map(|t| t.mean).collect();
        if 1.0 - mean >= mean {
            prop_assert!(means.windows(2).all(|w| w[1] <= w[0]));
        } else {
            prop_assert!(means.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn curriculum_invariants(ks in prop::collection::vec(0u32..=8, 64..300), seed in any::<u64>(), bs in 1usize..16) {
        let records: Vec<PassRateRecord> =
            ks.iter().enumerate().map(|(i, &k)| PassRateRecord::new(format!("q{i}"), k, 8).unwrap()).collect();
        let n_batches = (records.len() / bs).clamp(1, 6);
        let cfg = CurriculumConfig { batch_size: bs, n_batches, ..CurriculumConfig::default() };
        let plan = build_curriculum(&records, &cfg, seed).unwrap();
        let mut ids: Vec<&String> = Vec::new();
        for b in &plan.batches {
            prop_assert_eq!(b.prompt_ids.len(), bs);
            prop_assert_eq!(b.level_counts.iter().sum::<usize>(), bs);
            ids.extend(&b.prompt_ids);
        }
        let total = ids.len();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), total);
        for (li, level) in plan.levels.iter().enumerate() {
            let have = ks.iter().filter(|&&k| k as f64 / 8.0 == *level).count();
            let used: usize = plan.batches.iter().map(|b| b.level_counts[li]).sum();
            prop_assert!(used <= have);
        }
        let distinct = {
            let mut v = ks.clone();
            v.sort();
            v.dedup();
            v.len()
        };
        if distinct >= 2 {
            prop_assert!(plan.difficulty_slope() <= 1e-12);
        }
        let other = build_curriculum(&records, &cfg, seed ^ 1).unwrap();
        for (a, b) in plan.batches.iter().zip(&other.batches) {
            prop_assert_eq!(&a.level_counts, &b.level_counts);
        }
        prop_assert_eq!(build_curriculum(&records, &cfg, seed).unwrap(), plan);
    }

    #[test]
    fn grpo_normalizes(rewards in prop::collection::vec(-100.0f64..100.0, 2..64), shift in -50i32..50) {
        let a = grpo_advantages(&rewards, 1e-6).unwrap();
        prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() <= 1e-12);
        let m = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / m;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m).sqrt();
        if std > 1e-5 {
            let out_std = (a.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
            prop_assert!((out_std - 1.0).abs() <= 1e-6 / std + 1e-9);
        }
        let q: Vec<f64> = rewards.iter().map(|r| (r * 8.0).round() / 8.0).collect();
        let shifted: Vec<f64> = q.iter().map(|r| r + shift as f64).collect();
        prop_assert_eq!(grpo_advantages(&q, 1e-6).unwrap(), grpo_advantages(&shifted, 1e-6).unwrap());
    }
}

#[test]
fn shrinking_gpu_memory_never_lowers_pp() {
    let profile = ArchProfile {
        layer_params: (0..24).map(|i| 1_000_000_000 + (i % 5) * 300_000_000).collect(),
        layer_costs: vec![],
        extra_params: 500_000_000,
        activation_bytes_per_layer: 200_000_000,
    };
    let mut last_pp = 0;
    for gb in (20..=400).rev().step_by(10) {
        let cluster = ClusterShape { n_nodes: 4, gpus_per_node: 8, gpu_memory: gb * 1_000_000_000, cpu_memory_per_node: u64::MAX };
        match search_parallelism(&profile, &cluster, &SearchOptions::default()) {
            Ok(out) => {
                assert!(out.best.pp >= last_pp, "pp fell from {last_pp} to {} at {gb} GB", out.best.pp);
                last_pp = out.best.pp;
            }
            Err(_) => last_pp = usize::MAX,
        }
    }
}

#[test]
fn tiny_cluster_forces_tp_one() {
    let profile = ArchProfile { layer_params: vec![10; 4], layer_costs: vec![], extra_params: 0, activation_bytes_per_layer: 1 };
    let cluster = ClusterShape { n_nodes: 1, gpus_per_node: 1, gpu_memory: 1_000, cpu_memory_per_node: 1_000_000 };
    let out = search_parallelism(&profile, &cluster, &SearchOptions::default()).unwrap();
    assert_eq!(out.best.tp, 1);
    assert_eq!(out.best.dims(), PlanDims { tp: 1, pp: 1, cp: 1, dp: 1 });
}
