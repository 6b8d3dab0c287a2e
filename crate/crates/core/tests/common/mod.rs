#![allow(dead_code)]

use archopt::arch_cost::{BlockVariantSpec, CostModel, CostVector, Precision};
use archopt::block_library::{Catalog, CatalogEntry};
use archopt::search::{CachedTokenConstraint, ConstraintSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const RATIOS: [f64; 5] = [1.0, 0.87, 0.75, 0.5, 0.1];

/// Random catalog with a parent block at id 0 of every layer. A share of the
/// losses and latencies come from small discrete sets so exact ties occur.
pub fn random_catalog(rng: &mut ChaCha8Rng, n_layers: usize, max_variants: usize) -> Catalog {
    let layers = (0..n_layers)
        .map(|l| {
            let n = rng.random_range(1..=max_variants);
            (0..n)
                .map(|id| {
                    let parent = id == 0;
                    let has_attention = parent || rng.random_bool(0.6);
                    let ffn_ratio = if parent { 1.0 } else { RATIOS[rng.random_range(0..RATIOS.len())] };
                    let params: u64 = rng.random_range(10..2000);
                    let loss = if parent {
                        0.0
                    } else if rng.random_bool(0.3) {
                        [0.125, 0.25, 0.5][rng.random_range(0..3)]
                    } else {
                        rng.random::<f64>()
                    };
                    let latency = if rng.random_bool(0.3) {
                        [1.0, 2.0, 4.0][rng.random_range(0..3)]
                    } else {
                        rng.random_range(0.1..10.0)
                    };
                    let kv = if has_attention { rng.random_range(1..64) } else { 0 };
                    CatalogEntry {
                        id,
                        spec: BlockVariantSpec { layer_index: l, has_attention, ffn_ratio },
                        quality_loss: loss,
                        cost: CostVector {
                            params,
                            flops_per_token: 2 * params,
                            kv_bytes_per_token: kv,
                            latency_per_token: latency,
                            weight_bytes: 2 * params,
                        },
                        seed: 0,
                    }
                })
                .collect()
        })
        .collect();
    Catalog { precision: Precision::Bf16, cost_model: CostModel::default(), arch: None, layers }
}

fn min_max<T: Copy + PartialOrd>(c: &Catalog, f: impl Fn(&CatalogEntry) -> T, zero: T, add: impl Fn(T, T) -> T) -> (T, T) {
    let mut lo = zero;
    let mut hi = zero;
    for es in &c.layers {
        let mut a = f(&es[0]);
        let mut b = f(&es[0]);
        for e in es {
            let v = f(e);
            if v < a {
                a = v;
            }
            if v > b {
                b = v;
            }
        }
        lo = add(lo, a);
        hi = add(hi, b);
    }
    (lo, hi)
}

pub fn latency_range(c: &Catalog) -> (f64, f64) {
    min_max(c, |e| e.cost.latency_per_token, 0.0, |a, b| a + b)
}

/// A random non-empty subset of constraints, each bound drawn between the
/// smallest and largest value any assignment reaches so most of them bind.
pub fn random_constraints(rng: &mut ChaCha8Rng, c: &Catalog) -> ConstraintSet {
    let mask = rng.random_range(1..8u8);
    let mut out = ConstraintSet { max_weight_bytes: None, max_latency: None, min_cached_tokens: None, precision: c.precision };
    if mask & 1 != 0 {
        let (lo, hi) = min_max(c, |e| e.cost.weight_bytes, 0u64, |a, b| a + b);
        out.max_weight_bytes = Some(rng.random_range(lo.saturating_sub(5).max(1)..=hi));
    }
    if mask & 2 != 0 {
        let (lo, hi) = latency_range(c);
        out.max_latency = Some(rng.random_range(lo * 0.95..=hi));
    }
    if mask & 4 != 0 {
        let tokens = rng.random_range(1..500u64);
        let (lo, hi) = min_max(c, |e| e.cost.weight_bytes + tokens * e.cost.kv_bytes_per_token, 0u64, |a, b| a + b);
        let usable = rng.random_range(lo.saturating_sub(5).max(1)..=hi);
        let reserve_fraction = [0.0, 0.1, 0.25][rng.random_range(0..3)];
        let device_memory = (usable as f64 / (1.0 - reserve_fraction)).ceil() as u64 + 1;
        out.min_cached_tokens = Some(CachedTokenConstraint { tokens, device_memory, reserve_fraction });
    }
    out
}
