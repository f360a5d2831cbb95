mod common;

use common::*;
use fluxattn_core::attn::{cache_attention, indexed_attention, merge_partials, segment_attention, PartialOutput};
use fluxattn_core::block::{blocks_for_budget, build_metadata, select_budget, topk_blocks};
use fluxattn_core::budget::{fit_curve, HeadProperties, SELECT_GRANULARITIES};
use fluxattn_core::features::{FeatureNorms, FeatureVector, FEATURE_DIM};
use fluxattn_core::math;
use fluxattn_core::predictor::{HeadPredictor, PredictorModel};
use fluxattn_core::schedule::{
    enqueue_batch, makespan_lower_bound, simulate, simulate_policy, Policy, SparseTask, TaskCost, WorkerProfile,
};
use fluxattn_core::selector::{plan_group, volume};
use fluxattn_core::workload::{generate_layer, WorkloadSpec};
use proptest::prelude::*;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn split_and_merge_equals_one_softmax(seed in any::<u64>(), len in 1usize..200, dim in 1usize..33, cuts in prop::collection::vec(0usize..200, 0..4)) {
        let mut r = rng(seed);
        let keys = random_matrix(&mut r, len, dim, 1.5);
        let values = random_matrix(&mut r, len, dim, 1.0);
        let q = random_vec(&mut r, dim, 1.0);
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % (len + 1)).collect();
        bounds.push(0);
        bounds.push(len);
        bounds.sort_unstable();
        let parts: Vec<PartialOutput> = bounds
            .windows(2)
            .map(|w| {
                let rows: Vec<usize> = (w[0]..w[1]).collect();
                indexed_attention(&q, &keys, &values, &rows).unwrap()
            })
            .collect();
        let merged = merge_partials(&parts).unwrap();
        let expect = naive_attention(&q, &keys, &values, &(0..len).collect::<Vec<_>>());
        prop_assert!(dist(&merged.out, &expect) <= 1e-9 * (1.0 + l2(&expect)));
        prop_assert!((merged.lse - naive_lse(&q, &keys)).abs() <= 1e-9 * (1.0 + merged.lse.abs()));
        prop_assert_eq!(merged.len, len);
    }

    #[test]
    fn merge_is_order_independent(seed in any::<u64>(), len in 2usize..120, dim in 1usize..17) {
        let mut r = rng(seed);
        let keys = random_matrix(&mut r, len, dim, 1.0);
        let values = random_matrix(&mut r, len, dim, 1.0);
        let q = random_vec(&mut r, dim, 2.0);
        let mid = len / 2;
        let a = indexed_attention(&q, &keys, &values, &(0..mid).collect::<Vec<_>>()).unwrap();
        let b = indexed_attention(&q, &keys, &values, &(mid..len).collect::<Vec<_>>()).unwrap();
        let ab = merge_partials(&[a.clone(), b.clone()]).unwrap();
        let ba = merge_partials(&[b, a]).unwrap();
        prop_assert!(dist(&ab.out, &ba.out) <= 1e-12);
    }

    #[test]
    fn segmented_cache_matches_flat_attention(seed in any::<u64>(), s in 0usize..8, c in 0usize..64, l in 0usize..16, n in 0usize..4, dim in 1usize..17) {
        prop_assume!(s + c + l + n > 0);
        let mut r = rng(seed);
        let cache = random_cache(&mut r, [s, c, l, n], dim);
        let q = random_vec(&mut r, dim, 1.0);
        let (k, v) = stacked(&cache);
        let expect = naive_attention(&q, &k, &v, &(0..k.rows()).collect::<Vec<_>>());
        let got = cache_attention(&q, &cache).unwrap();
        prop_assert!(dist(&got.out, &expect) <= 1e-9 * (1.0 + l2(&expect)));
    }

    #[test]
    fn block_score_bounds_every_member(seed in any::<u64>(), len in 1usize..300, dim in 1usize..40, blk in 1usize..40) {
        let mut r = rng(seed);
        let keys = random_matrix(&mut r, len, dim, 2.0);
        let q = random_vec(&mut r, dim, 2.0);
        let meta = build_metadata(&keys, blk).unwrap();
        for b in 0..meta.block_count() {
            let ub = meta.score(&q, b).unwrap();
            for i in meta.block_range(b) {
                prop_assert!(ub >= math::dot(&q, keys.row(i)));
                let naive: f64 = (0..dim).map(|d| f64::from(q[d]) * f64::from(keys.row(i)[d])).sum();
                prop_assert!(ub >= naive - 1e-9);
            }
        }
    }

    #[test]
    fn topk_is_a_stable_descending_prefix(seed in any::<u64>(), len in 1usize..200, blk in 1usize..20, k in 0usize..30) {
        let mut r = rng(seed);
        // Coarse values force ties.
        let data: Vec<f32> = (0..len * 3).map(|_| (gaussian(&mut r) * 2.0).round() as f32).collect();
        let keys = fluxattn_core::Matrix::new(len, 3, data).unwrap();
        let q = vec![1.0f32, -1.0, 0.5];
        let meta = build_metadata(&keys, blk).unwrap();
        let scores = meta.scores(&q).unwrap();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let sel = topk_blocks(&q, &meta, k).unwrap();
        let mut expect: Vec<usize> = order.into_iter().take(k).collect();
        expect.sort_unstable();
        prop_assert_eq!(&sel.selected_blocks, &expect);
        prop_assert_eq!(sel.clamped, k > meta.block_count());
        let tokens: usize = expect.iter().map(|&b| meta.block_range(b).len()).sum();
        prop_assert_eq!(sel.token_indices.len(), tokens);
    }

    #[test]
    fn budget_blocks_are_minimal_and_sufficient(budget in 0.0f64..1.2, len in 1usize..5000, blk in 1usize..256) {
        let k = blocks_for_budget(budget, len, blk);
        let count = len.div_ceil(blk);
        prop_assert!(k <= count);
        let target = budget.min(1.0) * len as f64;
        if k < count {
            prop_assert!((k * blk) as f64 >= target - 1e-6);
        }
        if k > 0 {
            prop_assert!((((k - 1) * blk) as f64) < target);
        }
    }

    #[test]
    fn selector_picks_the_exhaustive_minimum(
        heads in prop::collection::vec((0.0f64..0.3, -0.05f64..0.1, prop::bool::weighted(0.3)), 1..9),
        cpu_len in 0usize..20000,
    ) {
        let props: Vec<HeadProperties> = heads.iter().map(|&(b, k, s)| HeadProperties { bgt0: b, slope: k, streaming: s }).collect();
        let plan = plan_group(5, &props, cpu_len).unwrap();
        if props.iter().all(|p| p.streaming) {
            prop_assert!(plan.streaming_group);
            return Ok(());
        }
        let naive = |blk: usize| {
            let sum: f64 = props
                .iter()
                .filter(|p| !p.streaming)
                .map(|p| (p.bgt0 + p.slope.max(0.0) * (blk as f64).log2()).clamp(0.0, 1.0))
                .sum();
            2.0 * cpu_len as f64 / blk as f64 + 2.0 * cpu_len as f64 * sum
        };
        let best = SELECT_GRANULARITIES.iter().map(|&b| naive(b)).fold(f64::INFINITY, f64::min);
        prop_assert!((plan.volume - best).abs() <= 1e-9 * (1.0 + best));
        let coarsest_min = SELECT_GRANULARITIES.iter().copied().filter(|&b| (naive(b) - best).abs() <= 1e-9 * (1.0 + best)).max().unwrap();
        prop_assert_eq!(plan.blk, coarsest_min);
        prop_assert!((volume(plan.blk, cpu_len, &plan.budgets) - plan.volume).abs() <= 1e-9 * (1.0 + best));
    }

    #[test]
    fn single_head_group_equals_single_head_plan(b in 0.0f64..0.5, k in -0.1f64..0.2, len in 1usize..10000) {
        let p = HeadProperties { bgt0: b, slope: k, streaming: false };
        let g1 = plan_group(0, &[p], len).unwrap();
        let naive = SELECT_GRANULARITIES
            .iter()
            .map(|&blk| (blk, volume(blk, len, &[p.budget_at(blk)])))
            .fold((0usize, f64::INFINITY), |acc, x| if x.1 < acc.1 || (x.1 == acc.1 && x.0 > acc.0) { x } else { acc });
        prop_assert_eq!(g1.blk, naive.0);
        prop_assert_eq!(g1.volume, naive.1);
    }

    #[test]
    fn budgets_stay_in_unit_interval(b in -2.0f64..2.0, k in -1.0f64..1.0, blk in 1usize..1024) {
        let x = HeadProperties { bgt0: b, slope: k, streaming: false }.budget_at(blk);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn exact_lines_are_recovered(a in -1.0f64..1.0, k in -0.5f64..0.5) {
        let pts: Vec<(usize, f64)> = SELECT_GRANULARITIES.iter().map(|&b| (b, a + k * (b as f64).log2())).collect();
        let fit = fit_curve(&pts).unwrap();
        prop_assert!((fit.slope - k).abs() <= 1e-9);
        prop_assert!((fit.intercept - a).abs() <= 1e-9);
    }

    #[test]
    fn queue_pops_in_sorted_order(prios in prop::collection::vec(0u8..20, 0..100)) {
        let tasks: Vec<SparseTask> = prios.iter().enumerate().map(|(i, &p)| task(i as u64, f64::from(p), 1.0)).collect();
        let mut q = enqueue_batch(tasks.clone()).unwrap();
        let mut expect = tasks;
        expect.sort_by(|a, b| b.priority.partial_cmp(&a.priority).unwrap().then(a.group.cmp(&b.group)));
        let mut got = Vec::new();
        while let Some(t) = q.pop() {
            got.push(t.group);
        }
        prop_assert_eq!(got, expect.iter().map(|t| t.group).collect::<Vec<_>>());
    }

    #[test]
    fn simulation_is_consistent_and_bounded(sizes in prop::collection::vec(1.0f64..1e7, 0..60), seed in any::<u64>()) {
        let tasks: Vec<SparseTask> = sizes.iter().enumerate().map(|(i, &s)| task(i as u64, s, s)).collect();
        let workers = WorkerProfile::default_pair();
        let rep = simulate(enqueue_batch(tasks.clone()).unwrap(), &workers).unwrap();
        let again = simulate(enqueue_batch(tasks.clone()).unwrap(), &workers).unwrap();
        prop_assert_eq!(&rep, &again);
        prop_assert!(rep.makespan >= makespan_lower_bound(&tasks, &workers) * (1.0 - 1e-12));
        for w in &rep.workers {
            prop_assert!((w.busy + w.idle - rep.makespan).abs() <= 1e-12 * (1.0 + rep.makespan));
            prop_assert!((0.0..=1.0).contains(&w.idle_ratio()));
        }
        let mut seen: Vec<u64> = rep.records.iter().map(|r| r.group).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..tasks.len() as u64).collect::<Vec<_>>());
        // Work conservation: every dispatch goes to the earliest-free worker.
        let mut free = vec![0.0f64; workers.len()];
        for r in &rep.records {
            let earliest = free.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(r.start, earliest);
            free[r.worker] = r.end;
        }
        for p in [Policy::NoParallel, Policy::Uniform, Policy::LengthBased] {
            let b = simulate_policy(&tasks, &workers, p).unwrap();
            prop_assert_eq!(b.records.len(), tasks.len());
            prop_assert!(b.makespan >= makespan_lower_bound(&tasks, &workers) * (1.0 - 1e-12));
        }
        let _ = seed;
    }

    #[test]
    fn normalization_is_standard_score(x in prop::collection::vec(-50.0f64..50.0, FEATURE_DIM), m in -5.0f64..5.0, s in 0.0f64..3.0) {
        let mut std = vec![s; FEATURE_DIM];
        std[0] = 0.0;
        let norms = FeatureNorms::new(vec![m; FEATURE_DIM], std).unwrap();
        let fv = FeatureVector::from_slice(&x).unwrap();
        let z = norms.normalize(&fv).unwrap();
        prop_assert_eq!(z.0[0], 0.0);
        for i in 1..FEATURE_DIM {
            if s > 0.0 {
                prop_assert!((z.0[i] - (x[i] - m) / s).abs() <= 1e-9 * (1.0 + z.0[i].abs()));
            } else {
                prop_assert_eq!(z.0[i], 0.0);
            }
        }
    }
}

fn task(group: u64, priority: f64, bytes: f64) -> SparseTask {
    SparseTask {
        group,
        priority,
        cost: TaskCost { bytes, flops: bytes },
        heads: 1 + (group as usize % 4),
        cpu_len: 1024,
    }
}

proptest! {
    #![proptest_config(cfg(8))]

    #[test]
    fn forward_matches_scalar_loops(seed in any::<u64>()) {
        let model = PredictorModel::init(seed);
        let mut r = rng(seed ^ 1);
        let x: Vec<f64> = (0..FEATURE_DIM).map(|_| gaussian(&mut r)).collect();
        let mut act = x.clone();
        for (li, layer) in model.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.output];
            for j in 0..layer.output {
                let mut s = layer.b[j];
                for i in 0..layer.input {
                    s += act[i] * layer.w[i * layer.output + j];
                }
                next[j] = if li + 1 < model.layers.len() { s.max(0.0) } else { s };
            }
            act = next;
        }
        let fv = FeatureVector::from_slice(&x).unwrap();
        let p = model.forward(&fv).unwrap();
        prop_assert!((p.bgt0 - act[0].clamp(0.0, 1.0)).abs() <= 1e-6);
        prop_assert!((p.slope - act[1]).abs() <= 1e-6);
        prop_assert!((p.streaming_prob - 1.0 / (1.0 + (-act[2]).exp())).abs() <= 1e-6);
        // Identity norms: predict and forward agree.
        prop_assert_eq!(model.predict(&fv).unwrap(), p);
    }

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>()) {
        let spec = WorkloadSpec { seed, samples: 1, layers: 1, context_len: 512, heads: 4, group_size: 2, dim: 16, decode_steps: 2, ..WorkloadSpec::default() };
        let a = generate_layer(&spec, 0, 0).unwrap();
        let b = generate_layer(&spec, 0, 0).unwrap();
        prop_assert_eq!(&a, &b);
        let c = generate_layer(&WorkloadSpec { seed: seed.wrapping_add(1), ..spec }, 0, 0).unwrap();
        prop_assert_ne!(a, c);
    }
}

#[test]
fn empty_segments_are_merge_identities() {
    let mut r = rng(3);
    let keys = random_matrix(&mut r, 10, 4, 1.0);
    let values = random_matrix(&mut r, 10, 4, 1.0);
    let q = random_vec(&mut r, 4, 1.0);
    let full = segment_attention(&q, &keys, &values).unwrap();
    let merged = merge_partials(&[PartialOutput::empty(4), full.clone(), PartialOutput::empty(4)]).unwrap();
    assert!(dist(&merged.out, &full.out) < 1e-15);
}

#[test]
fn budget_selection_realizes_at_least_the_request() {
    let mut r = rng(9);
    let keys = random_matrix(&mut r, 1000, 8, 1.0);
    let q = random_vec(&mut r, 8, 1.0);
    for blk in SELECT_GRANULARITIES {
        let meta = build_metadata(&keys, blk).unwrap();
        for budget in [0.0, 0.01, 0.05, 0.128, 0.5, 1.0] {
            let sel = select_budget(&q, &meta, budget).unwrap();
            assert!(sel.budget_realized >= budget - 1e-12, "blk {blk} budget {budget}");
        }
    }
}
