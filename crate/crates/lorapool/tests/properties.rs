//! Property tests for invariants that should hold on arbitrary inputs, not
//! just the seeded fixtures the unit tests use.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use lorapool::agg::{aggregate_task, reliability_weights, AggregationMode, ViewRecord};
use lorapool::eval::normalize_answer;
use lorapool::merge::{merge_with_config, MergeConfig, MergeOperator};
use lorapool::retrieval::{cosine_topk, retrieve_view, ViewIndex};
use lorapool::sdp::{apply_sdp, sample_mask, SdpConfig};
use lorapool::search::{search_weights, SearchConfig, WeightVector};
use lorapool::tensor::{AdapterBundle, BlockMap, TensorBlob};

fn small_value() -> impl Strategy<Value = f32> {
    prop_oneof![
        3 => -8.0f32..8.0,
        1 => Just(0.0f32),
    ]
}

fn pool_strategy() -> impl Strategy<Value = Vec<AdapterBundle>> {
    // 2..=4 adapters sharing 1..=2 tensors of 6 entries each.
    (2usize..=4, 1usize..=2).prop_flat_map(|(n_adapters, n_tensors)| {
        proptest::collection::vec(
            proptest::collection::vec(small_value(), 6 * n_tensors),
            n_adapters,
        )
        .prop_map(move |per_adapter| {
            per_adapter
                .into_iter()
                .enumerate()
                .map(|(i, values)| {
                    let mut b = AdapterBundle::new(format!("a{i}"));
                    for (t, chunk) in values.chunks(6).enumerate() {
                        b.insert(
                            TensorBlob::new(format!("blk{t}.w"), vec![2, 3], chunk.to_vec())
                                .unwrap(),
                        );
                    }
                    b
                })
                .collect()
        })
    })
}

proptest! {
    // Normalization is a projection: applying it twice changes nothing.
    #[test]
    fn normalized_answers_are_fixed_points(s in ".{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    // Every merge operator is invariant to the order bundles arrive in.
    #[test]
    fn merge_operators_ignore_bundle_order(
        bundles in pool_strategy(),
        raw_weights in proptest::collection::vec(-1.2f32..1.2, 4),
        op_pick in 0usize..5,
    ) {
        let weights = WeightVector::new(
            bundles
                .iter()
                .zip(&raw_weights)
                .map(|(b, &w)| (b.adapter_id.clone(), w))
                .collect(),
            -1.5,
            1.5,
        ).unwrap();
        let blocks = BlockMap::by_leading_segment(bundles[0].tensor_names());
        let cfg = MergeConfig {
            operator: [
                MergeOperator::Linear,
                MergeOperator::Lasrc,
                MergeOperator::Ties,
                MergeOperator::DareAdd,
                MergeOperator::DareTies,
            ][op_pick],
            ..MergeConfig::default()
        };
        let (forward, _) = merge_with_config(&bundles, &weights, &blocks, &cfg).unwrap();
        let mut shuffled = bundles.clone();
        shuffled.reverse();
        let (backward, _) = merge_with_config(&shuffled, &weights, &blocks, &cfg).unwrap();
        for (name, t) in &forward.tensors {
            let u = &backward.tensors[name];
            for (a, b) in t.data.iter().zip(&u.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    // Reliability weights form a distribution and ignore a power-of-two
    // rescaling of every loss.
    #[test]
    fn reliability_weights_are_a_scale_free_distribution(
        losses in proptest::collection::btree_map("v[a-d]", 1e-6f32..1e3, 1..5)
    ) {
        let w = reliability_weights(&losses).unwrap();
        let sum: f64 = w.weights.values().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(w.weights.values().all(|&x| x >= 0.0));

        let doubled: BTreeMap<String, f32> =
            losses.iter().map(|(k, &v)| (k.clone(), 2.0 * v)).collect();
        let w2 = reliability_weights(&doubled).unwrap();
        for (k, v) in &w.weights {
            prop_assert_eq!(v.to_bits(), w2.weights[k].to_bits());
        }
    }

    // Masks are pure functions of (seed, adapter, tensor); dropped entries
    // land at exactly zero and kept entries pass through untouched when no
    // rescaling is requested.
    #[test]
    fn sdp_masks_are_deterministic_projections(
        values in proptest::collection::vec(-5.0f32..5.0, 8),
        p in 0.0f32..0.95,
        seed in 0u64..1000,
    ) {
        let cfg = SdpConfig {
            drop_rate: p,
            seed,
            survivor_rescale: false,
            norm_preserve: false,
        };
        let mask = sample_mask("ad", "t.w", &[8], &cfg);
        let again = sample_mask("ad", "t.w", &[8], &cfg);
        prop_assert_eq!(&mask.bits, &again.bits);

        let tensor = TensorBlob::new("t.w", vec![8], values.clone()).unwrap();
        let out = apply_sdp(&tensor, &mask, &cfg).unwrap();
        for ((&v, &o), &bit) in values.iter().zip(&out.data).zip(&mask.bits) {
            if bit == 0 {
                prop_assert_eq!(o, 0.0);
            } else {
                prop_assert_eq!(o.to_bits(), v.to_bits());
            }
        }
    }

    // Retrieval returns unique, in-pool ids within budget, ranked by
    // non-increasing similarity.
    #[test]
    fn retrieval_stays_within_pool_and_budget(
        vectors in proptest::collection::btree_map(
            "p[a-h]",
            proptest::collection::vec(-3.0f32..3.0, 4),
            2..8,
        ),
        support in proptest::collection::vec(
            proptest::collection::vec(-3.0f32..3.0, 4),
            1..4,
        ),
        global_k in 1usize..10,
        local_k in 1usize..10,
    ) {
        let pool: BTreeSet<String> = vectors.keys().cloned().collect();
        let index = ViewIndex::from_vectors(vectors).unwrap();

        let ranked = cosine_topk(&support[0], &index, pool.len()).unwrap();
        for pair in ranked.windows(2) {
            prop_assert!(pair[0].similarity >= pair[1].similarity);
        }

        let got = retrieve_view(&index, &support, None, global_k, local_k).unwrap();
        let unique: BTreeSet<&String> = got.iter().collect();
        prop_assert_eq!(unique.len(), got.len(), "duplicates in {:?}", &got);
        prop_assert!(got.iter().all(|id| pool.contains(id)));
        prop_assert!(got.len() <= global_k.min(pool.len()) + local_k.min(pool.len()));
        prop_assert!(!got.is_empty());
    }

    // The search never leaves the clip box and never returns anything worse
    // than its zero-vector starting point.
    #[test]
    fn search_stays_in_the_box_and_never_regresses(
        cx in -3.0f64..3.0,
        cy in -3.0f64..3.0,
        seed in 0u64..500,
        steps in 5usize..40,
    ) {
        let ids = vec!["a".to_string(), "b".to_string()];
        let cfg = SearchConfig { steps, seed, ..SearchConfig::default() };
        let f = |w: &[f32]| {
            (w[0] as f64 - cx).powi(2) + (w[1] as f64 - cy).powi(2)
        };
        let mut evaluator = f;
        let outcome = search_weights(&mut evaluator, &ids, &cfg).unwrap();
        for &w in outcome.weights.weights.values() {
            prop_assert!((cfg.clip_lo as f32..=cfg.clip_hi as f32).contains(&w));
        }
        let at_zero = f(&[0.0, 0.0]);
        prop_assert!(outcome.objective <= at_zero + 1e-12);
    }

    // Aggregation answers one query per id, picks only answers some view
    // actually produced, and bills one path per view.
    #[test]
    fn aggregation_selects_only_proposed_answers(
        losses in proptest::collection::vec(0.0f32..3.0, 2..5),
        answer_picks in proptest::collection::vec(0usize..3, 2 * 5usize),
        n_queries in 1usize..4,
        uniform in proptest::bool::ANY,
    ) {
        let alphabet = ["Yes", "no.", "  Maybe  "];
        let queries: Vec<String> = (0..n_queries).map(|q| format!("q{q}")).collect();
        let views: Vec<ViewRecord> = losses
            .iter()
            .enumerate()
            .map(|(v, &loss)| ViewRecord {
                view_id: format!("v{v}"),
                support_loss: loss,
                predictions: queries
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        let pick = answer_picks[(v * 5 + qi) % answer_picks.len()];
                        (q.clone(), alphabet[pick].to_string())
                    })
                    .collect(),
            })
            .collect();
        let mode = if uniform { AggregationMode::Uniform } else { AggregationMode::Support };
        let agg = aggregate_task("t", &views, mode, None).unwrap();

        prop_assert_eq!(agg.path_cost, views.len());
        let sum: f64 = agg.weights.weights.values().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        let keys: Vec<&String> = agg.answers.keys().collect();
        prop_assert_eq!(keys, queries.iter().collect::<Vec<_>>());
        for (q, answer) in &agg.answers {
            let proposed: BTreeSet<String> = views
                .iter()
                .map(|v| normalize_answer(&v.predictions[q]))
                .collect();
            prop_assert!(proposed.contains(answer), "{} not proposed for {}", answer, q);
        }
    }

    // Splitting by leading segment is a partition: every name lands in
    // exactly one block, under its own first dot-separated segment.
    #[test]
    fn block_partition_covers_every_name_once(
        names in proptest::collection::btree_set("[a-c]{1,2}(\\.[a-z]{1,2}){0,2}", 1..12)
    ) {
        let map = BlockMap::by_leading_segment(names.iter().cloned());
        let mut seen = BTreeSet::new();
        for (block, members) in &map.blocks {
            for name in members {
                prop_assert_eq!(name.split('.').next().unwrap(), block.as_str());
                prop_assert!(seen.insert(name.clone()), "{} in two blocks", name);
            }
        }
        prop_assert_eq!(seen, names);
    }
}
