//! Search per-adapter support weights for an unseen task with the
//! evaluate-only (1+1) strategy, then compare against single adapters.

use lorapool::merge::linear_merge;
use lorapool::search::{search_weights, SearchConfig, WeightVector};
use lorapool::toy::{gen_toy_pool, toy_support_loss, ToyComposedLoss, ToyPoolSpec};

fn main() -> lorapool::Result<()> {
    let scenario = gen_toy_pool(&ToyPoolSpec {
        seed: 17,
        n_adapters: 4,
        n_tasks: 1,
        ..ToyPoolSpec::default()
    })?;
    let task = &scenario.tasks[0];
    let ids: Vec<String> = scenario.bundles.iter().map(|b| b.adapter_id.clone()).collect();

    // Baseline: each adapter alone, unit weight.
    for id in &ids {
        let solo = WeightVector::new(
            ids.iter()
                .map(|i| (i.clone(), if i == id { 1.0 } else { 0.0 }))
                .collect(),
            -1.5,
            1.5,
        )?;
        let merged = linear_merge(&scenario.bundles, &solo)?;
        println!("{id} alone: support loss {:.4}", toy_support_loss(task, &merged)?);
    }

    let mut evaluator = ToyComposedLoss {
        task,
        bundles: &scenario.bundles,
        adapter_ids: &ids,
    };
    let cfg = SearchConfig::default();
    let outcome = search_weights(&mut evaluator, &ids, &cfg)?;
    println!(
        "searched {} evaluations: loss {:.4} (objective {:.4} with the size penalty)",
        outcome.evaluations, outcome.loss, outcome.objective
    );
    for (id, w) in &outcome.weights.weights {
        println!("  {id}: {w:+.3}");
    }

    let merged = linear_merge(&scenario.bundles, &outcome.weights)?;
    println!("composed support loss: {:.4}", toy_support_loss(task, &merged)?);
    Ok(())
}
