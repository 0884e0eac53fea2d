//! Run every merge operator over the same pool and weights, and inspect
//! the residual composer's per-block decisions.

use lorapool::merge::{merge_with_config, MergeConfig, MergeOperator};
use lorapool::search::WeightVector;
use lorapool::toy::{gen_toy_pool, toy_support_loss, OverlapMode, ToyPoolSpec};

fn main() -> lorapool::Result<()> {
    let scenario = gen_toy_pool(&ToyPoolSpec {
        seed: 23,
        n_adapters: 4,
        overlap_mode: OverlapMode::Mixed(45.0),
        noise_level: 0.3,
        n_tasks: 1,
        ..ToyPoolSpec::default()
    })?;
    let task = &scenario.tasks[0];
    let weights = WeightVector::new(
        scenario
            .bundles
            .iter()
            .enumerate()
            .map(|(i, b)| (b.adapter_id.clone(), 0.9 - 0.2 * i as f32))
            .collect(),
        -1.5,
        1.5,
    )?;

    let operators = [
        MergeOperator::Linear,
        MergeOperator::Lasrc,
        MergeOperator::Ties,
        MergeOperator::DareAdd,
        MergeOperator::DareTies,
    ];
    println!("{:<10} {:>12} {:>14}", "operator", "support loss", "bundle |.|_F");
    for op in operators {
        let cfg = MergeConfig {
            operator: op,
            ..MergeConfig::default()
        };
        let (merged, comps) = merge_with_config(&scenario.bundles, &weights, &scenario.blocks, &cfg)?;
        println!(
            "{:<10} {:>12.4} {:>14.4}",
            op.to_string(),
            toy_support_loss(task, &merged)?,
            merged.frobenius_norm()
        );
        if let Some(comps) = comps {
            for c in comps {
                println!(
                    "            block {}: gamma {:.3}, kept {:?}, pruned {:?}{}",
                    c.block_id,
                    c.gamma_b,
                    c.retained_ids,
                    c.pruned_ids,
                    if c.interpolated { "" } else { " (anchor fallback)" },
                );
            }
        }
    }
    Ok(())
}
