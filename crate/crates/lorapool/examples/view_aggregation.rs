//! Aggregate answers from several task views: support-loss weighting,
//! uniform voting, and the label-peeking oracle diagnostic.

use std::collections::BTreeMap;

use lorapool::agg::{aggregate_task, AggregationMode, ViewRecord};

fn view(id: &str, loss: f32, answers: &[(&str, &str)]) -> ViewRecord {
    ViewRecord {
        view_id: id.to_string(),
        support_loss: loss,
        predictions: answers
            .iter()
            .map(|(q, a)| (q.to_string(), a.to_string()))
            .collect(),
    }
}

fn main() -> lorapool::Result<()> {
    // Three views of one task. The attention view fits the support set
    // best but misreads q3; the mlp view fits worse yet answers everything
    // right, which only the label-peeking oracle can know.
    let views = vec![
        view("attn", 0.2, &[("q1", "Paris"), ("q2", "4"), ("q3", "red")]),
        view("mlp", 0.9, &[("q1", "Paris"), ("q2", "4"), ("q3", "blue")]),
        view("embed", 1.5, &[("q1", "Rome"), ("q2", "5"), ("q3", "red")]),
    ];
    let references: BTreeMap<String, String> = [("q1", "paris"), ("q2", "4"), ("q3", "blue")]
        .into_iter()
        .map(|(q, a)| (q.to_string(), a.to_string()))
        .collect();

    for mode in [
        AggregationMode::Support,
        AggregationMode::Uniform,
        AggregationMode::Oracle,
    ] {
        let agg = aggregate_task("demo", &views, mode, Some(&references))?;
        let correct = agg
            .answers
            .iter()
            .filter(|(q, a)| references[*q] == **a)
            .count();
        println!(
            "{:<8} weights {:?}",
            agg.mode.to_string(),
            agg.weights
                .weights
                .iter()
                .map(|(v, w)| format!("{v}={w:.3}"))
                .collect::<Vec<_>>()
        );
        println!(
            "         answers {:?}  ({correct}/3 correct{})",
            agg.answers,
            if agg.diagnostic { ", DIAGNOSTIC: saw labels" } else { "" }
        );
    }
    println!("every mode consumed 3 prediction paths (one per view)");
    Ok(())
}
