//! Two-stage candidate retrieval: a global shortlist around the support
//! centroid, then a local top-up around the query embedding.

use std::collections::BTreeMap;

use lorapool::retrieval::{cosine_topk, retrieve_view, support_centroid, ViewIndex};

fn main() -> lorapool::Result<()> {
    // Per-adapter signature vectors for one view of the pool.
    let vectors: BTreeMap<String, Vec<f32>> = [
        ("code-fix", vec![0.9, 0.1, 0.0]),
        ("code-gen", vec![0.8, 0.3, 0.1]),
        ("math", vec![0.1, 0.9, 0.2]),
        ("translation", vec![0.0, 0.2, 0.9]),
        ("summarization", vec![0.2, 0.1, 0.8]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let index = ViewIndex::from_vectors(vectors)?;

    // Support examples cluster near the coding adapters.
    let support = vec![
        vec![0.85, 0.20, 0.05],
        vec![0.95, 0.05, 0.10],
        vec![0.70, 0.25, 0.00],
    ];
    let centroid = support_centroid(&support)?;
    println!("support centroid: {centroid:?}");
    for r in cosine_topk(&centroid, &index, 5)? {
        println!("  {:<14} similarity {:.4}", r.adapter_id, r.similarity);
    }

    // One query leans toward translation; the local stage picks it up even
    // though the global shortlist would not.
    let query = vec![0.1, 0.1, 0.95];
    let candidates = retrieve_view(&index, &support, Some(&query), 2, 2)?;
    println!("global 2 + local 2 candidates: {candidates:?}");

    let without_query = retrieve_view(&index, &support, None, 2, 2)?;
    println!("same budgets, no query signal:  {without_query:?}");
    Ok(())
}
