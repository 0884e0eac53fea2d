//! The full composition pipeline on synthetic pools: retrieve per view,
//! search weights, optionally sparsify, merge, predict, aggregate, score.
//!
//! Every stage is seeded and iterates containers in a fixed order, so one
//! options value maps to one byte-exact artifact set. The weight search
//! always optimizes the plain weighted sum; swapping the merge operator
//! afterwards changes only the composed bundles and everything downstream
//! of them, which is what makes operator comparisons matched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agg::{
    aggregate_task, save_decisions, save_view_predictions, AggregationMode, DecisionRow,
    ViewPredictionRow, ViewRecord,
};
use crate::container::load_bundle;
use crate::error::{Error, Result};
use crate::eval::{em_percent, exact_match, EmReport, PredictionFile, PredictionRecord};
use crate::merge::{merge_with_config, BlockDiagnostic, MergeConfig, MergeOperator};
use crate::retrieval::{
    build_support, load_manifest, retrieve_view, support_centroid, PoolManifest, SupportExample,
};
use crate::sdp::{sdp_bundle, SdpConfig};
use crate::search::{search_weights, SearchConfig};
use crate::tensor::{AdapterBundle, BlockMap};
use crate::toy::{
    gen_toy_pool, load_tasks, save_scenario, toy_predictions, toy_support_loss, ToyComposedLoss,
    ToyPoolSpec, ToyTask,
};

pub const SUPPORT_K: usize = 5;
pub const SUPPORT_OFFSET: usize = 10;
pub const GLOBAL_BUDGET: usize = 20;
pub const LOCAL_BUDGET: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Generate a synthetic pool into the output directory.
    pub toy: Option<ToyPoolSpec>,
    /// Use an existing pool directory (manifest.json, bundles/, tasks/).
    pub pool_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub merge: MergeConfig,
    /// Sparsify retrieved bundles before weight search and merging.
    pub sdp: Option<SdpConfig>,
    pub mode: AggregationMode,
    /// Restrict to these view ids; default is every manifest view.
    pub views: Option<Vec<String>>,
    pub support_k: usize,
    pub support_offset: usize,
    pub global_budget: usize,
    pub local_budget: usize,
    pub search: SearchConfig,
}

impl PipelineOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        PipelineOptions {
            toy: None,
            pool_dir: None,
            out_dir: out_dir.into(),
            merge: MergeConfig::default(),
            sdp: None,
            mode: AggregationMode::Support,
            views: None,
            support_k: SUPPORT_K,
            support_offset: SUPPORT_OFFSET,
            global_budget: GLOBAL_BUDGET,
            local_budget: LOCAL_BUDGET,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub em: f64,
    pub n_queries: usize,
    pub path_cost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub method: String,
    pub mode: AggregationMode,
    /// True when any output used evaluation labels (oracle mode).
    pub diagnostic: bool,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sdp_drop_rate: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sdp_seed: Option<u64>,
    pub views: Vec<String>,
    pub path_cost_total: usize,
    pub macro_em: f64,
    pub micro_em: f64,
    pub per_task: Vec<TaskSummary>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub summary: PipelineSummary,
    pub eval: EmReport,
    /// Every file the run wrote, in writing order.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RetrievalLogRow<'a> {
    task_id: &'a str,
    view_id: &'a str,
    candidates: &'a [String],
}

#[derive(Debug, Serialize)]
struct TaggedDiagnostic<'a> {
    task_id: &'a str,
    view_id: &'a str,
    #[serde(flatten)]
    diagnostic: BlockDiagnostic,
}

fn support_examples(task: &ToyTask) -> Vec<SupportExample> {
    task.support
        .iter()
        .enumerate()
        .map(|(i, ex)| SupportExample {
            example_id: format!("s{i}"),
            input_text: serde_json::to_string(&ex.x).expect("static schema"),
            reference_text: crate::toy::argmax_label(&ex.y),
        })
        .collect()
}

fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("static schema");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Run the pipeline and write every artifact under `out_dir`.
pub fn run_pipeline(opts: &PipelineOptions) -> Result<PipelineOutcome> {
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut artifacts: Vec<PathBuf> = Vec::new();

    // Pool: generate into out/pool or point at an existing directory. Both
    // paths then load from disk, so the hashed files are the ones used.
    let pool_dir = match (&opts.toy, &opts.pool_dir) {
        (Some(spec), None) => {
            let scenario = gen_toy_pool(spec)?;
            let pool_dir = out.join("pool");
            save_scenario(&scenario, &pool_dir)?;
            artifacts.push(pool_dir.join("manifest.json"));
            for entry in &scenario.manifest.adapters {
                artifacts.push(pool_dir.join(&entry.bundle_path));
            }
            for task in &scenario.tasks {
                artifacts.push(pool_dir.join("tasks").join(format!("{}.json", task.task_id)));
            }
            pool_dir
        }
        (None, Some(dir)) => dir.clone(),
        (Some(_), Some(_)) => {
            return Err(Error::Usage(
                "give either a toy spec or a pool directory, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Usage(
                "the pipeline needs a toy spec or a pool directory".into(),
            ))
        }
    };

    let manifest: PoolManifest = load_manifest(pool_dir.join("manifest.json"))?;
    let mut bundles: BTreeMap<String, AdapterBundle> = BTreeMap::new();
    for entry in &manifest.adapters {
        let bundle = load_bundle(pool_dir.join(&entry.bundle_path))?;
        if bundle.adapter_id != entry.adapter_id {
            return Err(Error::Format(format!(
                "bundle {} carries adapter id {}, manifest says {}",
                entry.bundle_path, bundle.adapter_id, entry.adapter_id
            )));
        }
        bundles.insert(entry.adapter_id.clone(), bundle);
    }
    let tasks = load_tasks(&pool_dir)?;
    if tasks.is_empty() {
        return Err(Error::Invariant("pool has no tasks".into()));
    }

    let first = bundles
        .values()
        .next()
        .ok_or_else(|| Error::Invariant("pool has no adapters".into()))?;
    let blocks = BlockMap::by_leading_segment(first.tensor_names());

    let view_ids: Vec<String> = match &opts.views {
        Some(ids) => {
            for id in ids {
                manifest.view_index(id)?;
            }
            ids.clone()
        }
        None => manifest.views.keys().cloned().collect(),
    };
    if view_ids.is_empty() {
        return Err(Error::Invariant("no views to run".into()));
    }

    let weights_dir = out.join("weights");
    let composed_dir = out.join("composed");
    let support_dir = out.join("support");
    for d in [&weights_dir, &composed_dir, &support_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut view_rows: Vec<ViewPredictionRow> = Vec::new();
    let mut retrieval_log: Vec<(String, String, Vec<String>)> = Vec::new();
    let mut diagnostics: Vec<(String, String, BlockDiagnostic)> = Vec::new();
    let mut decisions: Vec<DecisionRow> = Vec::new();
    let mut final_records: Vec<PredictionRecord> = Vec::new();
    let mut per_task: Vec<TaskSummary> = Vec::new();
    let mut path_cost_total = 0usize;

    for task in &tasks {
        if task.queries.is_empty() {
            return Err(Error::Invariant(format!("task {} has no queries", task.task_id)));
        }
        let windowed = task.support_window(opts.support_k, opts.support_offset)?;

        // Protocol bookkeeping: the support set is an explicit artifact.
        let support_set = build_support(
            &task.task_id,
            &support_examples(task),
            opts.support_k,
            opts.support_offset,
        )?;
        let support_path = support_dir.join(format!("{}.json", task.task_id));
        let text = serde_json::to_string_pretty(&support_set).expect("static schema");
        fs::write(&support_path, text).map_err(|e| Error::io(&support_path, e))?;
        artifacts.push(support_path);

        let references: BTreeMap<String, String> = (0..task.queries.len())
            .map(|j| (task.query_id(j), task.reference_answer(j)))
            .collect();

        let mut records: Vec<ViewRecord> = Vec::new();
        for view_id in &view_ids {
            let index = manifest.view_index(view_id)?;
            let support_vecs = windowed.support_embeddings.get(view_id).ok_or_else(|| {
                Error::Invariant(format!(
                    "task {} has no support embeddings for view {view_id}",
                    task.task_id
                ))
            })?;
            let query_vecs = task.query_embeddings.get(view_id).ok_or_else(|| {
                Error::Invariant(format!(
                    "task {} has no query embeddings for view {view_id}",
                    task.task_id
                ))
            })?;
            // One composed model per view, so the local probe is the query
            // centroid rather than a per-query vector.
            let query_probe = support_centroid(query_vecs)?;
            let candidates = retrieve_view(
                index,
                support_vecs,
                Some(&query_probe),
                opts.global_budget,
                opts.local_budget,
            )?;
            retrieval_log.push((task.task_id.clone(), view_id.clone(), candidates.clone()));

            let mut subset: Vec<AdapterBundle> = candidates
                .iter()
                .map(|id| {
                    bundles
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Invariant(format!("retrieved unknown adapter {id}")))
                })
                .collect::<Result<_>>()?;
            if let Some(sdp) = &opts.sdp {
                for b in subset.iter_mut() {
                    let (pruned, _masks) = sdp_bundle(b, sdp)?;
                    *b = pruned;
                }
            }

            let mut evaluator = ToyComposedLoss {
                task: &windowed,
                bundles: &subset,
                adapter_ids: &candidates,
            };
            let outcome = search_weights(&mut evaluator, &candidates, &opts.search)?;
            let weights_path = weights_dir.join(format!("{}--{}.json", task.task_id, view_id));
            outcome.weights.save(&weights_path)?;
            artifacts.push(weights_path);

            let (merged, comps) = merge_with_config(&subset, &outcome.weights, &blocks, &opts.merge)?;
            let composed_path = composed_dir.join(format!("{}--{}.bin", task.task_id, view_id));
            crate::container::save_bundle(&merged, &composed_path)?;
            artifacts.push(composed_path);
            if let Some(comps) = comps {
                for c in &comps {
                    diagnostics.push((task.task_id.clone(), view_id.clone(), c.into()));
                }
            }

            let support_loss = toy_support_loss(&windowed, &merged)? as f32;
            let mut predictions = BTreeMap::new();
            for (query_id, answer) in toy_predictions(task, &merged)? {
                view_rows.push(ViewPredictionRow {
                    task_id: task.task_id.clone(),
                    view_id: view_id.clone(),
                    query_id: query_id.clone(),
                    raw_prediction: answer.clone(),
                    support_loss,
                    reference: references.get(&query_id).cloned(),
                });
                predictions.insert(query_id, answer);
            }
            records.push(ViewRecord {
                view_id: view_id.clone(),
                support_loss,
                predictions,
            });
        }

        let agg = aggregate_task(&task.task_id, &records, opts.mode, Some(&references))?;
        decisions.extend(agg.decisions);
        path_cost_total += agg.path_cost;

        let mut correct = 0usize;
        for (query_id, answer) in &agg.answers {
            let reference = references.get(query_id).ok_or_else(|| {
                Error::Invariant(format!(
                    "task {}: no reference for query {query_id}",
                    task.task_id
                ))
            })?;
            let record = PredictionRecord {
                task_id: task.task_id.clone(),
                query_id: query_id.clone(),
                prediction: answer.clone(),
                reference: reference.clone(),
                diagnostic: agg.diagnostic,
            };
            if record.is_correct() {
                correct += 1;
            }
            final_records.push(record);
        }
        per_task.push(TaskSummary {
            task_id: task.task_id.clone(),
            em: em_percent(correct as f64 / agg.answers.len() as f64),
            n_queries: agg.answers.len(),
            path_cost: agg.path_cost,
        });
    }

    let views_path = out.join("views.jsonl");
    save_view_predictions(&view_rows, &views_path)?;
    artifacts.push(views_path);

    let retrieval_path = out.join("retrieval.jsonl");
    let log_rows: Vec<RetrievalLogRow> = retrieval_log
        .iter()
        .map(|(t, v, c)| RetrievalLogRow {
            task_id: t,
            view_id: v,
            candidates: c,
        })
        .collect();
    write_jsonl(&log_rows, &retrieval_path)?;
    artifacts.push(retrieval_path);

    if opts.merge.operator == MergeOperator::Lasrc {
        let diag_path = out.join("diagnostics.jsonl");
        let rows: Vec<TaggedDiagnostic> = diagnostics
            .iter()
            .map(|(t, v, d)| TaggedDiagnostic {
                task_id: t,
                view_id: v,
                diagnostic: d.clone(),
            })
            .collect();
        write_jsonl(&rows, &diag_path)?;
        artifacts.push(diag_path);
    }

    let decisions_path = out.join("decisions.jsonl");
    save_decisions(&decisions, &decisions_path)?;
    artifacts.push(decisions_path);

    let predictions = PredictionFile::new(final_records)?;
    let predictions_path = out.join("predictions.jsonl");
    predictions.save(&predictions_path)?;
    artifacts.push(predictions_path);

    let eval = exact_match(&predictions)?;
    let eval_path = out.join("eval.json");
    let text = serde_json::to_string_pretty(&eval).expect("static schema");
    fs::write(&eval_path, text).map_err(|e| Error::io(&eval_path, e))?;
    artifacts.push(eval_path);

    let mut seeds = vec![opts.search.seed];
    if let Some(sdp) = &opts.sdp {
        if !seeds.contains(&sdp.seed) {
            seeds.push(sdp.seed);
        }
    }
    if matches!(opts.merge.operator, MergeOperator::DareAdd | MergeOperator::DareTies)
        && !seeds.contains(&opts.merge.dare_seed)
    {
        seeds.push(opts.merge.dare_seed);
    }
    if let Some(spec) = &opts.toy {
        if !seeds.contains(&spec.seed) {
            seeds.push(spec.seed);
        }
    }

    let summary = PipelineSummary {
        method: opts.merge.operator.to_string(),
        mode: opts.mode,
        diagnostic: opts.mode == AggregationMode::Oracle,
        seeds,
        sdp_drop_rate: opts.sdp.as_ref().map(|s| s.drop_rate),
        sdp_seed: opts.sdp.as_ref().map(|s| s.seed),
        views: view_ids,
        path_cost_total,
        macro_em: em_percent(eval.macro_avg),
        micro_em: em_percent(eval.micro_avg),
        per_task,
    };
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("static schema");
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    artifacts.push(summary_path);

    Ok(PipelineOutcome {
        summary,
        eval,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::sha256_file;

    fn toy_options(dir: &Path, seed: u64) -> PipelineOptions {
        let mut opts = PipelineOptions::new(dir);
        opts.toy = Some(ToyPoolSpec {
            seed,
            ..ToyPoolSpec::default()
        });
        opts
    }

    #[test]
    fn runs_end_to_end_on_a_toy_pool() {
        let dir = tempfile::tempdir().unwrap();
        let opts = toy_options(dir.path(), 7);
        let outcome = run_pipeline(&opts).unwrap();
        assert!(outcome.summary.path_cost_total > 0);
        assert_eq!(outcome.summary.per_task.len(), 2);
        assert!(!outcome.summary.diagnostic);
        for p in &outcome.artifacts {
            assert!(p.exists(), "missing artifact {}", p.display());
        }
    }

    #[test]
    fn two_runs_are_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = run_pipeline(&toy_options(d1.path(), 7)).unwrap();
        let o2 = run_pipeline(&toy_options(d2.path(), 7)).unwrap();
        assert_eq!(o1.artifacts.len(), o2.artifacts.len());
        for (a, b) in o1.artifacts.iter().zip(&o2.artifacts) {
            assert_eq!(
                a.strip_prefix(d1.path()).unwrap(),
                b.strip_prefix(d2.path()).unwrap()
            );
            assert_eq!(
                sha256_file(a).unwrap(),
                sha256_file(b).unwrap(),
                "artifact {} differs",
                a.display()
            );
        }
    }

    #[test]
    fn method_swap_changes_only_downstream_artifacts() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut a = toy_options(d1.path(), 7);
        a.merge.operator = MergeOperator::Linear;
        let mut b = toy_options(d2.path(), 7);
        b.merge.operator = MergeOperator::Ties;
        run_pipeline(&a).unwrap();
        run_pipeline(&b).unwrap();
        // Upstream artifacts are method-independent.
        for rel in [
            "pool/manifest.json",
            "retrieval.jsonl",
            "weights/task00--block0.json",
            "weights/task01--block1.json",
            "support/task00.json",
        ] {
            assert_eq!(
                sha256_file(d1.path().join(rel)).unwrap(),
                sha256_file(d2.path().join(rel)).unwrap(),
                "{rel} should not depend on the merge operator"
            );
        }
        // Composed bundles differ.
        assert_ne!(
            sha256_file(d1.path().join("composed/task00--block0.bin")).unwrap(),
            sha256_file(d2.path().join("composed/task00--block0.bin")).unwrap()
        );
    }

    #[test]
    fn oracle_mode_marks_outputs_as_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = toy_options(dir.path(), 7);
        opts.mode = AggregationMode::Oracle;
        let outcome = run_pipeline(&opts).unwrap();
        assert!(outcome.summary.diagnostic);
        let preds = PredictionFile::load(dir.path().join("predictions.jsonl")).unwrap();
        assert!(preds.records.iter().all(|r| r.diagnostic));
        let text = fs::read_to_string(dir.path().join("predictions.jsonl")).unwrap();
        assert!(text.contains("\"diagnostic\":true"));
    }

    #[test]
    fn sdp_stage_changes_composition_but_stays_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let d3 = tempfile::tempdir().unwrap();
        let plain = toy_options(d1.path(), 7);
        let mut sdp = toy_options(d2.path(), 7);
        sdp.sdp = Some(SdpConfig::default());
        let mut sdp2 = toy_options(d3.path(), 7);
        sdp2.sdp = Some(SdpConfig::default());
        run_pipeline(&plain).unwrap();
        run_pipeline(&sdp).unwrap();
        run_pipeline(&sdp2).unwrap();
        let rel = "composed/task00--block0.bin";
        assert_ne!(
            sha256_file(d1.path().join(rel)).unwrap(),
            sha256_file(d2.path().join(rel)).unwrap()
        );
        assert_eq!(
            sha256_file(d2.path().join(rel)).unwrap(),
            sha256_file(d3.path().join(rel)).unwrap()
        );
    }

    #[test]
    fn rejects_contradictory_pool_sources() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = toy_options(dir.path(), 7);
        opts.pool_dir = Some(dir.path().join("pool"));
        let err = run_pipeline(&opts).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
