//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; every artifact-producing run also writes a run manifest with
//! input and output digests so it can be replayed and checked.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format problem, 3 violated
//! invariant. A TOML config file named by LORAPOOL_CONFIG supplies
//! defaults; explicit flags always win.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::agg::{aggregate_task, group_view_predictions, load_view_predictions, AggregationMode};
use crate::container::{load_bundle, save_bundle};
use crate::error::{Error, Result};
use crate::eval::{em_percent, exact_match, render_audit, PredictionFile, PredictionRecord};
use crate::manifest::{manifest_path_for, stamp_files, RunManifest};
use crate::merge::{merge_with_config, write_diagnostics, LasrcConfig, MergeConfig, MergeOperator};
use crate::pipeline::{run_pipeline, PipelineOptions, GLOBAL_BUDGET, LOCAL_BUDGET, SUPPORT_K, SUPPORT_OFFSET};
use crate::retrieval::{load_manifest, retrieve_view, support_centroid, PoolManifest};
use crate::sdp::{save_masks, sdp_bundle, SdpConfig};
use crate::search::{search_weights, LossEvaluator, SearchConfig, WeightVector};
use crate::tensor::{AdapterBundle, BlockMap};
use crate::toy::{gen_toy_pool, save_scenario, OverlapMode, ToyComposedLoss, ToyPoolSpec, ToyTask};

pub const CONFIG_ENV_VAR: &str = "LORAPOOL_CONFIG";

/// Optional defaults loaded from the config file. Every field can be
/// overridden by a flag.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub method: Option<String>,
    pub mode: Option<String>,
    pub gamma: Option<f32>,
    pub gamma_floor: Option<f32>,
    pub norm_guard: Option<f32>,
    pub prune_threshold: Option<f32>,
    pub consensus_scale: Option<f32>,
    pub alignment_scale: Option<f32>,
    pub overlap_adaptive: Option<bool>,
    pub ties_trim: Option<f32>,
    pub p: Option<f32>,
    pub seeds: Option<Vec<u64>>,
    pub views: Option<Vec<String>>,
    pub permutations: Option<usize>,
    pub bootstrap: Option<usize>,
    pub steps: Option<usize>,
    pub lambda: Option<f64>,
    pub clip_lo: Option<f64>,
    pub clip_hi: Option<f64>,
    pub support_k: Option<usize>,
    pub support_offset: Option<usize>,
    pub global_budget: Option<usize>,
    pub local_budget: Option<usize>,
}

pub fn load_file_config() -> Result<FileConfig> {
    match std::env::var_os(CONFIG_ENV_VAR) {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let path = PathBuf::from(path);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "lorapool",
    version,
    about = "Compose pools of low-rank adapter updates: retrieval, weight search, \
             sparsification, interference-controlled merging, multi-view answer \
             aggregation, and paired statistical audits."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank pool adapters against a task's support and query embeddings.
    Retrieve(RetrieveArgs),
    /// Search per-adapter merge weights against a support loss.
    SearchWeights(SearchWeightsArgs),
    /// Sparsify adapter bundles with seeded drop-and-rescale masks.
    Sdp(SdpArgs),
    /// Merge adapter bundles into one composed update.
    Merge(MergeArgs),
    /// Combine per-view predictions into final answers.
    Aggregate(AggregateArgs),
    /// Score a prediction file with normalized exact match.
    Eval(EvalArgs),
    /// Paired statistical audit of two prediction files.
    Audit(AuditArgs),
    /// Generate a synthetic pool with controlled overlap.
    Toygen(ToygenArgs),
    /// Run the whole chain end to end, or replay a recorded run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonSeeds {
    /// Seed; repeat the flag for multi-seed subcommands.
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug, Clone)]
struct MergeKnobs {
    /// Operator: linear, lasrc, ties, dare-add, dare-ties.
    #[arg(long)]
    method: Option<String>,
    /// Base interpolation factor toward the rescaled residual.
    #[arg(long)]
    gamma: Option<f32>,
    /// Lower bound the overlap schedule cannot go below.
    #[arg(long)]
    gamma_floor: Option<f32>,
    /// Fall back to the plain sum when the residual norm is below this
    /// fraction of the anchor norm.
    #[arg(long)]
    norm_guard: Option<f32>,
    /// Prune residuals whose norm ratio is at or below this value.
    #[arg(long)]
    prune_threshold: Option<f32>,
    /// Multiplier on the overlap statistic (1.0 is a no-op).
    #[arg(long)]
    consensus_scale: Option<f32>,
    /// Anchor-aligned additive correction scale (0.0 is a no-op).
    #[arg(long)]
    alignment_scale: Option<f32>,
    /// Set to false to use the base gamma unconditionally.
    #[arg(long)]
    overlap_adaptive: Option<bool>,
    /// Fraction of entries the trim operator keeps.
    #[arg(long)]
    ties_trim: Option<f32>,
    /// Drop rate for sparsifying operators and stages.
    #[arg(long)]
    p: Option<f32>,
}

fn resolve_merge(knobs: &MergeKnobs, file: &FileConfig, seeds: &[u64]) -> Result<MergeConfig> {
    let defaults = MergeConfig::default();
    let lasrc_defaults = LasrcConfig::default();
    let operator = match knobs.method.as_deref().or(file.method.as_deref()) {
        Some(name) => name.parse::<MergeOperator>()?,
        None => defaults.operator,
    };
    let cfg = MergeConfig {
        operator,
        lasrc: LasrcConfig {
            gamma_base: knobs.gamma.or(file.gamma).unwrap_or(lasrc_defaults.gamma_base),
            gamma_floor: knobs
                .gamma_floor
                .or(file.gamma_floor)
                .unwrap_or(lasrc_defaults.gamma_floor),
            norm_guard: knobs
                .norm_guard
                .or(file.norm_guard)
                .unwrap_or(lasrc_defaults.norm_guard),
            prune_threshold: knobs
                .prune_threshold
                .or(file.prune_threshold)
                .unwrap_or(lasrc_defaults.prune_threshold),
            consensus_scale: knobs
                .consensus_scale
                .or(file.consensus_scale)
                .unwrap_or(lasrc_defaults.consensus_scale),
            alignment_scale: knobs
                .alignment_scale
                .or(file.alignment_scale)
                .unwrap_or(lasrc_defaults.alignment_scale),
            overlap_adaptive: knobs
                .overlap_adaptive
                .or(file.overlap_adaptive)
                .unwrap_or(lasrc_defaults.overlap_adaptive),
        },
        ties_trim_fraction: knobs.ties_trim.or(file.ties_trim).unwrap_or(defaults.ties_trim_fraction),
        dare_drop_rate: knobs.p.or(file.p).unwrap_or(defaults.dare_drop_rate),
        dare_seed: seeds.first().copied().unwrap_or(defaults.dare_seed),
    };
    cfg.lasrc.validate()?;
    Ok(cfg)
}

fn resolve_seeds(flag: &[u64], file: &FileConfig) -> Vec<u64> {
    if !flag.is_empty() {
        flag.to_vec()
    } else if let Some(seeds) = &file.seeds {
        seeds.clone()
    } else {
        vec![42]
    }
}

fn parse_views(flag: &Option<String>, file: &FileConfig) -> Option<Vec<String>> {
    match flag {
        Some(csv) => Some(
            csv.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        ),
        None => file.views.clone(),
    }
}

/// What a handler did, for the run manifest.
struct RunRecord {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Where to write the run manifest; None skips it (no artifacts).
    manifest_at: Option<PathBuf>,
}

/// Write to stdout, ending the program quietly when the reader hung up
/// (`lorapool eval ... | head` must not panic mid-print).
fn emit(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if write!(out, "{text}").and_then(|()| out.flush()).is_err() {
        std::process::exit(0);
    }
}

/// Parse and execute one invocation. `args` excludes the binary name.
pub fn run_args(args: &[String]) -> Result<()> {
    let mut full = vec!["lorapool".to_string()];
    full.extend(args.iter().cloned());
    let cli = match Cli::try_parse_from(&full) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    emit(&e);
                    Ok(())
                }
                _ => Err(Error::Usage(e.to_string())),
            };
        }
    };
    let file_cfg = load_file_config()?;
    let record = match cli.command {
        Command::Retrieve(a) => cmd_retrieve(a, &file_cfg)?,
        Command::SearchWeights(a) => cmd_search_weights(a, &file_cfg)?,
        Command::Sdp(a) => cmd_sdp(a, &file_cfg)?,
        Command::Merge(a) => cmd_merge(a, &file_cfg)?,
        Command::Aggregate(a) => cmd_aggregate(a, &file_cfg)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Audit(a) => cmd_audit(a, &file_cfg)?,
        Command::Toygen(a) => cmd_toygen(a)?,
        Command::Pipeline(a) => return cmd_pipeline(a, &file_cfg, args),
    };
    finish_run(record, args)
}

fn finish_run(record: RunRecord, args: &[String]) -> Result<()> {
    if let Some(at) = record.manifest_at {
        let manifest = RunManifest {
            command: record.command.to_string(),
            args: args.to_vec(),
            config: record.config,
            seeds: record.seeds,
            inputs: stamp_files(&record.inputs)?,
            outputs: stamp_files(&record.outputs)?,
        };
        manifest.save(&at)?;
    }
    Ok(())
}

/// Process entry point: returns the exit code.
pub fn main_entry() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run_args(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------- retrieve

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Pool manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Task JSON with per-view support and query embeddings.
    #[arg(long)]
    task: PathBuf,
    /// Comma-separated view ids; default is every manifest view.
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    support_k: Option<usize>,
    #[arg(long)]
    support_offset: Option<usize>,
    #[arg(long)]
    global_budget: Option<usize>,
    #[arg(long)]
    local_budget: Option<usize>,
    /// Output JSON with ranked candidates per view.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct RetrieveOut {
    task_id: String,
    views: BTreeMap<String, Vec<String>>,
}

fn cmd_retrieve(a: RetrieveArgs, file: &FileConfig) -> Result<RunRecord> {
    let manifest = load_manifest(&a.manifest)?;
    let task = ToyTask::load(&a.task)?;
    let support_k = a.support_k.or(file.support_k).unwrap_or(SUPPORT_K);
    let support_offset = a.support_offset.or(file.support_offset).unwrap_or(SUPPORT_OFFSET);
    let global_budget = a.global_budget.or(file.global_budget).unwrap_or(GLOBAL_BUDGET);
    let local_budget = a.local_budget.or(file.local_budget).unwrap_or(LOCAL_BUDGET);
    let windowed = task.support_window(support_k, support_offset)?;
    let view_ids = parse_views(&a.views, file)
        .unwrap_or_else(|| manifest.views.keys().cloned().collect());

    let mut out_views = BTreeMap::new();
    for view_id in &view_ids {
        let index = manifest.view_index(view_id)?;
        let support_vecs = windowed.support_embeddings.get(view_id).ok_or_else(|| {
            Error::Invariant(format!("task has no support embeddings for view {view_id}"))
        })?;
        let query_probe = match task.query_embeddings.get(view_id) {
            Some(vecs) if !vecs.is_empty() => Some(support_centroid(vecs)?),
            _ => None,
        };
        let candidates = retrieve_view(
            index,
            support_vecs,
            query_probe.as_deref(),
            global_budget,
            local_budget,
        )?;
        out_views.insert(view_id.clone(), candidates);
    }
    let payload = RetrieveOut {
        task_id: task.task_id.clone(),
        views: out_views,
    };
    let text = serde_json::to_string_pretty(&payload).expect("static schema");
    fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;

    Ok(RunRecord {
        command: "retrieve",
        config: serde_json::json!({
            "views": view_ids,
            "support_k": support_k,
            "support_offset": support_offset,
            "global_budget": global_budget,
            "local_budget": local_budget,
        }),
        seeds: vec![],
        inputs: vec![a.manifest, a.task],
        outputs: vec![a.out.clone()],
        manifest_at: Some(manifest_path_for(&a.out, false)),
    })
}

// ---------------------------------------------------------- search-weights

#[derive(Args, Debug)]
struct SearchWeightsArgs {
    /// Pool manifest JSON; bundle paths resolve relative to it.
    #[arg(long)]
    manifest: PathBuf,
    /// Task JSON; the objective is the support loss of the plain weighted
    /// sum on the support window.
    #[arg(long)]
    task: Option<PathBuf>,
    /// External evaluator: receives {"adapter": weight, ...} on stdin,
    /// prints one loss value. Overrides --task.
    #[arg(long)]
    eval_cmd: Option<String>,
    /// Comma-separated adapter ids; default is the whole pool.
    #[arg(long)]
    adapters: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    seeds: CommonSeeds,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    clip_lo: Option<f64>,
    #[arg(long)]
    clip_hi: Option<f64>,
    #[arg(long)]
    support_k: Option<usize>,
    #[arg(long)]
    support_offset: Option<usize>,
    /// Output weights JSON.
    #[arg(long)]
    out: PathBuf,
}

struct SubprocessLoss<'a> {
    command: &'a str,
    adapter_ids: &'a [String],
}

impl LossEvaluator for SubprocessLoss<'_> {
    fn evaluate(&mut self, weights: &[f32]) -> Result<f64> {
        let map: BTreeMap<&str, f32> = self
            .adapter_ids
            .iter()
            .map(String::as_str)
            .zip(weights.iter().copied())
            .collect();
        let payload = serde_json::to_string(&map).expect("static schema");
        let mut child = std::process::Command::new("sh")
            .arg("-c")
            .arg(self.command)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::Format(format!("spawning evaluator: {e}")))?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(payload.as_bytes())
            .map_err(|e| Error::Format(format!("writing to evaluator: {e}")))?;
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Format(format!("waiting for evaluator: {e}")))?;
        if !output.status.success() {
            return Err(Error::Format(format!(
                "evaluator exited with {}",
                output.status
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("evaluator printed {:?}: {e}", text.trim())))
    }
}

fn bundles_from_manifest(
    manifest: &PoolManifest,
    manifest_path: &Path,
    only: Option<&[String]>,
) -> Result<Vec<AdapterBundle>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let wanted: Vec<&crate::retrieval::AdapterEntry> = match only {
        None => manifest.adapters.iter().collect(),
        Some(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let entry = manifest
                    .adapters
                    .iter()
                    .find(|e| e.adapter_id == *id)
                    .ok_or_else(|| Error::Invariant(format!("adapter {id} not in manifest")))?;
                out.push(entry);
            }
            out
        }
    };
    wanted
        .into_iter()
        .map(|entry| {
            let bundle = load_bundle(base.join(&entry.bundle_path))?;
            if bundle.adapter_id != entry.adapter_id {
                return Err(Error::Format(format!(
                    "bundle {} carries adapter id {}, manifest says {}",
                    entry.bundle_path, bundle.adapter_id, entry.adapter_id
                )));
            }
            Ok(bundle)
        })
        .collect()
}

fn cmd_search_weights(a: SearchWeightsArgs, file: &FileConfig) -> Result<RunRecord> {
    let manifest = load_manifest(&a.manifest)?;
    let adapter_ids: Vec<String> = match &a.adapters {
        Some(csv) => csv.split(',').map(|s| s.trim().to_string()).collect(),
        None => manifest.adapter_ids(),
    };
    let seeds = resolve_seeds(&a.seeds.seeds, file);
    let defaults = SearchConfig::default();
    let cfg = SearchConfig {
        steps: a.steps.or(file.steps).unwrap_or(defaults.steps),
        seed: seeds[0],
        lambda: a.lambda.or(file.lambda).unwrap_or(defaults.lambda),
        clip_lo: a.clip_lo.or(file.clip_lo).unwrap_or(defaults.clip_lo),
        clip_hi: a.clip_hi.or(file.clip_hi).unwrap_or(defaults.clip_hi),
    };

    let mut inputs = vec![a.manifest.clone()];
    let outcome = match (&a.task, &a.eval_cmd) {
        (_, Some(cmd)) => {
            let mut evaluator = SubprocessLoss {
                command: cmd,
                adapter_ids: &adapter_ids,
            };
            search_weights(&mut evaluator, &adapter_ids, &cfg)?
        }
        (Some(task_path), None) => {
            inputs.push(task_path.clone());
            let task = ToyTask::load(task_path)?;
            let support_k = a.support_k.or(file.support_k).unwrap_or(SUPPORT_K);
            let support_offset = a
                .support_offset
                .or(file.support_offset)
                .unwrap_or(SUPPORT_OFFSET);
            let windowed = task.support_window(support_k, support_offset)?;
            let bundles = bundles_from_manifest(&manifest, &a.manifest, Some(&adapter_ids))?;
            let mut evaluator = ToyComposedLoss {
                task: &windowed,
                bundles: &bundles,
                adapter_ids: &adapter_ids,
            };
            search_weights(&mut evaluator, &adapter_ids, &cfg)?
        }
        (None, None) => {
            return Err(Error::Usage(
                "search-weights needs --task or --eval-cmd".into(),
            ))
        }
    };
    outcome.weights.save(&a.out)?;
    emit(format_args!(
        "loss {:.6} objective {:.6} after {} evaluations\n",
        outcome.loss, outcome.objective, outcome.evaluations
    ));

    Ok(RunRecord {
        command: "search-weights",
        config: serde_json::to_value(&cfg).expect("static schema"),
        seeds,
        inputs,
        outputs: vec![a.out.clone()],
        manifest_at: Some(manifest_path_for(&a.out, false)),
    })
}

// --------------------------------------------------------------------- sdp

#[derive(Args, Debug)]
struct SdpArgs {
    /// Pool manifest JSON; sparsifies every bundle it lists.
    #[arg(long, conflicts_with = "bundle")]
    manifest: Option<PathBuf>,
    /// A single bundle container.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Drop rate in [0, 1).
    #[arg(long)]
    p: Option<f32>,
    #[command(flatten)]
    seeds: CommonSeeds,
    /// Keep surviving entries at their original magnitude.
    #[arg(long)]
    no_rescale: bool,
    /// Skip restoring the original Frobenius norm.
    #[arg(long)]
    no_norm_preserve: bool,
    /// Output directory for masked bundles and mask sidecars.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sdp(a: SdpArgs, file: &FileConfig) -> Result<RunRecord> {
    let seeds = resolve_seeds(&a.seeds.seeds, file);
    let p = a.p.or(file.p).unwrap_or(0.5);
    let mut inputs = Vec::new();
    let bundles: Vec<AdapterBundle> = match (&a.manifest, &a.bundle) {
        (Some(mpath), None) => {
            inputs.push(mpath.clone());
            let manifest = load_manifest(mpath)?;
            bundles_from_manifest(&manifest, mpath, None)?
        }
        (None, Some(bpath)) => {
            inputs.push(bpath.clone());
            vec![load_bundle(bpath)?]
        }
        _ => return Err(Error::Usage("sdp needs --manifest or --bundle".into())),
    };

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut outputs = Vec::new();
    let mut config_used = None;
    for &seed in &seeds {
        let cfg = SdpConfig {
            drop_rate: p,
            seed,
            survivor_rescale: !a.no_rescale,
            norm_preserve: !a.no_norm_preserve,
        };
        cfg.validate()?;
        config_used.get_or_insert(cfg);
        for bundle in &bundles {
            let (pruned, masks) = sdp_bundle(bundle, &cfg)?;
            let stem = format!("{}--seed{}", bundle.adapter_id, seed);
            let bin = a.out.join(format!("{stem}.bin"));
            save_bundle(&pruned, &bin)?;
            let sidecar = a.out.join(format!("{stem}.masks.json"));
            save_masks(&bundle.adapter_id, &cfg, &masks, &sidecar)?;
            outputs.push(bin);
            outputs.push(sidecar);
        }
    }

    Ok(RunRecord {
        command: "sdp",
        config: serde_json::json!({
            "p": p,
            "survivor_rescale": !a.no_rescale,
            "norm_preserve": !a.no_norm_preserve,
        }),
        seeds,
        inputs,
        outputs,
        manifest_at: Some(manifest_path_for(&a.out, true)),
    })
}

// ------------------------------------------------------------------- merge

#[derive(Args, Debug)]
struct MergeArgs {
    /// Pool manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Weights JSON (adapter id to weight); only listed adapters merge.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    knobs: MergeKnobs,
    #[command(flatten)]
    seeds: CommonSeeds,
    /// Optional JSONL of per-block composition records.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Output bundle container.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_merge(a: MergeArgs, file: &FileConfig) -> Result<RunRecord> {
    let seeds = resolve_seeds(&a.seeds.seeds, file);
    let cfg = resolve_merge(&a.knobs, file, &seeds)?;
    let manifest = load_manifest(&a.manifest)?;
    let weights = WeightVector::load(&a.weights, -1.5, 1.5)?;
    let ids: Vec<String> = weights.weights.keys().cloned().collect();
    let bundles = bundles_from_manifest(&manifest, &a.manifest, Some(&ids))?;
    let blocks = BlockMap::by_leading_segment(bundles[0].tensor_names());

    let (merged, comps) = merge_with_config(&bundles, &weights, &blocks, &cfg)?;
    save_bundle(&merged, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(diag_path) = &a.diagnostics {
        match comps {
            Some(comps) => {
                write_diagnostics(&comps, diag_path)?;
                outputs.push(diag_path.clone());
            }
            None => {
                return Err(Error::Usage(format!(
                    "--diagnostics is only produced by the residual composer, not {}",
                    cfg.operator
                )))
            }
        }
    }

    Ok(RunRecord {
        command: "merge",
        config: serde_json::to_value(&cfg).expect("static schema"),
        seeds,
        inputs: vec![a.manifest, a.weights],
        outputs,
        manifest_at: Some(manifest_path_for(&a.out, false)),
    })
}

// --------------------------------------------------------------- aggregate

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Per-view predictions JSONL.
    #[arg(long)]
    predictions: PathBuf,
    /// support, uniform, or oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated view ids to keep; default keeps all rows.
    #[arg(long)]
    views: Option<String>,
    /// Output directory: decisions.jsonl, answers.jsonl, summary.json, and
    /// predictions.jsonl when references are complete.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct AggTaskSummary {
    task_id: String,
    n_queries: usize,
    path_cost: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    em: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AggSummary {
    mode: AggregationMode,
    diagnostic: bool,
    path_cost_total: usize,
    per_task: Vec<AggTaskSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    macro_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    micro_em: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AnswerRow<'a> {
    task_id: &'a str,
    query_id: &'a str,
    answer: &'a str,
    diagnostic: bool,
}

fn cmd_aggregate(a: AggregateArgs, file: &FileConfig) -> Result<RunRecord> {
    let mode: AggregationMode = match a.mode.as_deref().or(file.mode.as_deref()) {
        Some(m) => m.parse()?,
        None => AggregationMode::Support,
    };
    let mut rows = load_view_predictions(&a.predictions)?;
    if let Some(keep) = parse_views(&a.views, file) {
        rows.retain(|r| keep.contains(&r.view_id));
    }
    if rows.is_empty() {
        return Err(Error::Invariant("no view predictions left to aggregate".into()));
    }
    let grouped = group_view_predictions(&rows)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut decisions = Vec::new();
    let mut answer_rows: Vec<(String, String, String, bool)> = Vec::new();
    let mut records: Vec<PredictionRecord> = Vec::new();
    let mut per_task = Vec::new();
    let mut refs_complete = true;
    let mut path_cost_total = 0usize;
    let mut diagnostic = false;

    for task in &grouped {
        let refs = (!task.references.is_empty()).then_some(&task.references);
        let agg = aggregate_task(&task.task_id, &task.views, mode, refs)?;
        path_cost_total += agg.path_cost;
        diagnostic |= agg.diagnostic;
        let task_refs_complete = agg
            .answers
            .keys()
            .all(|q| task.references.contains_key(q));
        refs_complete &= task_refs_complete;
        let mut correct = 0usize;
        for (query_id, answer) in &agg.answers {
            answer_rows.push((
                task.task_id.clone(),
                query_id.clone(),
                answer.clone(),
                agg.diagnostic,
            ));
            if let Some(reference) = task.references.get(query_id) {
                let r = PredictionRecord {
                    task_id: task.task_id.clone(),
                    query_id: query_id.clone(),
                    prediction: answer.clone(),
                    reference: reference.clone(),
                    diagnostic: agg.diagnostic,
                };
                if r.is_correct() {
                    correct += 1;
                }
                records.push(r);
            }
        }
        per_task.push(AggTaskSummary {
            task_id: task.task_id.clone(),
            n_queries: agg.answers.len(),
            path_cost: agg.path_cost,
            em: task_refs_complete
                .then(|| em_percent(correct as f64 / agg.answers.len() as f64)),
        });
        decisions.extend(agg.decisions);
    }

    let decisions_path = a.out.join("decisions.jsonl");
    crate::agg::save_decisions(&decisions, &decisions_path)?;
    let answers_path = a.out.join("answers.jsonl");
    {
        let mut buf = Vec::new();
        for (t, q, ans, diag) in &answer_rows {
            let row = AnswerRow {
                task_id: t,
                query_id: q,
                answer: ans,
                diagnostic: *diag,
            };
            serde_json::to_writer(&mut buf, &row).expect("static schema");
            buf.push(b'\n');
        }
        fs::write(&answers_path, buf).map_err(|e| Error::io(&answers_path, e))?;
    }
    let mut outputs = vec![decisions_path, answers_path];

    let (macro_em, micro_em) = if refs_complete && !records.is_empty() {
        let pf = PredictionFile::new(records)?;
        let predictions_path = a.out.join("predictions.jsonl");
        pf.save(&predictions_path)?;
        outputs.push(predictions_path);
        let report = exact_match(&pf)?;
        (
            Some(em_percent(report.macro_avg)),
            Some(em_percent(report.micro_avg)),
        )
    } else {
        (None, None)
    };

    let summary = AggSummary {
        mode,
        diagnostic,
        path_cost_total,
        per_task,
        macro_em,
        micro_em,
    };
    let summary_path = a.out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("static schema");
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    outputs.push(summary_path);

    Ok(RunRecord {
        command: "aggregate",
        config: serde_json::json!({ "mode": mode.to_string() }),
        seeds: vec![],
        inputs: vec![a.predictions],
        outputs,
        manifest_at: Some(manifest_path_for(&a.out, true)),
    })
}

// -------------------------------------------------------------------- eval

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction JSONL with references.
    #[arg(long)]
    predictions: PathBuf,
    /// Report JSON; omit to print to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalOut {
    per_task: BTreeMap<String, f64>,
    macro_em: f64,
    micro_em: f64,
    n_queries: usize,
    diagnostic: bool,
}

fn cmd_eval(a: EvalArgs) -> Result<RunRecord> {
    let pf = PredictionFile::load(&a.predictions)?;
    let report = exact_match(&pf)?;
    let out_payload = EvalOut {
        per_task: report
            .per_task
            .iter()
            .map(|(t, &f)| (t.clone(), em_percent(f)))
            .collect(),
        macro_em: em_percent(report.macro_avg),
        micro_em: em_percent(report.micro_avg),
        n_queries: report.n_queries,
        diagnostic: pf.records.iter().any(|r| r.diagnostic),
    };
    let text = serde_json::to_string_pretty(&out_payload).expect("static schema");
    match &a.out {
        None => {
            emit(format_args!("{text}\n"));
            Ok(RunRecord {
                command: "eval",
                config: serde_json::json!({}),
                seeds: vec![],
                inputs: vec![a.predictions],
                outputs: vec![],
                manifest_at: None,
            })
        }
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
            Ok(RunRecord {
                command: "eval",
                config: serde_json::json!({}),
                seeds: vec![],
                inputs: vec![a.predictions],
                outputs: vec![path.clone()],
                manifest_at: Some(manifest_path_for(path, false)),
            })
        }
    }
}

// ------------------------------------------------------------------- audit

#[derive(Args, Debug)]
struct AuditArgs {
    /// Candidate prediction JSONL.
    #[arg(long)]
    predictions: PathBuf,
    /// Baseline prediction JSONL, aligned on (task, query).
    #[arg(long)]
    baseline: PathBuf,
    /// Monte Carlo permutations.
    #[arg(long)]
    permutations: Option<usize>,
    /// Bootstrap resamples.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[command(flatten)]
    seeds: CommonSeeds,
    /// Report JSON; the table always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_audit(a: AuditArgs, file: &FileConfig) -> Result<RunRecord> {
    let permutations = a.permutations.or(file.permutations).unwrap_or(20_000);
    let bootstrap = a.bootstrap.or(file.bootstrap).unwrap_or(10_000);
    let seeds = resolve_seeds(&a.seeds.seeds, file);
    let baseline = PredictionFile::load(&a.baseline)?;
    let candidate = PredictionFile::load(&a.predictions)?;
    let report = crate::eval::audit(&baseline, &candidate, permutations, bootstrap, seeds[0])?;
    emit(render_audit(&report));

    let mut outputs = Vec::new();
    let mut manifest_at = None;
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&report).expect("static schema");
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        outputs.push(path.clone());
        manifest_at = Some(manifest_path_for(path, false));
    }
    Ok(RunRecord {
        command: "audit",
        config: serde_json::json!({
            "permutations": permutations,
            "bootstrap": bootstrap,
        }),
        seeds,
        inputs: vec![a.baseline, a.predictions],
        outputs,
        manifest_at,
    })
}

// ------------------------------------------------------------------ toygen

#[derive(Args, Debug)]
struct ToygenArgs {
    /// Pool spec as comma-separated key=value pairs; see the docs for keys.
    #[arg(long, value_name = "KEY=VAL,...", num_args = 0..=1, default_missing_value = "")]
    toy: Option<String>,
    /// Output directory for the pool.
    #[arg(long)]
    out: PathBuf,
}

/// Parse "seed=7,adapters=6,mode=mixed:60" into a pool spec.
pub fn parse_toy_spec(text: &str) -> Result<ToyPoolSpec> {
    let mut spec = ToyPoolSpec::default();
    for pair in text.split(',') {
        let pair = pair.trim();
        if pair.is_empty() {
            continue;
        }
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("toy spec entry {pair:?} is not key=value")))?;
        let bad = |e: &dyn std::fmt::Display| Error::Usage(format!("toy spec {key}={value}: {e}"));
        match key {
            "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
            "adapters" => spec.n_adapters = value.parse().map_err(|e| bad(&e))?,
            "rank" => spec.rank = value.parse().map_err(|e| bad(&e))?,
            "noise" => spec.noise_level = value.parse().map_err(|e| bad(&e))?,
            "blocks" => spec.n_blocks = value.parse().map_err(|e| bad(&e))?,
            "tasks" => spec.n_tasks = value.parse().map_err(|e| bad(&e))?,
            "examples" => spec.n_examples = value.parse().map_err(|e| bad(&e))?,
            "queries" => spec.n_queries = value.parse().map_err(|e| bad(&e))?,
            "din" => spec.d_in = value.parse().map_err(|e| bad(&e))?,
            "dout" => spec.d_out = value.parse().map_err(|e| bad(&e))?,
            "mode" => {
                spec.overlap_mode = match value {
                    "orthogonal" => OverlapMode::Orthogonal,
                    "duplicated" => OverlapMode::Duplicated,
                    other => match other.strip_prefix("mixed:") {
                        Some(deg) => OverlapMode::Mixed(deg.parse().map_err(|e| bad(&e))?),
                        None => {
                            return Err(Error::Usage(format!(
                                "toy mode {other:?}; expected orthogonal, duplicated, or mixed:<degrees>"
                            )))
                        }
                    },
                }
            }
            other => return Err(Error::Usage(format!("unknown toy spec key {other:?}"))),
        }
    }
    Ok(spec)
}

fn cmd_toygen(a: ToygenArgs) -> Result<RunRecord> {
    let spec = parse_toy_spec(a.toy.as_deref().unwrap_or(""))?;
    let scenario = gen_toy_pool(&spec)?;
    save_scenario(&scenario, &a.out)?;
    let mut outputs = vec![a.out.join("manifest.json")];
    for entry in &scenario.manifest.adapters {
        outputs.push(a.out.join(&entry.bundle_path));
    }
    for task in &scenario.tasks {
        outputs.push(a.out.join("tasks").join(format!("{}.json", task.task_id)));
    }
    Ok(RunRecord {
        command: "toygen",
        config: serde_json::to_value(spec).expect("static schema"),
        seeds: vec![spec.seed],
        inputs: vec![],
        outputs,
        manifest_at: Some(manifest_path_for(&a.out, true)),
    })
}

// ---------------------------------------------------------------- pipeline

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Generate and use a synthetic pool; accepts key=value pairs.
    #[arg(long, value_name = "KEY=VAL,...", num_args = 0..=1, default_missing_value = "")]
    toy: Option<String>,
    /// Existing pool directory (manifest.json, bundles/, tasks/).
    #[arg(long, conflicts_with = "toy")]
    pool: Option<PathBuf>,
    /// Re-execute a recorded run and verify its outputs byte for byte.
    #[arg(long, conflicts_with_all = ["toy", "pool", "out"])]
    replay: Option<PathBuf>,
    #[command(flatten)]
    knobs: MergeKnobs,
    /// support, uniform, or oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated view ids.
    #[arg(long)]
    views: Option<String>,
    #[command(flatten)]
    seeds: CommonSeeds,
    /// Enable the sparsification stage with this drop rate.
    #[arg(long)]
    sdp: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    support_k: Option<usize>,
    #[arg(long)]
    support_offset: Option<usize>,
    #[arg(long)]
    global_budget: Option<usize>,
    #[arg(long)]
    local_budget: Option<usize>,
    /// Output directory.
    #[arg(long, required_unless_present = "replay")]
    out: Option<PathBuf>,
}

fn cmd_pipeline(a: PipelineArgs, file: &FileConfig, raw_args: &[String]) -> Result<()> {
    if let Some(manifest_path) = &a.replay {
        return replay_run(manifest_path);
    }
    let out = a.out.clone().expect("clap enforces --out without --replay");
    let seeds = resolve_seeds(&a.seeds.seeds, file);
    let merge = resolve_merge(&a.knobs, file, &seeds)?;
    let mode: AggregationMode = match a.mode.as_deref().or(file.mode.as_deref()) {
        Some(m) => m.parse()?,
        None => AggregationMode::Support,
    };
    let sdp = a.sdp.map(|p| SdpConfig {
        drop_rate: p,
        seed: seeds[0],
        survivor_rescale: true,
        norm_preserve: true,
    });
    let defaults = SearchConfig::default();
    let opts = PipelineOptions {
        toy: a.toy.as_deref().map(parse_toy_spec).transpose()?,
        pool_dir: a.pool.clone(),
        out_dir: out.clone(),
        merge,
        sdp,
        mode,
        views: parse_views(&a.views, file),
        support_k: a.support_k.or(file.support_k).unwrap_or(SUPPORT_K),
        support_offset: a
            .support_offset
            .or(file.support_offset)
            .unwrap_or(SUPPORT_OFFSET),
        global_budget: a.global_budget.or(file.global_budget).unwrap_or(GLOBAL_BUDGET),
        local_budget: a.local_budget.or(file.local_budget).unwrap_or(LOCAL_BUDGET),
        search: SearchConfig {
            steps: a.steps.or(file.steps).unwrap_or(defaults.steps),
            seed: seeds[0],
            lambda: file.lambda.unwrap_or(defaults.lambda),
            clip_lo: file.clip_lo.unwrap_or(defaults.clip_lo),
            clip_hi: file.clip_hi.unwrap_or(defaults.clip_hi),
        },
    };
    let outcome = run_pipeline(&opts)?;
    emit(format_args!(
        "{} tasks, macro EM {:.2}, micro EM {:.2}, path cost {}\n",
        outcome.summary.per_task.len(),
        outcome.summary.macro_em,
        outcome.summary.micro_em,
        outcome.summary.path_cost_total
    ));

    let mut inputs = Vec::new();
    if let Some(pool) = &a.pool {
        inputs.push(pool.join("manifest.json"));
    }
    finish_run(
        RunRecord {
            command: "pipeline",
            config: serde_json::to_value(&opts).expect("static schema"),
            seeds: outcome.summary.seeds.clone(),
            inputs,
            outputs: outcome.artifacts.clone(),
            manifest_at: Some(manifest_path_for(&out, true)),
        },
        raw_args,
    )
}

/// Re-run a recorded command and fail loudly if any recorded output hash
/// changed.
fn replay_run(manifest_path: &Path) -> Result<()> {
    let recorded = RunManifest::load(manifest_path)?;
    if recorded.args.iter().any(|arg| arg == "--replay") {
        return Err(Error::Usage("refusing to replay a replay run".into()));
    }
    run_args(&recorded.args)?;
    let mismatched = recorded.verify_outputs()?;
    if !mismatched.is_empty() {
        return Err(Error::Invariant(format!(
            "replay diverged on {} of {} outputs: {:?}",
            mismatched.len(),
            recorded.outputs.len(),
            mismatched
        )));
    }
    emit(format_args!(
        "replayed {}: {} outputs byte-identical\n",
        recorded.command,
        recorded.outputs.len()
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::OverlapMode;

    #[test]
    fn toy_spec_parses_keys_and_defaults() {
        let spec = parse_toy_spec("").unwrap();
        assert_eq!(spec, ToyPoolSpec::default());
        let spec = parse_toy_spec("seed=7,adapters=6,mode=mixed:45,noise=0.25,rank=3,dout=5").unwrap();
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.n_adapters, 6);
        assert_eq!(spec.rank, 3);
        assert_eq!(spec.d_out, 5);
        assert!(matches!(spec.overlap_mode, OverlapMode::Mixed(a) if (a - 45.0).abs() < 1e-6));
        assert!((spec.noise_level - 0.25).abs() < 1e-6);
        assert!(parse_toy_spec("bogus=1").is_err());
        assert!(parse_toy_spec("mode=diagonal").is_err());
        assert!(parse_toy_spec("seed").is_err());
    }

    #[test]
    fn merge_resolution_prefers_flags_over_file() {
        let knobs = MergeKnobs {
            method: Some("lasrc".into()),
            gamma: Some(0.7),
            gamma_floor: None,
            norm_guard: None,
            prune_threshold: None,
            consensus_scale: None,
            alignment_scale: None,
            overlap_adaptive: None,
            ties_trim: None,
            p: None,
        };
        let file = FileConfig {
            method: Some("ties".into()),
            gamma: Some(0.1),
            gamma_floor: Some(0.02),
            ..FileConfig::default()
        };
        let cfg = resolve_merge(&knobs, &file, &[9]).unwrap();
        assert_eq!(cfg.operator, MergeOperator::Lasrc);
        assert_eq!(cfg.lasrc.gamma_base, 0.7);
        assert_eq!(cfg.lasrc.gamma_floor, 0.02);
        assert_eq!(cfg.dare_seed, 9);
    }

    #[test]
    fn seed_resolution_order() {
        let file_with = FileConfig {
            seeds: Some(vec![5, 6]),
            ..FileConfig::default()
        };
        assert_eq!(resolve_seeds(&[1, 2], &file_with), vec![1, 2]);
        assert_eq!(resolve_seeds(&[], &file_with), vec![5, 6]);
        assert_eq!(resolve_seeds(&[], &FileConfig::default()), vec![42]);
    }

    #[test]
    fn invalid_merge_config_is_rejected() {
        let knobs = MergeKnobs {
            method: None,
            gamma: Some(0.1),
            gamma_floor: Some(0.5),
            norm_guard: None,
            prune_threshold: None,
            consensus_scale: None,
            alignment_scale: None,
            overlap_adaptive: None,
            ties_trim: None,
            p: None,
        };
        assert!(resolve_merge(&knobs, &FileConfig::default(), &[42]).is_err());
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let err = run_args(&["frobnicate".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn help_is_not_an_error() {
        run_args(&["--help".to_string()]).unwrap();
    }
}
