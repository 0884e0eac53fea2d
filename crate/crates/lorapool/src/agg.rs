//! Multi-view answer aggregation.
//!
//! Each view contributes its predictions plus the support loss its composed
//! model achieved. Support mode turns losses into normalized reliability
//! weights (inverse loss with an epsilon clamp), uniform mode is the equal
//! weight control, and oracle mode picks the single best view using
//! references, which makes it a diagnostic upper bound rather than a
//! deployable method. Everything downstream consumes the decisions log this
//! module writes, one row per query with the full candidate scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize_answer;

/// Epsilon clamp for inverse-loss reliability.
pub const LOSS_EPSILON: f64 = 1e-8;

/// One view's output for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: String,
    pub support_loss: f32,
    /// query_id to raw predicted answer.
    pub predictions: BTreeMap<String, String>,
}

impl ViewRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.support_loss.is_finite() || self.support_loss < 0.0 {
            return Err(Error::Invariant(format!(
                "view {}: support loss {} must be finite and nonnegative",
                self.view_id, self.support_loss
            )));
        }
        Ok(())
    }
}

/// Normalized per-view weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewWeights {
    pub weights: BTreeMap<String, f64>,
}

impl ViewWeights {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "view weights sum to {sum}, expected 1"
            )));
        }
        if self.weights.values().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Invariant("view weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Inverse-loss reliability weights: phi(L) = 1 / max(L, epsilon),
/// normalized over views.
pub fn reliability_weights(losses: &BTreeMap<String, f32>) -> Result<ViewWeights> {
    if losses.is_empty() {
        return Err(Error::Invariant("need at least one view".into()));
    }
    let mut phis = BTreeMap::new();
    for (view, &l) in losses {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::Invariant(format!(
                "view {view}: support loss {l} must be finite and nonnegative"
            )));
        }
        phis.insert(view.clone(), 1.0 / (l as f64).max(LOSS_EPSILON));
    }
    let total: f64 = phis.values().sum();
    let weights = phis.into_iter().map(|(v, p)| (v, p / total)).collect();
    let w = ViewWeights { weights };
    w.validate()?;
    Ok(w)
}

/// Equal weights: the control case.
pub fn uniform_weights(view_ids: &[String]) -> Result<ViewWeights> {
    if view_ids.is_empty() {
        return Err(Error::Invariant("need at least one view".into()));
    }
    let n = view_ids.len() as f64;
    let weights = view_ids.iter().map(|v| (v.clone(), 1.0 / n)).collect();
    Ok(ViewWeights { weights })
}

/// Score the normalized candidate answers for one query: each answer
/// accumulates the weights of the views that produced it, in view order.
pub fn score_answers(
    views: &[ViewRecord],
    weights: &ViewWeights,
    query_id: &str,
) -> Result<BTreeMap<String, f64>> {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for view in views {
        let raw = view.predictions.get(query_id).ok_or_else(|| {
            Error::Invariant(format!(
                "view {} has no prediction for query {query_id}",
                view.view_id
            ))
        })?;
        let w = weights.weights.get(&view.view_id).ok_or_else(|| {
            Error::Invariant(format!("no weight for view {}", view.view_id))
        })?;
        *scores.entry(normalize_answer(raw)).or_insert(0.0) += w;
    }
    Ok(scores)
}

/// Argmax over candidate scores; ties go to the earliest view (in the given
/// view order) whose answer attains the maximum.
pub fn select_answer(
    scores: &BTreeMap<String, f64>,
    views: &[ViewRecord],
    query_id: &str,
) -> Result<String> {
    let max = scores
        .values()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Invariant(format!(
            "no candidate scores for query {query_id}"
        )));
    }
    for view in views {
        if let Some(raw) = view.predictions.get(query_id) {
            let candidate = normalize_answer(raw);
            if let Some(&s) = scores.get(&candidate) {
                if s == max {
                    return Ok(candidate);
                }
            }
        }
    }
    Err(Error::Invariant(format!(
        "scores for query {query_id} name answers no view produced"
    )))
}

/// Pick the single view with the best normalized exact match against the
/// references (ties go to the earliest view). Diagnostic only: it reads
/// labels.
pub fn oracle_select(
    views: &[ViewRecord],
    references: &BTreeMap<String, String>,
) -> Result<(String, BTreeMap<String, String>, f64)> {
    if views.is_empty() {
        return Err(Error::Invariant("need at least one view".into()));
    }
    if references.is_empty() {
        return Err(Error::Invariant("oracle selection needs references".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, view) in views.iter().enumerate() {
        let mut hits = 0usize;
        for (query_id, reference) in references {
            let raw = view.predictions.get(query_id).ok_or_else(|| {
                Error::Invariant(format!(
                    "view {} has no prediction for query {query_id}",
                    view.view_id
                ))
            })?;
            if normalize_answer(raw) == normalize_answer(reference) {
                hits += 1;
            }
        }
        let em = hits as f64 / references.len() as f64;
        let better = match best {
            None => true,
            Some((_, b)) => em > b,
        };
        if better {
            best = Some((i, em));
        }
    }
    let (idx, em) = best.expect("views nonempty");
    Ok((views[idx].view_id.clone(), views[idx].predictions.clone(), em))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Support,
    Uniform,
    Oracle,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(AggregationMode::Support),
            "uniform" => Ok(AggregationMode::Uniform),
            "oracle" => Ok(AggregationMode::Oracle),
            other => Err(Error::Usage(format!(
                "unknown aggregation mode {other}; expected support, uniform, or oracle"
            ))),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AggregationMode::Support => "support",
            AggregationMode::Uniform => "uniform",
            AggregationMode::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

/// One audit row per query in the decisions log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub task_id: String,
    pub query_id: String,
    pub mode: AggregationMode,
    pub weights: BTreeMap<String, f64>,
    pub scores: BTreeMap<String, f64>,
    pub selected: String,
    /// True only for oracle output, which used evaluation labels.
    pub diagnostic: bool,
}

/// Aggregated answers for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAggregation {
    pub mode: AggregationMode,
    pub weights: ViewWeights,
    /// query_id to final (normalized) answer.
    pub answers: BTreeMap<String, String>,
    pub decisions: Vec<DecisionRow>,
    pub diagnostic: bool,
    /// Prediction paths consumed: one per view.
    pub path_cost: usize,
}

/// Run one task's aggregation. References are required only by oracle mode.
pub fn aggregate_task(
    task_id: &str,
    views: &[ViewRecord],
    mode: AggregationMode,
    references: Option<&BTreeMap<String, String>>,
) -> Result<TaskAggregation> {
    if views.is_empty() {
        return Err(Error::Invariant(format!("task {task_id}: no views to aggregate")));
    }
    for v in views {
        v.validate()?;
    }
    let mut seen = BTreeSet::new();
    for v in views {
        if !seen.insert(v.view_id.clone()) {
            return Err(Error::Invariant(format!(
                "task {task_id}: duplicate view id {}",
                v.view_id
            )));
        }
    }
    // The query universe is the union over views; every view must cover it.
    let queries: BTreeSet<String> = views
        .iter()
        .flat_map(|v| v.predictions.keys().cloned())
        .collect();
    for v in views {
        for q in &queries {
            if !v.predictions.contains_key(q) {
                return Err(Error::Invariant(format!(
                    "task {task_id}: view {} has no prediction for query {q}",
                    v.view_id
                )));
            }
        }
    }

    let view_ids: Vec<String> = views.iter().map(|v| v.view_id.clone()).collect();
    match mode {
        AggregationMode::Oracle => {
            let references = references.ok_or_else(|| {
                Error::Invariant(format!("task {task_id}: oracle mode needs references"))
            })?;
            let (best_view, raw_answers, _em) = oracle_select(views, references)?;
            let weights = ViewWeights {
                weights: view_ids
                    .iter()
                    .map(|v| (v.clone(), if *v == best_view { 1.0 } else { 0.0 }))
                    .collect(),
            };
            let mut answers = BTreeMap::new();
            let mut decisions = Vec::new();
            for (q, raw) in &raw_answers {
                let selected = normalize_answer(raw);
                decisions.push(DecisionRow {
                    task_id: task_id.to_string(),
                    query_id: q.clone(),
                    mode,
                    weights: weights.weights.clone(),
                    scores: [(selected.clone(), 1.0)].into_iter().collect(),
                    selected: selected.clone(),
                    diagnostic: true,
                });
                answers.insert(q.clone(), selected);
            }
            Ok(TaskAggregation {
                mode,
                weights,
                answers,
                decisions,
                diagnostic: true,
                path_cost: views.len(),
            })
        }
        AggregationMode::Support | AggregationMode::Uniform => {
            let weights = match mode {
                AggregationMode::Support => {
                    let losses: BTreeMap<String, f32> = views
                        .iter()
                        .map(|v| (v.view_id.clone(), v.support_loss))
                        .collect();
                    reliability_weights(&losses)?
                }
                _ => uniform_weights(&view_ids)?,
            };
            let mut answers = BTreeMap::new();
            let mut decisions = Vec::new();
            for q in &queries {
                let scores = score_answers(views, &weights, q)?;
                let selected = select_answer(&scores, views, q)?;
                decisions.push(DecisionRow {
                    task_id: task_id.to_string(),
                    query_id: q.clone(),
                    mode,
                    weights: weights.weights.clone(),
                    scores,
                    selected: selected.clone(),
                    diagnostic: false,
                });
                answers.insert(q.clone(), selected);
            }
            Ok(TaskAggregation {
                mode,
                weights,
                answers,
                decisions,
                diagnostic: false,
                path_cost: views.len(),
            })
        }
    }
}

/// JSONL row tying a view prediction to its task, loss, and optional
/// reference. This is the interchange format between composition runs and
/// aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPredictionRow {
    pub task_id: String,
    pub view_id: String,
    pub query_id: String,
    pub raw_prediction: String,
    pub support_loss: f32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<String>,
}

pub fn save_view_predictions(rows: &[ViewPredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("static schema");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_view_predictions(path: impl AsRef<Path>) -> Result<Vec<ViewPredictionRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ViewPredictionRow = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Views and references for one task, with view order preserved from the
/// row stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskViews {
    pub task_id: String,
    pub views: Vec<ViewRecord>,
    pub references: BTreeMap<String, String>,
}

/// Group rows into per-task view records. Task order and view order follow
/// first appearance in the stream, so a deterministic input gives a
/// deterministic grouping.
pub fn group_view_predictions(rows: &[ViewPredictionRow]) -> Result<Vec<TaskViews>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_task: BTreeMap<String, Vec<&ViewPredictionRow>> = BTreeMap::new();
    for row in rows {
        if !by_task.contains_key(&row.task_id) {
            order.push(row.task_id.clone());
        }
        by_task.entry(row.task_id.clone()).or_default().push(row);
    }
    let mut out = Vec::with_capacity(order.len());
    for task_id in order {
        let rows = &by_task[&task_id];
        let mut view_order: Vec<String> = Vec::new();
        let mut views: BTreeMap<String, ViewRecord> = BTreeMap::new();
        let mut references = BTreeMap::new();
        for row in rows {
            if !views.contains_key(&row.view_id) {
                view_order.push(row.view_id.clone());
                views.insert(
                    row.view_id.clone(),
                    ViewRecord {
                        view_id: row.view_id.clone(),
                        support_loss: row.support_loss,
                        predictions: BTreeMap::new(),
                    },
                );
            }
            let v = views.get_mut(&row.view_id).expect("inserted above");
            if (row.support_loss - v.support_loss).abs() > 0.0 {
                return Err(Error::Invariant(format!(
                    "task {task_id} view {}: inconsistent support losses {} and {}",
                    row.view_id, v.support_loss, row.support_loss
                )));
            }
            if v
                .predictions
                .insert(row.query_id.clone(), row.raw_prediction.clone())
                .is_some()
            {
                return Err(Error::Invariant(format!(
                    "task {task_id} view {}: duplicate prediction for query {}",
                    row.view_id, row.query_id
                )));
            }
            if let Some(r) = &row.reference {
                if let Some(existing) = references.get(&row.query_id) {
                    if existing != r {
                        return Err(Error::Invariant(format!(
                            "task {task_id} query {}: conflicting references",
                            row.query_id
                        )));
                    }
                }
                references.insert(row.query_id.clone(), r.clone());
            }
        }
        out.push(TaskViews {
            task_id,
            views: view_order
                .into_iter()
                .map(|v| views.remove(&v).expect("inserted above"))
                .collect(),
            references,
        });
    }
    Ok(out)
}

pub fn save_decisions(rows: &[DecisionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("static schema");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
