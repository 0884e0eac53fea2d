//! Scoring and paired statistical audits over prediction files.
//!
//! Correctness is normalized exact match: strip surrounding whitespace,
//! lowercase, drop periods. Two aligned prediction files can be audited
//! against each other with flip counts, a query-level paired permutation
//! test on the macro-average difference, and a task-stratified bootstrap
//! confidence interval. All resampling is seeded and sequential, so every
//! number here is reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Strip surrounding whitespace, lowercase, remove every '.', then strip
/// again (removing a period can expose trailing whitespace, and the result
/// must be a fixed point of this function).
pub fn normalize_answer(s: &str) -> String {
    let stripped = s.trim().to_lowercase().replace('.', "");
    stripped.trim().to_string()
}

fn is_false(b: &bool) -> bool {
    !b
}

/// One scored prediction row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: String,
    pub query_id: String,
    pub prediction: String,
    pub reference: String,
    /// Marks rows produced with access to evaluation labels (oracle mode).
    /// Such files measure headroom and must never be reported as results.
    #[serde(default, skip_serializing_if = "is_false")]
    pub diagnostic: bool,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        normalize_answer(&self.prediction) == normalize_answer(&self.reference)
    }
}

/// A method's predictions, one JSONL row per (task, query).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionFile {
    pub records: Vec<PredictionRecord>,
}

impl PredictionFile {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self> {
        let f = PredictionFile { records };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert((r.task_id.clone(), r.query_id.clone())) {
                return Err(Error::Invariant(format!(
                    "duplicate record for task {} query {}",
                    r.task_id, r.query_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: PredictionRecord = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(r);
        }
        PredictionFile::new(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("static schema");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Map (task, query) to correctness.
    pub fn correctness(&self) -> BTreeMap<(String, String), bool> {
        self.records
            .iter()
            .map(|r| ((r.task_id.clone(), r.query_id.clone()), r.is_correct()))
            .collect()
    }

    /// Both files must cover exactly the same (task, query) keys.
    pub fn check_aligned(&self, other: &PredictionFile) -> Result<()> {
        let a: BTreeSet<(String, String)> = self
            .records
            .iter()
            .map(|r| (r.task_id.clone(), r.query_id.clone()))
            .collect();
        let b: BTreeSet<(String, String)> = other
            .records
            .iter()
            .map(|r| (r.task_id.clone(), r.query_id.clone()))
            .collect();
        if a != b {
            let missing_in_b: Vec<_> = a.difference(&b).take(5).cloned().collect();
            let missing_in_a: Vec<_> = b.difference(&a).take(5).cloned().collect();
            return Err(Error::Invariant(format!(
                "prediction files are not aligned; missing from second: {missing_in_b:?}, missing from first: {missing_in_a:?}"
            )));
        }
        Ok(())
    }
}

/// Per-task and averaged exact-match, as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub per_task: BTreeMap<String, f64>,
    pub macro_avg: f64,
    pub micro_avg: f64,
    pub n_queries: usize,
}

/// Round a fraction to the reporting unit: percent with two decimals.
pub fn em_percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Score one prediction file against its own references.
pub fn exact_match(file: &PredictionFile) -> Result<EmReport> {
    if file.records.is_empty() {
        return Err(Error::Invariant("cannot score an empty prediction file".into()));
    }
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut total_correct = 0usize;
    for r in &file.records {
        let e = hits.entry(r.task_id.clone()).or_insert((0, 0));
        e.1 += 1;
        if r.is_correct() {
            e.0 += 1;
            total_correct += 1;
        }
    }
    let per_task: BTreeMap<String, f64> = hits
        .iter()
        .map(|(t, &(c, n))| (t.clone(), c as f64 / n as f64))
        .collect();
    let macro_avg = per_task.values().sum::<f64>() / per_task.len() as f64;
    let micro_avg = total_correct as f64 / file.records.len() as f64;
    Ok(EmReport {
        per_task,
        macro_avg,
        micro_avg,
        n_queries: file.records.len(),
    })
}

/// Aligned correctness pairs grouped by task, in key order.
struct PairedCorrectness {
    /// (task index, a correct, b correct) per query.
    pairs: Vec<(usize, bool, bool)>,
    task_ids: Vec<String>,
}

fn paired_correctness(a: &PredictionFile, b: &PredictionFile) -> Result<PairedCorrectness> {
    a.check_aligned(b)?;
    let ca = a.correctness();
    let cb = b.correctness();
    let mut task_ids: Vec<String> = ca.keys().map(|(t, _)| t.clone()).collect();
    task_ids.dedup();
    let task_index: BTreeMap<&String, usize> = task_ids
        .iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let pairs = ca
        .iter()
        .map(|((t, q), &x)| (task_index[t], x, cb[&(t.clone(), q.clone())]))
        .collect();
    Ok(PairedCorrectness { pairs, task_ids })
}

/// Macro-average EM difference (b minus a) over tasks, given pair
/// correctness; also the micro difference.
fn em_diffs(pc: &PairedCorrectness, swap: impl Fn(usize) -> bool) -> (f64, f64) {
    let n_tasks = pc.task_ids.len();
    let mut correct_a = vec![0usize; n_tasks];
    let mut correct_b = vec![0usize; n_tasks];
    let mut counts = vec![0usize; n_tasks];
    let mut micro_a = 0usize;
    let mut micro_b = 0usize;
    for (i, &(t, ca, cb)) in pc.pairs.iter().enumerate() {
        let (ca, cb) = if swap(i) { (cb, ca) } else { (ca, cb) };
        counts[t] += 1;
        if ca {
            correct_a[t] += 1;
            micro_a += 1;
        }
        if cb {
            correct_b[t] += 1;
            micro_b += 1;
        }
    }
    let mut macro_diff = 0.0f64;
    for t in 0..n_tasks {
        let n = counts[t] as f64;
        macro_diff += correct_b[t] as f64 / n - correct_a[t] as f64 / n;
    }
    macro_diff /= n_tasks as f64;
    let micro_diff = (micro_b as f64 - micro_a as f64) / pc.pairs.len() as f64;
    (macro_diff, micro_diff)
}

/// Query-level transitions from a to b: fixed, broken, unchanged.
pub fn flip_counts(a: &PredictionFile, b: &PredictionFile) -> Result<(usize, usize, usize)> {
    let pc = paired_correctness(a, b)?;
    let mut plus = 0usize;
    let mut minus = 0usize;
    let mut equal = 0usize;
    for &(_, ca, cb) in &pc.pairs {
        match (ca, cb) {
            (false, true) => plus += 1,
            (true, false) => minus += 1,
            _ => equal += 1,
        }
    }
    Ok((plus, minus, equal))
}

/// Two-sided Monte Carlo paired permutation test on the macro-average EM
/// difference. Each sample independently swaps whole correctness pairs.
/// Returns (p_macro, p_micro, observed macro diff, observed micro diff).
pub fn paired_permutation_test(
    a: &PredictionFile,
    b: &PredictionFile,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    if n_samples == 0 {
        return Err(Error::Invariant("permutation test needs at least one sample".into()));
    }
    let pc = paired_correctness(a, b)?;
    if pc.pairs.is_empty() {
        return Err(Error::Invariant("permutation test needs at least one query".into()));
    }
    let (obs_macro, obs_micro) = em_diffs(&pc, |_| false);
    let mut rng = seeded_rng(seed);
    let mut at_least_macro = 0usize;
    let mut at_least_micro = 0usize;
    let mut flips = vec![false; pc.pairs.len()];
    for _ in 0..n_samples {
        for f in flips.iter_mut() {
            *f = rng.random::<bool>();
        }
        let (m, u) = em_diffs(&pc, |i| flips[i]);
        if m.abs() >= obs_macro.abs() {
            at_least_macro += 1;
        }
        if u.abs() >= obs_micro.abs() {
            at_least_micro += 1;
        }
    }
    let p_macro = (1 + at_least_macro) as f64 / (1 + n_samples) as f64;
    let p_micro = (1 + at_least_micro) as f64 / (1 + n_samples) as f64;
    Ok((p_macro, p_micro, obs_macro, obs_micro))
}

/// Nearest-rank percentile of a sorted sample: the smallest value with at
/// least a q fraction of the sample at or below it.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Task-stratified percentile bootstrap for the macro-average EM
/// difference. Resamples tasks with replacement; returns the interval in
/// percentage points.
pub fn stratified_bootstrap_ci(
    a: &PredictionFile,
    b: &PredictionFile,
    n_boot: usize,
    seed: u64,
    level: f64,
) -> Result<(f64, f64)> {
    if n_boot == 0 {
        return Err(Error::Invariant("bootstrap needs at least one resample".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Invariant(format!("confidence level {level} outside (0, 1)")));
    }
    let pc = paired_correctness(a, b)?;
    let n_tasks = pc.task_ids.len();
    if n_tasks == 0 {
        return Err(Error::Invariant("bootstrap needs at least one task".into()));
    }
    // Per-task EM differences are sufficient: a resample's macro statistic
    // is the mean of the drawn tasks' differences.
    let mut correct_a = vec![0usize; n_tasks];
    let mut correct_b = vec![0usize; n_tasks];
    let mut counts = vec![0usize; n_tasks];
    for &(t, ca, cb) in &pc.pairs {
        counts[t] += 1;
        if ca {
            correct_a[t] += 1;
        }
        if cb {
            correct_b[t] += 1;
        }
    }
    let diffs: Vec<f64> = (0..n_tasks)
        .map(|t| (correct_b[t] as f64 - correct_a[t] as f64) / counts[t] as f64)
        .collect();

    let mut rng = seeded_rng(seed);
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut acc = 0.0f64;
        for _ in 0..n_tasks {
            acc += diffs[rng.random_range(0..n_tasks)];
        }
        stats.push(acc / n_tasks as f64);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lo = nearest_rank(&stats, alpha / 2.0);
    let hi = nearest_rank(&stats, 1.0 - alpha / 2.0);
    Ok((lo * 100.0, hi * 100.0))
}

/// Everything the paired audit produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_equal: usize,
    /// Two-sided permutation p-value on the macro-average difference.
    pub p_value: f64,
    /// Same test on the micro-average difference, for reference.
    pub p_value_micro: f64,
    /// Percentage points.
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Observed macro and micro differences, percentage points.
    pub macro_diff: f64,
    pub micro_diff: f64,
    /// Per-task EM for both files, percent with two decimals.
    pub per_task: Vec<TaskEmRow>,
    pub macro_em_a: f64,
    pub macro_em_b: f64,
    pub permutations: usize,
    pub bootstrap_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmRow {
    pub task_id: String,
    pub em_a: f64,
    pub em_b: f64,
}

/// Full paired audit of b against a.
pub fn audit(
    a: &PredictionFile,
    b: &PredictionFile,
    permutations: usize,
    bootstrap_samples: usize,
    seed: u64,
) -> Result<AuditReport> {
    let (n_plus, n_minus, n_equal) = flip_counts(a, b)?;
    let (p_value, p_value_micro, macro_diff, micro_diff) =
        paired_permutation_test(a, b, permutations, seed)?;
    let (ci_lo, ci_hi) = stratified_bootstrap_ci(a, b, bootstrap_samples, seed, 0.95)?;
    let em_a = exact_match(a)?;
    let em_b = exact_match(b)?;
    let per_task = em_a
        .per_task
        .iter()
        .map(|(t, &ea)| TaskEmRow {
            task_id: t.clone(),
            em_a: em_percent(ea),
            em_b: em_percent(em_b.per_task[t]),
        })
        .collect();
    Ok(AuditReport {
        n_plus,
        n_minus,
        n_equal,
        p_value,
        p_value_micro,
        ci_lo,
        ci_hi,
        macro_diff: macro_diff * 100.0,
        micro_diff: micro_diff * 100.0,
        per_task,
        macro_em_a: em_percent(em_a.macro_avg),
        macro_em_b: em_percent(em_b.macro_avg),
        permutations,
        bootstrap_samples,
        seed,
    })
}

/// Plain-text table for terminals and logs.
pub fn render_audit(report: &AuditReport) -> String {
    let mut s = String::new();
    s.push_str("task                          EM(a)    EM(b)\n");
    for row in &report.per_task {
        s.push_str(&format!(
            "{:<28} {:>8.2} {:>8.2}\n",
            row.task_id, row.em_a, row.em_b
        ));
    }
    s.push_str(&format!(
        "{:<28} {:>8.2} {:>8.2}\n",
        "macro", report.macro_em_a, report.macro_em_b
    ));
    s.push_str(&format!(
        "flips +{} -{} ={}   diff {:+.2}pp   p {:.4}   95% CI [{:.2}, {:.2}]\n",
        report.n_plus,
        report.n_minus,
        report.n_equal,
        report.macro_diff,
        report.p_value,
        report.ci_lo,
        report.ci_hi
    ));
    s
}
