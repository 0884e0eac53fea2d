//! Compare two systems on the same queries: exact match, flip counts, a
//! paired permutation test, and a task-stratified bootstrap interval.

use lorapool::eval::{audit, render_audit, PredictionFile, PredictionRecord};

fn file(rows: &[(&str, &str, &str, &str)]) -> PredictionFile {
    PredictionFile::new(
        rows.iter()
            .map(|(task, query, pred, reference)| PredictionRecord {
                task_id: task.to_string(),
                query_id: query.to_string(),
                prediction: pred.to_string(),
                reference: reference.to_string(),
                diagnostic: false,
            })
            .collect(),
    )
    .expect("well-formed rows")
}

fn main() -> lorapool::Result<()> {
    // Baseline misses half of the geometry task and all of history.
    let baseline = file(&[
        ("geometry", "q1", "3.14", "3.14"),
        ("geometry", "q2", "180", "360"),
        ("geometry", "q3", "90", "90"),
        ("geometry", "q4", "0", "1"),
        ("history", "q1", "1914", "1918"),
        ("history", "q2", "Rome", "Athens"),
        ("trivia", "q1", "blue", "blue"),
        ("trivia", "q2", "7", "7"),
    ]);
    // Candidate fixes history, keeps geometry, drops one trivia answer.
    let candidate = file(&[
        ("geometry", "q1", "3.14", "3.14"),
        ("geometry", "q2", "360", "360"),
        ("geometry", "q3", "90", "90"),
        ("geometry", "q4", "0", "1"),
        ("history", "q1", "1918", "1918"),
        ("history", "q2", "Athens", "Athens"),
        ("trivia", "q1", "green", "blue"),
        ("trivia", "q2", "7", "7"),
    ]);

    let report = audit(&baseline, &candidate, 20_000, 10_000, 42)?;
    print!("{}", render_audit(&report));
    println!(
        "flips: {} queries improved, {} regressed, {} unchanged",
        report.n_plus, report.n_minus, report.n_equal
    );
    println!(
        "macro EM {:.1} -> {:.1}; two-sided p = {:.4} over whole-query flips",
        report.macro_em_a, report.macro_em_b, report.p_value
    );
    println!(
        "95% bootstrap interval for the macro gap: [{:+.1}, {:+.1}] points",
        report.ci_lo, report.ci_hi
    );
    Ok(())
}
