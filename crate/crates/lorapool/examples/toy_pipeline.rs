//! The whole flow in one call: generate a pool, retrieve candidates per
//! view, search weights, compose, predict, aggregate, and score.

use lorapool::cli::parse_toy_spec;
use lorapool::pipeline::{run_pipeline, PipelineOptions};

fn main() -> lorapool::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut opts = PipelineOptions::new(dir.path().join("run"));
    opts.toy = Some(parse_toy_spec("seed=7,adapters=5,tasks=2")?);

    let outcome = run_pipeline(&opts)?;
    let s = &outcome.summary;
    println!(
        "method {} / mode {}: macro EM {:.2}, micro EM {:.2} over {} tasks",
        s.method,
        s.mode,
        s.macro_em,
        s.micro_em,
        s.per_task.len()
    );
    for t in &s.per_task {
        println!(
            "  {}: EM {:.2} on {} queries, {} prediction paths",
            t.task_id, t.em, t.n_queries, t.path_cost
        );
    }
    println!("seeds used: {:?}", s.seeds);
    println!("artifacts:");
    for path in &outcome.artifacts {
        println!("  {}", path.strip_prefix(dir.path()).unwrap_or(path).display());
    }
    Ok(())
}
