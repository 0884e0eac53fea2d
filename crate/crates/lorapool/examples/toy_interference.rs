//! Why residual composition exists: on pools whose updates share a
//! direction with opposite-signed side effects, the plain weighted sum
//! cancels signal that the composer keeps.

use lorapool::toy::{interference_scenario, ScenarioKind};

fn main() -> lorapool::Result<()> {
    println!(
        "{:<12} {:>14} {:>14}  verdict",
        "pool", "linear loss", "composer loss"
    );
    for kind in [
        ScenarioKind::Orthogonal,
        ScenarioKind::Duplicated,
        ScenarioKind::Conflict,
    ] {
        let mut linear_sum = 0.0;
        let mut lasrc_sum = 0.0;
        for seed in 0..4u64 {
            let report = interference_scenario(seed, kind)?;
            linear_sum += report.linear_loss;
            lasrc_sum += report.lasrc_loss;
        }
        let (linear, lasrc) = (linear_sum / 4.0, lasrc_sum / 4.0);
        let verdict = if (linear - lasrc).abs() <= 1e-6 * linear.max(1e-9) {
            "identical: nothing to decorrelate"
        } else if lasrc < linear {
            "composer wins: interference removed"
        } else {
            "plain sum wins"
        };
        println!("{:<12} {:>14.6} {:>14.6}  {verdict}", format!("{kind:?}"), linear, lasrc);
    }
    Ok(())
}
