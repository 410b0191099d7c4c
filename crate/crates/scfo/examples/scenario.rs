//! Runs one of the bundled closed-loop scenarios and prints its summary.
//!
//! `cargo run --example scenario -- scenarios/degrading_minus.json`

use std::path::PathBuf;

use scfo::simharness::{run_scenario, ScenarioConfig};

fn main() {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/degrading_minus.json")
    });
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let cfg: ScenarioConfig = serde_json::from_str(&text).expect("valid scenario file");
    let run = run_scenario(&cfg).expect("scenario runs");
    for row in run.rows.iter().step_by((run.rows.len() / 10).max(1)) {
        println!(
            "k={:>3} u=[{:+.4}, {:+.4}] cost={:+.5} gp=[{:+.4}, {:+.4}] {}",
            row.k, row.u[0], row.u[1], row.cost_true, row.g_true[0], row.g_true[1], row.scenario
        );
    }
    println!("{}", serde_json::to_string_pretty(&run.summary).unwrap());
}
