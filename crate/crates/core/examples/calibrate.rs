//! Runs the reference toy benchmark end to end and prints the measured
//! numbers as JSON. The committed calibration file under `tests/data/` was
//! produced by this binary; re-run it after changing the benchmark.
//!
//! ```text
//! cargo run --release -p langpure --example calibrate
//! ```

use std::time::Instant;

use langpure::toybench::{build, run, ToyBenchConfig};

fn main() {
    let config = ToyBenchConfig::default();
    let start = Instant::now();
    let artifacts = build(&config).expect("benchmark build");
    let built = start.elapsed().as_secs_f64();
    let results = run(&artifacts, &config).expect("benchmark run");
    let total = start.elapsed().as_secs_f64();

    let out = serde_json::json!({
        "config": config,
        "results": results,
        "finetune_loss": artifacts.finetune_loss,
        "build_seconds": built,
        "total_seconds": total,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
}
