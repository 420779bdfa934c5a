//! Programmatic benchmark use: sweep the forward path over three batch
//! sizes on four in-process ranks and print the CSV.
//!
//! ```bash
//! cargo run --release --example bench_sweep
//! ```

use workfwd::bench::{bench_threads, to_csv, trend_warning, BenchConfig, Pattern};
use workfwd::harness::LaunchTransport;

fn main() {
    let mut cfg = BenchConfig::new(4, vec![1_000, 10_000, 100_000]);
    cfg.pattern = Pattern::UniformRandom;
    cfg.rounds = 5;

    let rows = bench_threads(&cfg, LaunchTransport::InProcess).expect("bench failed");
    if let Some(warning) = trend_warning(&rows) {
        eprintln!("warning: {warning}");
    }
    print!("{}", to_csv(&rows));
}
