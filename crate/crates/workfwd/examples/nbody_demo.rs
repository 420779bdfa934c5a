//! A small distributed Barnes-Hut run: 2048 bodies on four ranks, with the
//! three forwarding contexts (particles, virtual particles, refinement
//! requests) driving migration and the essential-tree exchange.
//!
//! ```bash
//! cargo run --release --example nbody_demo
//! ```

use workfwd::harness::{launch, LaunchConfig, LaunchTransport, RankReport};
use workfwd::nbody::{run_nbody_rank, NBodyConfig};

fn main() {
    let mut cfg = NBodyConfig::new(2048);
    cfg.steps = 20;
    cfg.theta = 0.5;
    cfg.dt = 5e-4;
    cfg.seed = 1;

    let report = launch(
        LaunchConfig::new(4, LaunchTransport::InProcess),
        |_rank, comm| {
            let summary = run_nbody_rank(comm, &cfg)?;
            Ok(RankReport::with_detail(summary))
        },
    )
    .expect("launch failed");

    let summary = &report.per_rank[0].detail;
    println!("step  count  total_mass          |momentum|");
    for d in &summary.diags {
        let p = (d.momentum[0].powi(2) + d.momentum[1].powi(2) + d.momentum[2].powi(2)).sqrt();
        println!("{:4}  {:5}  {:.12e}  {:.6e}", d.step, d.count, d.total_mass, p);
    }
    let final_counts: Vec<usize> = report.per_rank.iter().map(|r| r.detail.local_final).collect();
    println!("bodies per rank after the run: {final_counts:?}");
}
