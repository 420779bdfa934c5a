//! Forwarding basics: four ranks pass tokens around a ring until every
//! token's hop budget is spent. The collective `forward()` returns the
//! global number of live items, so all ranks agree on when to stop.
//!
//! ```bash
//! cargo run --example ring_walk
//! ```

use workfwd::forward::WorkItem;
use workfwd::harness::{launch, run_rounds, LaunchConfig, LaunchTransport, RankReport};
use workfwd::{ForwardingContext, WorkItemSchema};

fn main() {
    let num_ranks = 4;
    let report = launch(
        LaunchConfig::new(num_ranks, LaunchTransport::InProcess),
        |rank, comm| {
            let mut ctx = ForwardingContext::new(comm, WorkItemSchema::new(8).unwrap());
            ctx.resize_queues(16);

            // every rank seeds one token with enough hops for a full lap
            let hops = num_ranks as u64;
            ctx.seed_input_bytes(&hops.to_le_bytes()).map_err(|e| e.to_string())?;

            let next = (rank + 1) % comm.num_ranks();
            let rounds = run_rounds(&mut ctx, 1_000, |view| {
                for i in 0..view.num_incoming() {
                    let hops = u64::load(view.incoming_bytes(i));
                    if hops > 1 {
                        view.emit_bytes(&(hops - 1).to_le_bytes(), next);
                    }
                }
                Ok(())
            })
            .map_err(|e| e.to_string())?;

            Ok(RankReport::<()> { rounds, ..Default::default() })
        },
    )
    .expect("launch failed");

    println!("{} ranks, one full lap each: {} rounds to global termination", num_ranks, report.rounds);
}
