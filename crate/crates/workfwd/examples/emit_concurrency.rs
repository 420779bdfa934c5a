//! Concurrent emits within one rank: eight worker threads share copies of
//! one emit view and append through the same atomic counter. Every item
//! lands in a unique output slot; overflow attempts are dropped and
//! counted.
//!
//! ```bash
//! cargo run --example emit_concurrency
//! ```

use workfwd::comm::CommConfig;
use workfwd::{Communicator, ForwardingContext, WorkItemSchema};

fn main() {
    let comm = Communicator::create(CommConfig::single()).unwrap();
    let mut ctx = ForwardingContext::new(&comm, WorkItemSchema::new(16).unwrap());
    // room for 600 of the 800 emits: 200 must be dropped and counted
    ctx.resize_queues(600);

    let view = ctx.raw_view();
    std::thread::scope(|scope| {
        for worker in 0..8u64 {
            scope.spawn(move || {
                let mut item = [0u8; 16];
                for i in 0..100u64 {
                    item[..8].copy_from_slice(&(worker * 100 + i).to_le_bytes());
                    item[8..].copy_from_slice(&worker.to_le_bytes());
                    view.emit_bytes(&item, 0);
                }
            });
        }
    });

    println!(
        "emit attempts: {}, accepted: {}, dropped: {}",
        ctx.emit_attempts(),
        ctx.accepted(),
        ctx.dropped()
    );
    let delivered = ctx.forward().unwrap();
    println!("delivered to self after forward: {delivered}");
    assert_eq!(delivered, 600);
}
