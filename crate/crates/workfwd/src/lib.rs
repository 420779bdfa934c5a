//! Destination-sorted work-item forwarding between ranks.
//!
//! `workfwd` moves batches of fixed-size work items (rays, particles,
//! requests, ...) between the ranks of a small collective world. Each rank
//! reads items from an input queue, emits new or surviving items into an
//! output queue together with a destination rank, and a collective
//! `forward()` call sorts the batch by destination, exchanges it and reports
//! how much work is left anywhere in the system.
//!
//! The crate ships:
//!
//! - [`comm`]: four collectives (barrier, count exchange, byte exchange,
//!   sum-reduce) over an in-process transport (ranks as threads) and a
//!   socket transport (ranks as processes on a TCP mesh), behind one
//!   interface.
//! - [`forward`]: the forwarding context, emit views and the sort/exchange
//!   pipeline.
//! - [`harness`]: launches N ranks as threads or spawned processes and runs
//!   round-based programs to distributed termination.
//! - [`streamlines`]: round-based particle advection over a distributed
//!   vector field, producing streamline polylines.
//! - [`nbody`]: distributed Barnes-Hut N-body with essential-tree exchange
//!   and leapfrog integration.
//! - `bench`: a forwarding throughput benchmark with CSV output.
//!
//! A two-rank world where each rank hands one value to its neighbour:
//!
//! ```
//! use workfwd::harness::{launch, LaunchConfig, LaunchTransport, RankReport};
//! use workfwd::TypedContext;
//!
//! let report = launch(
//!     LaunchConfig::new(2, LaunchTransport::InProcess),
//!     |rank, comm| {
//!         let mut ctx = TypedContext::<u64>::new(comm).map_err(|e| e.to_string())?;
//!         ctx.resize_queues(8);
//!         ctx.view().emit_outgoing(&(rank as u64 * 100), 1 - rank);
//!         let live = ctx.forward().map_err(|e| e.to_string())?;
//!         assert_eq!(live, 2);
//!         assert_eq!(ctx.incoming_items(), vec![(1 - rank) as u64 * 100]);
//!         Ok(RankReport::<()>::default())
//!     },
//! )
//! .unwrap();
//! assert_eq!(report.per_rank.len(), 2);
//! ```
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `workfwd` binary for the `bench`, `streamlines`, `nbody` and
//! `selftest` subcommands.

// coordinate-axis loops index several arrays at once; the iterator form
// the lint suggests would obscure them
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod comm;
pub mod forward;
pub mod harness;
pub mod nbody;
pub mod selftest;
pub mod streamlines;

pub use comm::{CommConfig, CommError, Communicator, InProcessGroup, Transport};
pub use forward::{
    EmitView, ForwardError, ForwardingContext, RawEmitView, TypedContext, WorkItem, WorkItemSchema,
};
