//! The socket transport: three ranks on a TCP loopback mesh running the
//! same collectives as the in-process transport. The wire format is an
//! 8-byte little-endian length prefix plus an opcode-tagged payload.
//!
//! ```bash
//! cargo run --example socket_ranks
//! ```

use workfwd::comm::{CommConfig, Communicator};
use workfwd::harness::loopback_endpoints;

fn main() {
    let num_ranks = 3;
    let endpoints = loopback_endpoints(num_ranks).expect("no free ports");
    println!("mesh endpoints: {endpoints:?}");

    let handles: Vec<_> = (0..num_ranks)
        .map(|rank| {
            let endpoints = endpoints.clone();
            std::thread::spawn(move || {
                let comm = Communicator::create(CommConfig::socket(rank, endpoints))
                    .expect("mesh setup failed");
                // sum of rank ids, then a transposed count exchange
                let total = comm.allreduce_sum(rank as u64).unwrap();
                let counts: Vec<u64> = (0..num_ranks as u64).map(|p| 10 * rank as u64 + p).collect();
                let received = comm.alltoall_counts(&counts).unwrap();
                comm.barrier().unwrap();
                (total, received)
            })
        })
        .collect();

    for (rank, handle) in handles.into_iter().enumerate() {
        let (total, received) = handle.join().unwrap();
        println!("rank {rank}: allreduce_sum(ranks) = {total}, transposed row = {received:?}");
    }
}
