//! Two forwarding contexts with different item types sharing one
//! communicator: a compact "request" stream and a wider "payload" stream.
//! Forwarding one context leaves the other untouched; both ranks must
//! forward the contexts in the same order.
//!
//! ```bash
//! cargo run --example dual_context
//! ```

use workfwd::harness::{launch, LaunchConfig, LaunchTransport, RankReport};
use workfwd::{TypedContext, WorkItem};

/// A 12-byte request record.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Request {
    id: u32,
    size: u64,
}

impl WorkItem for Request {
    const ITEM_SIZE: usize = 12;

    fn store(&self, dst: &mut [u8]) {
        dst[..4].copy_from_slice(&self.id.to_le_bytes());
        dst[4..].copy_from_slice(&self.size.to_le_bytes());
    }

    fn load(src: &[u8]) -> Self {
        Request {
            id: u32::from_le_bytes(src[..4].try_into().unwrap()),
            size: u64::from_le_bytes(src[4..].try_into().unwrap()),
        }
    }
}

fn main() {
    let report = launch(
        LaunchConfig::new(2, LaunchTransport::InProcess),
        |rank, comm| {
            let mut requests = TypedContext::<Request>::new(comm).map_err(|e| e.to_string())?;
            requests.resize_queues(8);
            let mut payloads = TypedContext::<[u8; 44]>::new(comm).map_err(|e| e.to_string())?;
            payloads.resize_queues(8);

            // rank 0 asks rank 1 for data; rank 1 emits nothing yet
            if rank == 0 {
                requests.view().emit_outgoing(&Request { id: 7, size: 44 }, 1);
            }
            requests.forward().map_err(|e| e.to_string())?;
            // the payload context is untouched by the request forward
            assert_eq!(payloads.input_count(), 0);

            // rank 1 answers each request with one payload record
            {
                let view = payloads.view();
                for req in requests.incoming_items() {
                    let mut data = [0u8; 44];
                    data[..4].copy_from_slice(&req.id.to_le_bytes());
                    view.emit_outgoing(&data, 0);
                }
            }
            payloads.forward().map_err(|e| e.to_string())?;

            if rank == 0 {
                let answers = payloads.incoming_items();
                println!("rank 0 received {} payload record(s) of 44 bytes", answers.len());
                assert_eq!(u32::from_le_bytes(answers[0][..4].try_into().unwrap()), 7);
            }
            Ok(RankReport::<()>::default())
        },
    );
    report.expect("launch failed");
}
