//! Type-generic work-item forwarding: per-rank input/output queues with a
//! concurrency-safe emit path and a collective `forward()` that moves every
//! emitted item to its requested destination rank.
//!
//! The pipeline per forward: pack destination/index sort keys, radix-sort,
//! gather items into destination order, tally contiguous segments, exchange
//! per-peer counts, bulk-exchange bytes, then swap queues and sum-reduce the
//! received totals so every rank can detect distributed termination.

pub mod sort;

mod item;
mod typed;

pub(crate) use item::wire;
pub use item::WorkItem;
pub use typed::{EmitView, TypedContext};

use std::cell::UnsafeCell;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::comm::{CommError, Communicator};
use sort::{compute_segments, exclusive_prefix_sum, pack_sort_keys, sort_and_gather_into, ExchangePlan};

/// Errors raised by context construction and forwarding.
#[derive(Debug)]
pub enum ForwardError {
    Config(String),
    /// The received item total would exceed the queue capacity. Raised
    /// collectively on every rank after the count exchange, before any item
    /// bytes move.
    ReceiveOverflow { rank: usize, total_recv: u64, capacity: u64 },
    Comm(CommError),
}

impl fmt::Display for ForwardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForwardError::Config(m) => write!(f, "invalid forwarding config: {m}"),
            ForwardError::ReceiveOverflow { rank, total_recv, capacity } => write!(
                f,
                "receive overflow: rank {rank} would take {total_recv} items into capacity {capacity}"
            ),
            ForwardError::Comm(e) => write!(f, "communication failed: {e}"),
        }
    }
}

impl std::error::Error for ForwardError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ForwardError::Comm(e) => Some(e),
            _ => None,
        }
    }
}

impl From<CommError> for ForwardError {
    fn from(e: CommError) -> Self {
        ForwardError::Comm(e)
    }
}

/// Fixed per-item byte size for one context. All items of a context
/// serialize to exactly this many bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItemSchema {
    item_size_bytes: usize,
}

impl WorkItemSchema {
    pub fn new(item_size_bytes: usize) -> Result<Self, ForwardError> {
        if item_size_bytes == 0 {
            return Err(ForwardError::Config("item_size_bytes must be positive".into()));
        }
        Ok(WorkItemSchema { item_size_bytes })
    }

    pub fn item_size_bytes(&self) -> usize {
        self.item_size_bytes
    }
}

/// Byte slab written concurrently by emitters.
///
/// Safety rests on slot uniqueness: every writer owns a distinct slot index
/// taken from the shared atomic counter, so writes never alias. Reads only
/// happen through `&mut ForwardingContext`, i.e. after all emit views are
/// gone.
struct SharedSlab {
    bytes: UnsafeCell<Box<[u8]>>,
}

unsafe impl Sync for SharedSlab {}

impl SharedSlab {
    fn new(len: usize) -> Self {
        SharedSlab { bytes: UnsafeCell::new(vec![0u8; len].into_boxed_slice()) }
    }

    /// Write `data` at byte offset `off`. Caller must hold a unique slot.
    unsafe fn write(&self, off: usize, data: &[u8]) {
        let slab = &mut *self.bytes.get();
        slab[off..off + data.len()].copy_from_slice(data);
    }

    /// Exclusive access; requires no live writers (enforced by `&mut self`
    /// on the owning context).
    fn get_mut(&mut self) -> &mut [u8] {
        self.bytes.get_mut()
    }
}

/// Destination slab, same uniqueness contract as [`SharedSlab`].
struct DestSlab {
    dests: UnsafeCell<Box<[u32]>>,
}

unsafe impl Sync for DestSlab {}

impl DestSlab {
    fn new(len: usize) -> Self {
        DestSlab { dests: UnsafeCell::new(vec![0u32; len].into_boxed_slice()) }
    }

    unsafe fn write(&self, slot: usize, dest: u32) {
        (*self.dests.get())[slot] = dest;
    }

    fn get_mut(&mut self) -> &mut [u32] {
        self.dests.get_mut()
    }
}

/// Per-round accounting kept after each forward.
#[derive(Debug, Clone, Default)]
pub struct RoundStats {
    /// Rounds completed on this context so far.
    pub round: u64,
    /// Items accepted for each destination rank in the last round.
    pub sent_to: Vec<u64>,
    /// Items delivered into the input queue in the last round.
    pub received: u64,
    /// Emit attempts dropped because the output queue was full.
    pub dropped: u64,
    /// Total emit attempts with a valid destination.
    pub emitted: u64,
}

/// Per-rank forwarding state: an input queue the application reads, an
/// output queue it emits into, and the collective machinery that moves
/// emitted items between ranks.
///
/// Input and output live in two separate arrays; `forward()` swaps them
/// after the exchange so the received items become the next input. Several
/// contexts (with different schemas) may share one communicator as long as
/// every rank forwards them in the same order.
pub struct ForwardingContext {
    comm: Communicator,
    schema: WorkItemSchema,
    capacity: usize,
    input: Box<[u8]>,
    input_count: usize,
    output: SharedSlab,
    output_dests: DestSlab,
    emit_counter: AtomicU64,
    drop_counter: AtomicU64,
    invalid_dest_counter: AtomicU64,
    stats: RoundStats,
    trace: Option<BufWriter<File>>,
}

impl ForwardingContext {
    /// Create an empty context (capacity 0) over `comm`.
    pub fn new(comm: &Communicator, schema: WorkItemSchema) -> Self {
        let trace = trace_writer(comm);
        ForwardingContext {
            comm: comm.clone(),
            schema,
            capacity: 0,
            input: Box::new([]),
            input_count: 0,
            output: SharedSlab::new(0),
            output_dests: DestSlab::new(0),
            emit_counter: AtomicU64::new(0),
            drop_counter: AtomicU64::new(0),
            invalid_dest_counter: AtomicU64::new(0),
            stats: RoundStats { sent_to: vec![0; comm.num_ranks()], ..Default::default() },
            trace,
        }
    }

    /// Set the maximum number of items the input, output and destination
    /// arrays can hold. Existing input items are preserved up to the new
    /// capacity; output counters reset to zero.
    pub fn resize_queues(&mut self, capacity: usize) {
        let isz = self.schema.item_size_bytes;
        let mut new_input = vec![0u8; capacity * isz].into_boxed_slice();
        let keep = self.input_count.min(capacity);
        new_input[..keep * isz].copy_from_slice(&self.input[..keep * isz]);
        self.input = new_input;
        self.input_count = keep;
        self.output = SharedSlab::new(capacity * isz);
        self.output_dests = DestSlab::new(capacity);
        self.capacity = capacity;
        self.emit_counter.store(0, Ordering::Relaxed);
        self.drop_counter.store(0, Ordering::Relaxed);
        self.invalid_dest_counter.store(0, Ordering::Relaxed);
    }

    /// Place items directly into the local input queue (seeding).
    ///
    /// `bytes` must hold a whole number of items and fit the capacity.
    pub fn seed_input_bytes(&mut self, bytes: &[u8]) -> Result<(), ForwardError> {
        let isz = self.schema.item_size_bytes;
        if !bytes.len().is_multiple_of(isz) {
            return Err(ForwardError::Config(format!(
                "seed of {} bytes is not a multiple of item size {}",
                bytes.len(),
                isz
            )));
        }
        let count = bytes.len() / isz;
        if count > self.capacity {
            return Err(ForwardError::Config(format!(
                "seeding {count} items into capacity {}",
                self.capacity
            )));
        }
        self.input[..bytes.len()].copy_from_slice(bytes);
        self.input_count = count;
        Ok(())
    }

    /// Borrow a byte-level emit view. Any number of copies may emit and read
    /// concurrently; the context itself stays borrowed until they are gone.
    pub fn raw_view(&self) -> RawEmitView<'_> {
        RawEmitView {
            input: &self.input[..self.input_count * self.schema.item_size_bytes],
            item_size: self.schema.item_size_bytes,
            output: &self.output,
            output_dests: &self.output_dests,
            emit_counter: &self.emit_counter,
            drop_counter: &self.drop_counter,
            invalid_dest_counter: &self.invalid_dest_counter,
            capacity: self.capacity,
            num_ranks: self.comm.num_ranks(),
        }
    }

    /// Collective: deliver every surviving emitted item to its destination
    /// rank, replace the local input queue with the items received, reset
    /// the emit counters, and return the global number of items delivered
    /// this round (identical on every rank; zero signals distributed
    /// termination).
    pub fn forward(&mut self) -> Result<u64, ForwardError> {
        let isz = self.schema.item_size_bytes;
        let num_ranks = self.comm.num_ranks();
        let emitted = self.emit_counter.load(Ordering::Acquire);
        let n = (emitted as usize).min(self.capacity);

        // Sort emitted items into destination order. The input buffer has
        // been consumed by the application; reuse it as the gather target.
        // From here the old input is gone, even if the exchange fails.
        self.input_count = 0;
        let keys = pack_sort_keys(&self.output_dests.get_mut()[..n], n);
        let out_bytes = self.output.get_mut();
        let sorted_dests = sort_and_gather_into(&out_bytes[..n * isz], isz, &keys, &mut self.input);

        let (send_counts, send_offsets) = compute_segments(&sorted_dests, num_ranks);
        let recv_counts = self.comm.alltoall_counts(&send_counts)?;
        let (recv_offsets, total_recv) = exclusive_prefix_sum(&recv_counts);

        // Overflow is detected after the count exchange and raised on every
        // rank so no peer is left hanging in the bulk exchange.
        let local_overflow = (total_recv > self.capacity as u64) as u64;
        if self.comm.allreduce_sum(local_overflow)? > 0 {
            return Err(ForwardError::ReceiveOverflow {
                rank: self.comm.rank(),
                total_recv,
                capacity: self.capacity as u64,
            });
        }

        let plan = ExchangePlan {
            send_counts,
            send_offsets,
            recv_counts,
            recv_offsets,
            total_recv,
        };
        let bytes_of = |v: &[u64]| v.iter().map(|c| c * isz as u64).collect::<Vec<u64>>();
        self.comm.alltoallv_bytes(
            &self.input[..n * isz],
            &bytes_of(&plan.send_counts),
            &bytes_of(&plan.send_offsets),
            self.output.get_mut(),
            &bytes_of(&plan.recv_counts),
            &bytes_of(&plan.recv_offsets),
        )?;

        // Received items become the next input queue.
        std::mem::swap(&mut self.input, self.output.bytes.get_mut());
        self.input_count = total_recv as usize;

        self.stats.round += 1;
        self.stats.sent_to = plan.send_counts.clone();
        self.stats.received = total_recv;
        self.stats.dropped = self.drop_counter.load(Ordering::Relaxed);
        self.stats.emitted = emitted;
        self.write_trace_row();

        self.emit_counter.store(0, Ordering::Relaxed);
        self.drop_counter.store(0, Ordering::Relaxed);
        self.invalid_dest_counter.store(0, Ordering::Relaxed);

        let remaining = self.comm.allreduce_sum(total_recv)?;
        Ok(remaining)
    }

    pub fn schema(&self) -> WorkItemSchema {
        self.schema
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Items currently in the input queue.
    pub fn input_count(&self) -> usize {
        self.input_count
    }

    /// Raw bytes of the input queue.
    pub fn input_bytes(&self) -> &[u8] {
        &self.input[..self.input_count * self.schema.item_size_bytes]
    }

    /// Emit attempts (valid destination) since the last forward.
    pub fn emit_attempts(&self) -> u64 {
        self.emit_counter.load(Ordering::Relaxed)
    }

    /// Emits accepted into the output queue since the last forward.
    pub fn accepted(&self) -> u64 {
        self.emit_attempts().min(self.capacity as u64)
    }

    /// Emits dropped for capacity since the last forward.
    pub fn dropped(&self) -> u64 {
        self.drop_counter.load(Ordering::Relaxed)
    }

    /// Emits rejected for an invalid destination rank (never enqueued,
    /// counted separately from capacity drops).
    pub fn invalid_dest(&self) -> u64 {
        self.invalid_dest_counter.load(Ordering::Relaxed)
    }

    /// Accounting for the most recent forward.
    pub fn last_round(&self) -> &RoundStats {
        &self.stats
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    fn write_trace_row(&mut self) {
        if let Some(w) = self.trace.as_mut() {
            let cols: Vec<String> = self.stats.sent_to.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                w,
                "{},{},{},{},{}",
                self.stats.round,
                self.comm.rank(),
                cols.join(","),
                self.stats.received,
                self.stats.dropped
            );
            let _ = w.flush();
        }
    }
}

/// Open the per-rank trace CSV when `FORWARD_TRACE` is set. A value of `1`
/// writes into the working directory; any other value is used as the target
/// directory. Contexts sharing a rank get distinct files.
fn trace_writer(comm: &Communicator) -> Option<BufWriter<File>> {
    static NEXT_CTX: AtomicU64 = AtomicU64::new(0);
    let val = std::env::var("FORWARD_TRACE").ok()?;
    if val.is_empty() || val == "0" {
        return None;
    }
    let dir = if val == "1" { std::path::PathBuf::from(".") } else { std::path::PathBuf::from(val) };
    let ctx_id = NEXT_CTX.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!("forward_trace.rank{}.ctx{}.csv", comm.rank(), ctx_id));
    let file = File::create(&path).ok()?;
    let mut w = BufWriter::new(file);
    let peers: Vec<String> = (0..comm.num_ranks()).map(|r| format!("sent_to_{r}")).collect();
    let _ = writeln!(w, "round,rank,{},received,dropped", peers.join(","));
    Some(w)
}

/// Byte-level handle onto one context's queues, cheap to copy and safe to
/// share across worker threads within a rank. All copies observe the same
/// shared counters.
#[derive(Clone, Copy)]
pub struct RawEmitView<'a> {
    input: &'a [u8],
    item_size: usize,
    output: &'a SharedSlab,
    output_dests: &'a DestSlab,
    emit_counter: &'a AtomicU64,
    drop_counter: &'a AtomicU64,
    invalid_dest_counter: &'a AtomicU64,
    capacity: usize,
    num_ranks: usize,
}

impl<'a> RawEmitView<'a> {
    /// Number of valid items in the input queue.
    pub fn num_incoming(&self) -> usize {
        self.input.len() / self.item_size
    }

    /// Read the item at `idx`. Any caller may read any index any number of
    /// times. Panics if `idx` is out of bounds.
    pub fn incoming_bytes(&self, idx: usize) -> &'a [u8] {
        assert!(idx < self.num_incoming(), "incoming index {idx} out of bounds");
        &self.input[idx * self.item_size..(idx + 1) * self.item_size]
    }

    pub fn item_size(&self) -> usize {
        self.item_size
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    /// Atomically append an item to the output queue.
    ///
    /// Returns `true` if the item took a slot. Emits beyond the queue
    /// capacity are dropped (counted); an invalid destination rank is
    /// rejected without taking a slot. Self-sends are valid.
    pub fn emit_bytes(&self, item: &[u8], dest: usize) -> bool {
        debug_assert_eq!(item.len(), self.item_size);
        if dest >= self.num_ranks {
            self.invalid_dest_counter.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        let slot = self.emit_counter.fetch_add(1, Ordering::AcqRel) as usize;
        if slot >= self.capacity {
            self.drop_counter.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        // SAFETY: `slot` is unique to this call, so the byte ranges below
        // are disjoint from every other writer; readers wait for `&mut`.
        unsafe {
            self.output.write(slot * self.item_size, item);
            self.output_dests.write(slot, dest as u32);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::CommConfig;

    fn single_ctx(item_size: usize) -> ForwardingContext {
        let comm = Communicator::create(CommConfig::single()).unwrap();
        ForwardingContext::new(&comm, WorkItemSchema::new(item_size).unwrap())
    }

    #[test]
    fn schema_rejects_zero_size() {
        assert!(WorkItemSchema::new(0).is_err());
        assert!(WorkItemSchema::new(44).is_ok());
    }

    #[test]
    fn fresh_context_is_empty() {
        let ctx = single_ctx(44);
        assert_eq!(ctx.input_count(), 0);
        assert_eq!(ctx.capacity(), 0);
        assert_eq!(ctx.raw_view().num_incoming(), 0);
    }

    #[test]
    fn zero_capacity_drops_everything() {
        let ctx = single_ctx(4);
        let view = ctx.raw_view();
        assert!(!view.emit_bytes(&[1, 2, 3, 4], 0));
        assert_eq!(ctx.emit_attempts(), 1);
        assert_eq!(ctx.dropped(), 1);
    }

    #[test]
    fn resize_preserves_input_and_resets_counters() {
        let mut ctx = single_ctx(1);
        ctx.resize_queues(4);
        ctx.seed_input_bytes(&[9, 8, 7]).unwrap();
        ctx.raw_view().emit_bytes(&[1], 0);
        ctx.resize_queues(2);
        assert_eq!(ctx.input_bytes(), &[9, 8]);
        assert_eq!(ctx.emit_attempts(), 0);
    }

    #[test]
    fn overflow_drop_rule() {
        let mut ctx = single_ctx(1);
        ctx.resize_queues(10);
        let view = ctx.raw_view();
        for i in 0..25u8 {
            view.emit_bytes(&[i], 0);
        }
        assert_eq!(ctx.emit_attempts(), 25);
        assert_eq!(ctx.dropped(), 15);
        assert_eq!(ctx.accepted(), 10);
    }

    #[test]
    fn emit_under_capacity_keeps_call_order() {
        let mut ctx = single_ctx(1);
        ctx.resize_queues(4);
        let view = ctx.raw_view();
        assert!(view.emit_bytes(b"A", 0));
        assert!(view.emit_bytes(b"B", 0));
        assert!(view.emit_bytes(b"C", 0));
        assert_eq!(ctx.emit_attempts(), 3);
        let remaining = ctx.forward().unwrap();
        assert_eq!(remaining, 3);
        assert_eq!(ctx.input_bytes(), b"ABC");
    }

    #[test]
    fn invalid_dest_rejected_separately() {
        let mut ctx = single_ctx(1);
        ctx.resize_queues(4);
        let view = ctx.raw_view();
        assert!(!view.emit_bytes(&[1], 5));
        assert!(view.emit_bytes(&[2], 0));
        assert_eq!(ctx.invalid_dest(), 1);
        assert_eq!(ctx.dropped(), 0);
        assert_eq!(ctx.emit_attempts(), 1);
    }

    #[test]
    fn loopback_forward_returns_count() {
        let mut ctx = single_ctx(8);
        ctx.resize_queues(8);
        let view = ctx.raw_view();
        for i in 0..5u64 {
            view.emit_bytes(&i.to_le_bytes(), 0);
        }
        let remaining = ctx.forward().unwrap();
        assert_eq!(remaining, 5);
        assert_eq!(ctx.input_count(), 5);
        // counters reset
        assert_eq!(ctx.emit_attempts(), 0);
        // termination round
        let remaining = ctx.forward().unwrap();
        assert_eq!(remaining, 0);
        assert_eq!(ctx.input_count(), 0);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn incoming_index_bounds_checked() {
        let mut ctx = single_ctx(1);
        ctx.resize_queues(4);
        ctx.seed_input_bytes(&[1, 2, 3]).unwrap();
        let view = ctx.raw_view();
        view.incoming_bytes(3);
    }

    #[test]
    fn concurrent_emits_take_unique_slots() {
        let mut ctx = single_ctx(16);
        ctx.resize_queues(800);
        let view = ctx.raw_view();
        std::thread::scope(|scope| {
            for worker in 0..8u64 {
                scope.spawn(move || {
                    for i in 0..100u64 {
                        let mut item = [0u8; 16];
                        item[..8].copy_from_slice(&(worker * 100 + i).to_le_bytes());
                        item[8..].copy_from_slice(&worker.to_le_bytes());
                        assert!(view.emit_bytes(&item, 0));
                    }
                });
            }
        });
        assert_eq!(ctx.emit_attempts(), 800);
        assert_eq!(ctx.dropped(), 0);
        let remaining = ctx.forward().unwrap();
        assert_eq!(remaining, 800);
        // all 800 distinct ids present exactly once
        let mut ids: Vec<u64> = (0..800)
            .map(|i| {
                let b = &ctx.input_bytes()[i * 16..i * 16 + 8];
                u64::from_le_bytes(b.try_into().unwrap())
            })
            .collect();
        ids.sort_unstable();
        let expect: Vec<u64> = (0..800).collect();
        assert_eq!(ids, expect);
    }
}
