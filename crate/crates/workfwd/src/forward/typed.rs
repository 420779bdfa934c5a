//! Typed convenience layer over the byte-level forwarding context.

use std::marker::PhantomData;

use crate::comm::Communicator;

use super::{ForwardError, ForwardingContext, RawEmitView, RoundStats, WorkItem, WorkItemSchema};

/// A forwarding context whose items are values of `T`.
pub struct TypedContext<T: WorkItem> {
    raw: ForwardingContext,
    _marker: PhantomData<T>,
}

impl<T: WorkItem> TypedContext<T> {
    pub fn new(comm: &Communicator) -> Result<Self, ForwardError> {
        let schema = WorkItemSchema::new(T::ITEM_SIZE)?;
        Ok(TypedContext { raw: ForwardingContext::new(comm, schema), _marker: PhantomData })
    }

    pub fn resize_queues(&mut self, capacity: usize) {
        self.raw.resize_queues(capacity);
    }

    /// Place items directly into the local input queue.
    pub fn seed(&mut self, items: &[T]) -> Result<(), ForwardError> {
        let mut bytes = vec![0u8; items.len() * T::ITEM_SIZE];
        for (i, item) in items.iter().enumerate() {
            item.store(&mut bytes[i * T::ITEM_SIZE..(i + 1) * T::ITEM_SIZE]);
        }
        self.raw.seed_input_bytes(&bytes)
    }

    pub fn view(&self) -> EmitView<'_, T> {
        EmitView { raw: self.raw.raw_view(), _marker: PhantomData }
    }

    /// See [`ForwardingContext::forward`].
    pub fn forward(&mut self) -> Result<u64, ForwardError> {
        self.raw.forward()
    }

    /// Decode the whole input queue.
    pub fn incoming_items(&self) -> Vec<T> {
        let view = self.raw.raw_view();
        (0..view.num_incoming()).map(|i| T::load(view.incoming_bytes(i))).collect()
    }

    pub fn input_count(&self) -> usize {
        self.raw.input_count()
    }

    pub fn capacity(&self) -> usize {
        self.raw.capacity()
    }

    pub fn emit_attempts(&self) -> u64 {
        self.raw.emit_attempts()
    }

    pub fn dropped(&self) -> u64 {
        self.raw.dropped()
    }

    pub fn invalid_dest(&self) -> u64 {
        self.raw.invalid_dest()
    }

    pub fn last_round(&self) -> &RoundStats {
        self.raw.last_round()
    }

    pub fn comm(&self) -> &Communicator {
        self.raw.comm()
    }

    pub fn raw(&self) -> &ForwardingContext {
        &self.raw
    }
}

/// Typed emit view; copies share the underlying counters.
pub struct EmitView<'a, T: WorkItem> {
    raw: RawEmitView<'a>,
    _marker: PhantomData<T>,
}

impl<T: WorkItem> Clone for EmitView<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: WorkItem> Copy for EmitView<'_, T> {}

impl<'a, T: WorkItem> EmitView<'a, T> {
    /// Number of valid items in the input queue.
    pub fn num_incoming(&self) -> usize {
        self.raw.num_incoming()
    }

    /// Read the incoming item at `idx`; panics when out of bounds.
    pub fn get_incoming(&self, idx: usize) -> T {
        T::load(self.raw.incoming_bytes(idx))
    }

    /// Fallible variant of [`Self::get_incoming`].
    pub fn try_get_incoming(&self, idx: usize) -> Option<T> {
        (idx < self.num_incoming()).then(|| self.get_incoming(idx))
    }

    /// Atomically append `item` to the output queue for rank `dest`.
    /// Returns `false` when the item was dropped (queue full) or rejected
    /// (invalid destination).
    pub fn emit_outgoing(&self, item: &T, dest: usize) -> bool {
        // stack scratch keeps the emit path allocation-free
        const SCRATCH: usize = 256;
        assert!(T::ITEM_SIZE <= SCRATCH, "typed items are limited to 256 bytes");
        let mut bytes = [0u8; SCRATCH];
        item.store(&mut bytes[..T::ITEM_SIZE]);
        self.raw.emit_bytes(&bytes[..T::ITEM_SIZE], dest)
    }

    pub fn num_ranks(&self) -> usize {
        self.raw.num_ranks()
    }

    /// Iterate over the input queue.
    pub fn incoming(&self) -> impl Iterator<Item = T> + 'a {
        let raw = self.raw;
        (0..raw.num_incoming()).map(move |i| T::load(raw.incoming_bytes(i)))
    }
}
