//! Minimal collective-communication layer over two interchangeable
//! transports: in-process (ranks as threads sharing one rendezvous group)
//! and socket (ranks as peers on a TCP full mesh).
//!
//! Exactly four collectives are provided: barrier, all-to-all of per-peer
//! counts, variable all-to-all of raw bytes, and a sum-reduce. Every rank of
//! a communicator must invoke the same collective in the same order;
//! mismatches surface as protocol errors and absent peers as timeouts.

mod in_process;
mod socket;

pub use in_process::InProcessGroup;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

/// Collective opcodes carried on the wire (and checked by the in-process
/// rendezvous) to detect call-order mismatches between ranks.
pub(crate) mod opcode {
    pub const BARRIER: u8 = 0;
    pub const ALLTOALL_COUNTS: u8 = 1;
    pub const ALLTOALLV: u8 = 2;
    pub const ALLREDUCE: u8 = 3;
}

/// Default collective timeout. Hangs become diagnosable errors.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(30_000);

/// Which transport a communicator runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    Socket,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::InProcess => write!(f, "in_process"),
            Transport::Socket => write!(f, "socket"),
        }
    }
}

/// Errors raised by communicator creation and collectives.
#[derive(Debug)]
pub enum CommError {
    /// Invalid configuration (rank range, endpoint count, ...).
    Config(String),
    /// A peer could not be reached while establishing the mesh.
    Connection(String),
    /// A collective did not complete within the configured timeout.
    Timeout(String),
    /// Ranks disagreed about which collective is running, or a frame was
    /// malformed.
    Protocol(String),
    /// Underlying socket failure.
    Io(std::io::Error),
}

impl fmt::Display for CommError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommError::Config(m) => write!(f, "invalid comm config: {m}"),
            CommError::Connection(m) => write!(f, "connection failure: {m}"),
            CommError::Timeout(m) => write!(f, "collective timed out: {m}"),
            CommError::Protocol(m) => write!(f, "protocol error: {m}"),
            CommError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CommError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CommError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CommError {
    fn from(e: std::io::Error) -> Self {
        CommError::Io(e)
    }
}

/// Configuration for [`Communicator::create`].
///
/// For the socket transport, `endpoints[r]` is the `host:port` on which rank
/// `r` listens; there must be exactly `num_ranks` entries. For the
/// in-process transport with more than one rank, `group` carries the shared
/// rendezvous state (threads in one process cannot discover each other from
/// a plain value config).
#[derive(Clone)]
pub struct CommConfig {
    pub transport: Transport,
    pub num_ranks: usize,
    pub rank: usize,
    pub endpoints: Vec<String>,
    pub timeout: Duration,
    pub group: Option<Arc<InProcessGroup>>,
}

impl CommConfig {
    /// In-process config for one rank of a shared group.
    pub fn in_process(rank: usize, group: Arc<InProcessGroup>) -> Self {
        CommConfig {
            transport: Transport::InProcess,
            num_ranks: group.num_ranks(),
            rank,
            endpoints: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
            group: Some(group),
        }
    }

    /// Degenerate single-rank in-process config.
    pub fn single() -> Self {
        CommConfig {
            transport: Transport::InProcess,
            num_ranks: 1,
            rank: 0,
            endpoints: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
            group: None,
        }
    }

    /// Socket config for one rank of a TCP mesh.
    pub fn socket(rank: usize, endpoints: Vec<String>) -> Self {
        CommConfig {
            transport: Transport::Socket,
            num_ranks: endpoints.len(),
            rank,
            endpoints,
            timeout: DEFAULT_TIMEOUT,
            group: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn validate(&self) -> Result<(), CommError> {
        if self.num_ranks == 0 {
            return Err(CommError::Config("num_ranks must be >= 1".into()));
        }
        if self.rank >= self.num_ranks {
            return Err(CommError::Config(format!(
                "rank {} out of range for {} ranks",
                self.rank, self.num_ranks
            )));
        }
        if self.timeout.is_zero() {
            return Err(CommError::Config("timeout must be positive".into()));
        }
        match self.transport {
            Transport::Socket => {
                if self.endpoints.len() != self.num_ranks {
                    return Err(CommError::Config(format!(
                        "socket transport needs exactly {} endpoints, got {}",
                        self.num_ranks,
                        self.endpoints.len()
                    )));
                }
            }
            Transport::InProcess => {
                if self.num_ranks > 1 {
                    match &self.group {
                        None => {
                            return Err(CommError::Config(
                                "multi-rank in-process transport needs a shared InProcessGroup"
                                    .into(),
                            ))
                        }
                        Some(g) if g.num_ranks() != self.num_ranks => {
                            return Err(CommError::Config(format!(
                                "group holds {} ranks, config says {}",
                                g.num_ranks(),
                                self.num_ranks
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

enum Backend {
    /// Degenerate world: all collectives are local.
    Single,
    InProcess(in_process::Endpoint),
    Socket(socket::Mesh),
}

/// One rank's handle onto a collective world.
///
/// Cheap to clone; all clones refer to the same rank and transport state.
/// Collectives must be issued from a single logical control flow per rank.
#[derive(Clone)]
pub struct Communicator {
    inner: Arc<Inner>,
}

struct Inner {
    rank: usize,
    num_ranks: usize,
    transport: Transport,
    backend: Backend,
}

impl fmt::Debug for Communicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.inner.rank)
            .field("num_ranks", &self.inner.num_ranks)
            .field("transport", &self.inner.transport)
            .finish()
    }
}

impl Communicator {
    /// Establish this rank's side of the world described by `config`.
    ///
    /// Creation acts as a barrier: no rank returns before every rank has
    /// attached (mesh established for sockets, group rendezvous in-process).
    pub fn create(config: CommConfig) -> Result<Self, CommError> {
        config.validate()?;
        let backend = match config.transport {
            Transport::InProcess if config.num_ranks == 1 => Backend::Single,
            Transport::InProcess => {
                let group = config.group.clone().expect("validated");
                Backend::InProcess(in_process::Endpoint::attach(
                    group,
                    config.rank,
                    config.timeout,
                )?)
            }
            Transport::Socket => Backend::Socket(socket::Mesh::connect(&config)?),
        };
        let comm = Communicator {
            inner: Arc::new(Inner {
                rank: config.rank,
                num_ranks: config.num_ranks,
                transport: config.transport,
                backend,
            }),
        };
        comm.barrier()?;
        Ok(comm)
    }

    pub fn rank(&self) -> usize {
        self.inner.rank
    }

    pub fn num_ranks(&self) -> usize {
        self.inner.num_ranks
    }

    pub fn transport(&self) -> Transport {
        self.inner.transport
    }

    /// Block until every rank of the world has entered the barrier.
    pub fn barrier(&self) -> Result<(), CommError> {
        match &self.inner.backend {
            Backend::Single => Ok(()),
            Backend::InProcess(ep) => ep.barrier(),
            Backend::Socket(mesh) => mesh.barrier(),
        }
    }

    /// Exchange one count per peer; returns the transpose row for this rank.
    ///
    /// `returned[r]` equals the value rank `r` submitted for this rank.
    pub fn alltoall_counts(&self, send_counts: &[u64]) -> Result<Vec<u64>, CommError> {
        if send_counts.len() != self.inner.num_ranks {
            return Err(CommError::Config(format!(
                "send_counts has {} entries for {} ranks",
                send_counts.len(),
                self.inner.num_ranks
            )));
        }
        match &self.inner.backend {
            Backend::Single => Ok(send_counts.to_vec()),
            Backend::InProcess(ep) => ep.alltoall_counts(send_counts),
            Backend::Socket(mesh) => mesh.alltoall_counts(send_counts),
        }
    }

    /// Variable all-to-all of raw bytes.
    ///
    /// For every peer `r`, the region `send_offsets[r] ..+ send_counts[r]` of
    /// `send_buf` is delivered into peer `r`'s `recv_buf` at its matching
    /// recv region. `recv_counts` must be the transpose of the send counts
    /// across ranks (use [`Self::alltoall_counts`]). Regions are validated
    /// locally before anything is sent; bytes outside the designated recv
    /// regions are left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn alltoallv_bytes(
        &self,
        send_buf: &[u8],
        send_counts: &[u64],
        send_offsets: &[u64],
        recv_buf: &mut [u8],
        recv_counts: &[u64],
        recv_offsets: &[u64],
    ) -> Result<(), CommError> {
        let n = self.inner.num_ranks;
        if [send_counts, send_offsets, recv_counts, recv_offsets]
            .iter()
            .any(|v| v.len() != n)
        {
            return Err(CommError::Config(
                "count/offset arrays must have one entry per rank".into(),
            ));
        }
        validate_regions(send_buf.len(), send_counts, send_offsets, "send")?;
        validate_regions(recv_buf.len(), recv_counts, recv_offsets, "recv")?;
        match &self.inner.backend {
            Backend::Single => {
                let (c, so, ro) = (send_counts[0] as usize, send_offsets[0] as usize, recv_offsets[0] as usize);
                if recv_counts[0] != send_counts[0] {
                    return Err(CommError::Protocol(
                        "recv_counts is not the transpose of send_counts".into(),
                    ));
                }
                recv_buf[ro..ro + c].copy_from_slice(&send_buf[so..so + c]);
                Ok(())
            }
            Backend::InProcess(ep) => {
                ep.alltoallv(send_buf, send_counts, send_offsets, recv_buf, recv_counts, recv_offsets)
            }
            Backend::Socket(mesh) => {
                mesh.alltoallv(send_buf, send_counts, send_offsets, recv_buf, recv_counts, recv_offsets)
            }
        }
    }

    /// Sum `local` over all ranks; every rank receives the total.
    pub fn allreduce_sum(&self, local: u64) -> Result<u64, CommError> {
        match &self.inner.backend {
            Backend::Single => Ok(local),
            Backend::InProcess(ep) => ep.allreduce_sum(local),
            Backend::Socket(mesh) => mesh.allreduce_sum(local),
        }
    }
}

/// Check that every per-peer region lies within the buffer and that regions
/// do not overlap.
fn validate_regions(
    buf_len: usize,
    counts: &[u64],
    offsets: &[u64],
    what: &str,
) -> Result<(), CommError> {
    let mut regions: Vec<(u64, u64)> = counts
        .iter()
        .zip(offsets)
        .filter(|(c, _)| **c > 0)
        .map(|(c, o)| (*o, *o + *c))
        .collect();
    regions.sort_unstable();
    let mut prev_end = 0u64;
    for (start, end) in regions {
        if end > buf_len as u64 {
            return Err(CommError::Config(format!(
                "{what} region [{start}, {end}) exceeds buffer of {buf_len} bytes"
            )));
        }
        if start < prev_end {
            return Err(CommError::Config(format!(
                "{what} regions overlap at offset {start}"
            )));
        }
        prev_end = end;
    }
    Ok(())
}
