//! Socket transport: a persistent full mesh of TCP connections established
//! at create time.
//!
//! Wire format, per message: an 8-byte little-endian payload length, then
//! the payload. The first payload byte is the collective opcode, so a rank
//! that falls out of step with its peers fails with a protocol error rather
//! than consuming a stale frame.
//!
//! Collectives walk peers in ascending rank order; within each pair the
//! lower rank sends first and the higher rank receives first, which keeps
//! the linear exchange deadlock-free for arbitrarily large frames.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{CommConfig, CommError};

const HELLO_MAGIC: u32 = 0x5746_4431; // "WFD1"
const MAX_FRAME: u64 = 1 << 40;
const CONNECT_RETRY: Duration = Duration::from_millis(10);

pub(super) struct Mesh {
    rank: usize,
    num_ranks: usize,
    /// `peers[r]` is the stream to rank `r`; `None` at our own slot.
    peers: Vec<Option<Mutex<TcpStream>>>,
}

impl Mesh {
    /// Establish the full mesh: listen on our endpoint, actively connect to
    /// every lower rank, accept from every higher rank.
    pub(super) fn connect(config: &CommConfig) -> Result<Self, CommError> {
        let rank = config.rank;
        let n = config.num_ranks;
        let deadline = Instant::now() + config.timeout;

        let listener = TcpListener::bind(resolve(&config.endpoints[rank])?)
            .map_err(|e| CommError::Connection(format!(
                "rank {rank} cannot listen on {}: {e}",
                config.endpoints[rank]
            )))?;
        listener.set_nonblocking(true)?;

        let mut peers: Vec<Option<Mutex<TcpStream>>> = (0..n).map(|_| None).collect();

        // Connect to lower ranks, retrying until their listener is up.
        for peer in 0..rank {
            let addr = resolve(&config.endpoints[peer])?;
            let stream = connect_retry(addr, deadline, rank, peer)?;
            send_hello(&stream, rank, n, config.timeout)?;
            peers[peer] = Some(Mutex::new(stream));
        }

        // Accept from higher ranks; hellos tell us who is who.
        let mut expected = n - rank - 1;
        while expected > 0 {
            if Instant::now() >= deadline {
                return Err(CommError::Connection(format!(
                    "rank {rank} timed out waiting for {expected} peer connection(s)"
                )));
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let peer = read_hello(&stream, n, config.timeout)?;
                    if peer <= rank || peer >= n {
                        return Err(CommError::Protocol(format!(
                            "unexpected hello from rank {peer} at rank {rank}"
                        )));
                    }
                    if peers[peer].is_some() {
                        return Err(CommError::Connection(format!(
                            "duplicate rank {peer} connected to rank {rank}"
                        )));
                    }
                    peers[peer] = Some(Mutex::new(stream));
                    expected -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(1));
                }
                Err(e) => return Err(CommError::Io(e)),
            }
        }

        for (r, slot) in peers.iter().enumerate() {
            if let Some(stream) = slot {
                let s = stream.lock().unwrap();
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(config.timeout))?;
                s.set_write_timeout(Some(config.timeout))?;
                debug_assert!(r != rank);
            }
        }

        Ok(Mesh { rank, num_ranks: n, peers })
    }

    pub(super) fn barrier(&self) -> Result<(), CommError> {
        self.exchange(super::opcode::BARRIER, |_| Vec::new(), |_, _| Ok(()))
    }

    pub(super) fn allreduce_sum(&self, local: u64) -> Result<u64, CommError> {
        let mut values = vec![0u64; self.num_ranks];
        values[self.rank] = local;
        self.exchange(
            super::opcode::ALLREDUCE,
            |_| local.to_le_bytes().to_vec(),
            |peer, data| {
                values[peer] = parse_u64(&data)?;
                Ok(())
            },
        )?;
        // fold in rank order: deterministic and identical across transports
        Ok(values.iter().sum())
    }

    pub(super) fn alltoall_counts(&self, send_counts: &[u64]) -> Result<Vec<u64>, CommError> {
        let mut out = vec![0u64; self.num_ranks];
        out[self.rank] = send_counts[self.rank];
        self.exchange(
            super::opcode::ALLTOALL_COUNTS,
            |peer| send_counts[peer].to_le_bytes().to_vec(),
            |peer, data| {
                out[peer] = parse_u64(&data)?;
                Ok(())
            },
        )?;
        Ok(out)
    }

    pub(super) fn alltoallv(
        &self,
        send_buf: &[u8],
        send_counts: &[u64],
        send_offsets: &[u64],
        recv_buf: &mut [u8],
        recv_counts: &[u64],
        recv_offsets: &[u64],
    ) -> Result<(), CommError> {
        let me = self.rank;
        if recv_counts[me] != send_counts[me] {
            return Err(CommError::Protocol(
                "recv_counts is not the transpose of send_counts (self entry)".into(),
            ));
        }
        let so = send_offsets[me] as usize;
        let ro = recv_offsets[me] as usize;
        let sc = send_counts[me] as usize;
        recv_buf[ro..ro + sc].copy_from_slice(&send_buf[so..so + sc]);

        self.exchange(
            super::opcode::ALLTOALLV,
            |peer| {
                let off = send_offsets[peer] as usize;
                let len = send_counts[peer] as usize;
                send_buf[off..off + len].to_vec()
            },
            |peer, data| {
                if data.len() as u64 != recv_counts[peer] {
                    return Err(CommError::Protocol(format!(
                        "rank {peer} sent {} bytes, recv_counts says {}",
                        data.len(),
                        recv_counts[peer]
                    )));
                }
                let off = recv_offsets[peer] as usize;
                recv_buf[off..off + data.len()].copy_from_slice(&data);
                Ok(())
            },
        )
    }

    /// Linear pairwise exchange over all peers in ascending rank order.
    fn exchange(
        &self,
        op: u8,
        mut outgoing: impl FnMut(usize) -> Vec<u8>,
        mut incoming: impl FnMut(usize, Vec<u8>) -> Result<(), CommError>,
    ) -> Result<(), CommError> {
        for peer in 0..self.num_ranks {
            if peer == self.rank {
                continue;
            }
            let stream = self.peers[peer].as_ref().expect("mesh is full");
            let mut stream = stream.lock().unwrap();
            if self.rank < peer {
                write_frame(&mut stream, op, &outgoing(peer))?;
                let data = read_frame(&mut stream, op)?;
                incoming(peer, data)?;
            } else {
                let data = read_frame(&mut stream, op)?;
                incoming(peer, data)?;
                write_frame(&mut stream, op, &outgoing(peer))?;
            }
        }
        Ok(())
    }
}

fn resolve(endpoint: &str) -> Result<SocketAddr, CommError> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| CommError::Connection(format!("cannot resolve {endpoint}: {e}")))?
        .next()
        .ok_or_else(|| CommError::Connection(format!("no address for {endpoint}")))
}

fn connect_retry(
    addr: SocketAddr,
    deadline: Instant,
    rank: usize,
    peer: usize,
) -> Result<TcpStream, CommError> {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return Err(CommError::Connection(format!(
                "rank {rank} could not connect to rank {peer} at {addr} before timeout"
            )));
        }
        let budget = (deadline - now).min(Duration::from_millis(250));
        match TcpStream::connect_timeout(&addr, budget) {
            Ok(stream) => return Ok(stream),
            Err(_) => std::thread::sleep(CONNECT_RETRY),
        }
    }
}

fn send_hello(mut stream: &TcpStream, rank: usize, num_ranks: usize, timeout: Duration) -> Result<(), CommError> {
    stream.set_write_timeout(Some(timeout))?;
    let mut hello = [0u8; 12];
    hello[0..4].copy_from_slice(&HELLO_MAGIC.to_le_bytes());
    hello[4..8].copy_from_slice(&(rank as u32).to_le_bytes());
    hello[8..12].copy_from_slice(&(num_ranks as u32).to_le_bytes());
    stream.write_all(&hello)?;
    Ok(())
}

fn read_hello(mut stream: &TcpStream, num_ranks: usize, timeout: Duration) -> Result<usize, CommError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut hello = [0u8; 12];
    stream.read_exact(&mut hello).map_err(map_timeout)?;
    let magic = u32::from_le_bytes(hello[0..4].try_into().unwrap());
    if magic != HELLO_MAGIC {
        return Err(CommError::Protocol("bad hello magic".into()));
    }
    let rank = u32::from_le_bytes(hello[4..8].try_into().unwrap()) as usize;
    let world = u32::from_le_bytes(hello[8..12].try_into().unwrap()) as usize;
    if world != num_ranks {
        return Err(CommError::Protocol(format!(
            "peer rank {rank} believes world size is {world}, expected {num_ranks}"
        )));
    }
    Ok(rank)
}

fn write_frame(stream: &mut TcpStream, op: u8, data: &[u8]) -> Result<(), CommError> {
    let len = (data.len() + 1) as u64;
    stream.write_all(&len.to_le_bytes()).map_err(map_timeout)?;
    stream.write_all(&[op]).map_err(map_timeout)?;
    stream.write_all(data).map_err(map_timeout)?;
    Ok(())
}

fn read_frame(stream: &mut TcpStream, expect_op: u8) -> Result<Vec<u8>, CommError> {
    let mut len_bytes = [0u8; 8];
    stream.read_exact(&mut len_bytes).map_err(map_timeout)?;
    let len = u64::from_le_bytes(len_bytes);
    if len == 0 || len > MAX_FRAME {
        return Err(CommError::Protocol(format!("bad frame length {len}")));
    }
    let mut op = [0u8; 1];
    stream.read_exact(&mut op).map_err(map_timeout)?;
    if op[0] != expect_op {
        return Err(CommError::Protocol(format!(
            "expected opcode {expect_op}, peer sent {}",
            op[0]
        )));
    }
    let mut data = vec![0u8; (len - 1) as usize];
    stream.read_exact(&mut data).map_err(map_timeout)?;
    Ok(data)
}

fn parse_u64(data: &[u8]) -> Result<u64, CommError> {
    let bytes: [u8; 8] = data
        .try_into()
        .map_err(|_| CommError::Protocol(format!("expected 8-byte payload, got {}", data.len())))?;
    Ok(u64::from_le_bytes(bytes))
}

fn map_timeout(e: std::io::Error) -> CommError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            CommError::Timeout(format!("socket wait exceeded timeout: {e}"))
        }
        _ => CommError::Io(e),
    }
}
