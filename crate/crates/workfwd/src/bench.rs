//! Forwarding throughput benchmark: fill the output queues with id-stamped
//! payloads, time barrier-bracketed `forward()` calls over a sweep of batch
//! sizes, verify conservation by per-peer id hashing, and emit CSV rows.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::Communicator;
use crate::forward::{ForwardingContext, WorkItemSchema};
use crate::harness::{launch, LaunchConfig, LaunchTransport};

/// Destination pattern for the emitted items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    UniformRandom,
    Ring,
    AllToOne,
    SelfOnly,
}

impl Pattern {
    pub fn parse(s: &str) -> Option<Pattern> {
        match s {
            "uniform_random" | "uniform-random" | "random" => Some(Pattern::UniformRandom),
            "ring" => Some(Pattern::Ring),
            "all_to_one" | "all-to-one" => Some(Pattern::AllToOne),
            "self" => Some(Pattern::SelfOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::UniformRandom => write!(f, "uniform_random"),
            Pattern::Ring => write!(f, "ring"),
            Pattern::AllToOne => write!(f, "all_to_one"),
            Pattern::SelfOnly => write!(f, "self"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Bytes per item; at least 8 (room for the embedded check id).
    pub payload_bytes: usize,
    /// Items emitted per rank per round, one sweep point per entry.
    pub items_per_rank: Vec<u64>,
    /// Timed rounds per sweep point (median is reported); one warm-up
    /// round runs first and is discarded.
    pub rounds: usize,
    pub num_ranks: usize,
    pub pattern: Pattern,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(num_ranks: usize, items_per_rank: Vec<u64>) -> Self {
        BenchConfig {
            payload_bytes: 44,
            items_per_rank,
            rounds: 5,
            num_ranks,
            pattern: Pattern::UniformRandom,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.payload_bytes < 8 {
            return Err(BenchError::Config(format!(
                "payload_bytes must be at least 8, got {}",
                self.payload_bytes
            )));
        }
        if self.items_per_rank.is_empty() {
            return Err(BenchError::Config("empty sweep".into()));
        }
        if self.rounds == 0 {
            return Err(BenchError::Config("rounds must be positive".into()));
        }
        if self.num_ranks == 0 {
            return Err(BenchError::Config("num_ranks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum BenchError {
    Config(String),
    /// Delivered ids did not match the emitted ids.
    Conservation(String),
    Run(String),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Config(m) => write!(f, "bench config error: {m}"),
            BenchError::Conservation(m) => write!(f, "conservation failure: {m}"),
            BenchError::Run(m) => write!(f, "bench failed: {m}"),
        }
    }
}

impl std::error::Error for BenchError {}

/// One CSV row of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub items: u64,
    pub payload_bytes: usize,
    pub transport: String,
    pub ranks: usize,
    pub pattern: Pattern,
    pub sec_per_forward: f64,
    pub items_per_sec: f64,
    pub bytes_per_sec: f64,
}

pub const CSV_HEADER: &str =
    "items,payload_bytes,transport,ranks,pattern,sec_per_forward,items_per_sec,bytes_per_sec";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.9e},{:.6e},{:.6e}",
            self.items,
            self.payload_bytes,
            self.transport,
            self.ranks,
            self.pattern,
            self.sec_per_forward,
            self.items_per_sec,
            self.bytes_per_sec
        )
    }
}

/// Render the header plus one line per row.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv());
        out.push('\n');
    }
    out
}

/// Soft monotone-trend check: returns a warning when throughput decreases
/// from the smallest to the largest sweep point.
pub fn trend_warning(rows: &[BenchRow]) -> Option<String> {
    let first = rows.first()?;
    let last = rows.last()?;
    (last.bytes_per_sec < first.bytes_per_sec).then(|| {
        format!(
            "bytes/s decreased over the sweep: {:.3e} at {} items vs {:.3e} at {} items",
            first.bytes_per_sec, first.items, last.bytes_per_sec, last.items
        )
    })
}

fn destination(pattern: Pattern, rng: &mut ChaCha8Rng, rank: usize, num_ranks: usize) -> usize {
    match pattern {
        Pattern::UniformRandom => rng.gen_range(0..num_ranks),
        Pattern::Ring => (rank + 1) % num_ranks,
        Pattern::AllToOne => 0,
        Pattern::SelfOnly => rank,
    }
}

/// Capacity covering the worst receive total of a pattern.
fn capacity_for(pattern: Pattern, items: u64, num_ranks: usize) -> usize {
    let items = items as usize;
    match pattern {
        Pattern::AllToOne => items * num_ranks,
        // uniform receive totals concentrate near `items`; double it
        Pattern::UniformRandom => 2 * items + 1024,
        Pattern::Ring | Pattern::SelfOnly => items + 16,
    }
}

/// Run the sweep collectively; rows are returned on rank 0 (empty
/// elsewhere). Timing excludes queue filling: payload generation happens
/// before the timed barrier.
pub fn bench_rank(comm: &Communicator, cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    if comm.num_ranks() != cfg.num_ranks {
        return Err(BenchError::Config(format!(
            "config says {} ranks, communicator has {}",
            cfg.num_ranks,
            comm.num_ranks()
        )));
    }
    let rank = comm.rank();
    let num_ranks = comm.num_ranks();
    let schema =
        WorkItemSchema::new(cfg.payload_bytes).map_err(|e| BenchError::Run(e.to_string()))?;
    let mut ctx = ForwardingContext::new(comm, schema);
    let mut rows = Vec::new();

    for (point, &items) in cfg.items_per_rank.iter().enumerate() {
        ctx.resize_queues(capacity_for(cfg.pattern, items, num_ranks));
        let mut timed: Vec<f64> = Vec::with_capacity(cfg.rounds);
        let mut delivered_global = 0u64;

        for round in 0..cfg.rounds + 1 {
            // fill phase (untimed): id-stamped payloads, per-round dests
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ ((rank as u64) << 40) ^ ((point as u64) << 20) ^ round as u64,
            );
            let mut sent_sum = vec![0u64; num_ranks];
            let mut sent_xor = vec![0u64; num_ranks];
            {
                let view = ctx.raw_view();
                let mut payload = vec![0u8; cfg.payload_bytes];
                for i in 0..items {
                    let id = ((rank as u64) << 40) | ((round as u64) << 32) | i;
                    payload[..8].copy_from_slice(&id.to_le_bytes());
                    for (k, b) in payload[8..].iter_mut().enumerate() {
                        *b = (id as u8).wrapping_add(k as u8);
                    }
                    let dest = destination(cfg.pattern, &mut rng, rank, num_ranks);
                    if !view.emit_bytes(&payload, dest) {
                        return Err(BenchError::Run(format!(
                            "emit dropped at {items} items (capacity too small)"
                        )));
                    }
                    sent_sum[dest] = sent_sum[dest].wrapping_add(id);
                    sent_xor[dest] ^= id;
                }
            }

            comm.barrier().map_err(|e| BenchError::Run(e.to_string()))?;
            let t0 = Instant::now();
            let remaining = ctx.forward().map_err(|e| BenchError::Run(e.to_string()))?;
            comm.barrier().map_err(|e| BenchError::Run(e.to_string()))?;
            let elapsed = t0.elapsed().as_secs_f64();

            verify_round(comm, &ctx, &sent_sum, &sent_xor)?;
            if round > 0 {
                timed.push(elapsed);
                delivered_global = remaining;
            }
        }

        // drain the queue so the next point starts clean
        ctx.forward().map_err(|e| BenchError::Run(e.to_string()))?;

        if rank == 0 {
            timed.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let sec = timed[timed.len() / 2];
            let items_per_sec = delivered_global as f64 / sec;
            rows.push(BenchRow {
                items,
                payload_bytes: cfg.payload_bytes,
                transport: comm.transport().to_string(),
                ranks: num_ranks,
                pattern: cfg.pattern,
                sec_per_forward: sec,
                items_per_sec,
                bytes_per_sec: items_per_sec * cfg.payload_bytes as f64,
            });
        }
    }
    Ok(rows)
}

/// Cross-check the delivered ids against the emitted ids, pairwise between
/// all ranks: wrapping sum and xor of the ids each peer claims to have
/// sent must match what actually arrived from it.
fn verify_round(
    comm: &Communicator,
    ctx: &ForwardingContext,
    sent_sum: &[u64],
    sent_xor: &[u64],
) -> Result<(), BenchError> {
    let comm_err = |e: crate::comm::CommError| BenchError::Run(e.to_string());
    // counts sent per destination this round
    let sent_counts = ctx.last_round().sent_to.clone();
    let recv_counts = comm.alltoall_counts(&sent_counts).map_err(comm_err)?;
    let expect_sum = comm.alltoall_counts(sent_sum).map_err(comm_err)?;
    let expect_xor = comm.alltoall_counts(sent_xor).map_err(comm_err)?;

    let total: u64 = recv_counts.iter().sum();
    if total != ctx.input_count() as u64 {
        return Err(BenchError::Conservation(format!(
            "rank {} holds {} items, transposed counts say {total}",
            comm.rank(),
            ctx.input_count()
        )));
    }
    // delivered items are grouped by source rank, in rank order
    let bytes = ctx.input_bytes();
    let isz = ctx.schema().item_size_bytes();
    let mut at = 0usize;
    for src in 0..comm.num_ranks() {
        let mut sum = 0u64;
        let mut xor = 0u64;
        for _ in 0..recv_counts[src] {
            let id = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            sum = sum.wrapping_add(id);
            xor ^= id;
            at += isz;
        }
        if sum != expect_sum[src] || xor != expect_xor[src] {
            return Err(BenchError::Conservation(format!(
                "ids from rank {src} arrived damaged at rank {}",
                comm.rank()
            )));
        }
    }
    Ok(())
}

/// Run the whole benchmark on `num_ranks` concurrent in-process (or
/// loopback-socket) ranks and return rank 0's rows.
pub fn bench_threads(
    cfg: &BenchConfig,
    transport: LaunchTransport,
) -> Result<Vec<BenchRow>, BenchError> {
    let report = launch(
        LaunchConfig::new(cfg.num_ranks, transport).with_timeout(Duration::from_secs(300)),
        |_rank, comm| {
            bench_rank(comm, cfg)
                .map(crate::harness::RankReport::with_detail)
                .map_err(|e| e.to_string())
        },
    )
    .map_err(|e| BenchError::Run(e.to_string()))?;
    let mut per_rank = report.per_rank;
    Ok(per_rank.remove(0).detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_must_fit_the_check_id() {
        let mut cfg = BenchConfig::new(1, vec![10]);
        cfg.payload_bytes = 7;
        assert!(matches!(cfg.validate(), Err(BenchError::Config(_))));
    }

    #[test]
    fn single_rank_self_pattern_row() {
        let mut cfg = BenchConfig::new(1, vec![1000]);
        cfg.pattern = Pattern::SelfOnly;
        cfg.rounds = 3;
        let rows = bench_threads(&cfg, LaunchTransport::InProcess).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.items, 1000);
        assert_eq!(row.payload_bytes, 44);
        assert!(row.items_per_sec > 0.0);
        assert!((row.bytes_per_sec - row.items_per_sec * 44.0).abs() < 1e-6);
    }

    #[test]
    fn csv_schema_is_stable() {
        assert_eq!(
            CSV_HEADER,
            "items,payload_bytes,transport,ranks,pattern,sec_per_forward,items_per_sec,bytes_per_sec"
        );
        let row = BenchRow {
            items: 10,
            payload_bytes: 44,
            transport: "in_process".into(),
            ranks: 2,
            pattern: Pattern::Ring,
            sec_per_forward: 0.5,
            items_per_sec: 40.0,
            bytes_per_sec: 1760.0,
        };
        let line = row.csv();
        assert!(line.starts_with("10,44,in_process,2,ring,"));
        assert_eq!(line.split(',').count(), 8);
    }

    #[test]
    fn patterns_parse_and_print() {
        for (s, p) in [
            ("uniform_random", Pattern::UniformRandom),
            ("ring", Pattern::Ring),
            ("all_to_one", Pattern::AllToOne),
            ("self", Pattern::SelfOnly),
        ] {
            assert_eq!(Pattern::parse(s), Some(p));
            assert_eq!(p.to_string(), s);
        }
        assert_eq!(Pattern::parse("bogus"), None);
    }

    #[test]
    fn four_rank_sweep_produces_ordered_rows() {
        let mut cfg = BenchConfig::new(4, vec![100, 1000]);
        cfg.rounds = 2;
        let rows = bench_threads(&cfg, LaunchTransport::InProcess).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].items, 100);
        assert_eq!(rows[1].items, 1000);
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
