//! Multi-rank launcher: runs R ranks as concurrent threads (in-process or
//! socket-loopback transports) or as spawned processes of the current
//! binary, wires the communicators and aggregates per-rank results.

use std::collections::BTreeMap;
use std::fmt;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::comm::{CommConfig, CommError, Communicator, InProcessGroup, Transport, DEFAULT_TIMEOUT};
use crate::forward::{ForwardError, ForwardingContext, RawEmitView};

/// Environment variables of the process-launch protocol. A child process
/// recognises itself through [`child_env`] and runs its rank's side of the
/// program the parent was asked to run.
pub const ENV_RANK: &str = "WF_RANK";
pub const ENV_WORLD: &str = "WF_WORLD";
pub const ENV_ENDPOINTS: &str = "WF_ENDPOINTS";
pub const ENV_TRANSPORT: &str = "WF_TRANSPORT";

#[derive(Debug)]
pub enum LaunchError {
    /// A rank's program returned an error or panicked; carries the rank.
    Rank { rank: usize, message: String },
    Comm(CommError),
    Io(std::io::Error),
    Config(String),
}

impl fmt::Display for LaunchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LaunchError::Rank { rank, message } => write!(f, "rank {rank} failed: {message}"),
            LaunchError::Comm(e) => write!(f, "{e}"),
            LaunchError::Io(e) => write!(f, "io error: {e}"),
            LaunchError::Config(m) => write!(f, "invalid launch config: {m}"),
        }
    }
}

impl std::error::Error for LaunchError {}

impl From<CommError> for LaunchError {
    fn from(e: CommError) -> Self {
        LaunchError::Comm(e)
    }
}

impl From<std::io::Error> for LaunchError {
    fn from(e: std::io::Error) -> Self {
        LaunchError::Io(e)
    }
}

/// What one rank reports back from a launch.
#[derive(Debug, Clone)]
pub struct RankReport<T> {
    pub rounds: u64,
    /// Items delivered into this rank's input queues, summed over rounds.
    pub items_received: u64,
    /// Emits dropped on this rank, summed over rounds.
    pub items_dropped: u64,
    /// Wall-clock per named phase, microseconds.
    pub phase_micros: BTreeMap<String, u64>,
    /// Program-specific payload.
    pub detail: T,
}

impl<T> RankReport<T> {
    /// Report carrying only a program-specific payload.
    pub fn with_detail(detail: T) -> Self {
        RankReport {
            rounds: 0,
            items_received: 0,
            items_dropped: 0,
            phase_micros: BTreeMap::new(),
            detail,
        }
    }
}

impl<T: Default> Default for RankReport<T> {
    fn default() -> Self {
        RankReport::with_detail(T::default())
    }
}

/// Aggregated outcome of a launch.
#[derive(Debug)]
pub struct RunReport<T> {
    pub per_rank: Vec<RankReport<T>>,
    /// Rounds executed (identical across ranks for round-based programs).
    pub rounds: u64,
    pub total_items_forwarded: u64,
    pub total_items_dropped: u64,
    pub wall_micros: u64,
}

/// Timer for the per-phase entries of a [`RankReport`].
pub struct PhaseTimer {
    phases: BTreeMap<String, u64>,
    current: Option<(String, Instant)>,
}

impl PhaseTimer {
    pub fn new() -> Self {
        PhaseTimer { phases: BTreeMap::new(), current: None }
    }

    pub fn start(&mut self, name: &str) {
        self.stop();
        self.current = Some((name.to_string(), Instant::now()));
    }

    pub fn stop(&mut self) {
        if let Some((name, t0)) = self.current.take() {
            *self.phases.entry(name).or_insert(0) += t0.elapsed().as_micros() as u64;
        }
    }

    pub fn finish(mut self) -> BTreeMap<String, u64> {
        self.stop();
        self.phases
    }
}

impl Default for PhaseTimer {
    fn default() -> Self {
        Self::new()
    }
}

/// How [`launch`] runs its ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchTransport {
    /// Ranks as threads over the shared-memory transport.
    InProcess,
    /// Ranks as threads over TCP loopback; exercises the socket wire path
    /// without spawning processes.
    SocketLoopback,
}

impl LaunchTransport {
    pub fn comm_transport(self) -> Transport {
        match self {
            LaunchTransport::InProcess => Transport::InProcess,
            LaunchTransport::SocketLoopback => Transport::Socket,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub num_ranks: usize,
    pub transport: LaunchTransport,
    pub timeout: Duration,
}

impl LaunchConfig {
    pub fn new(num_ranks: usize, transport: LaunchTransport) -> Self {
        LaunchConfig { num_ranks, transport, timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// Run `program` on `num_ranks` concurrent ranks and aggregate the reports.
///
/// Every rank gets its own communicator; user programs must not share
/// mutable state across ranks except through the communicator. The first
/// failing rank (error or panic) aborts the launch with that rank's error.
pub fn launch<T, F>(config: LaunchConfig, program: F) -> Result<RunReport<T>, LaunchError>
where
    T: Send,
    F: Fn(usize, &Communicator) -> Result<RankReport<T>, String> + Send + Sync,
{
    if config.num_ranks == 0 {
        return Err(LaunchError::Config("num_ranks must be >= 1".into()));
    }
    let t0 = Instant::now();
    let configs: Vec<CommConfig> = match config.transport {
        LaunchTransport::InProcess => {
            let group = InProcessGroup::new(config.num_ranks);
            (0..config.num_ranks)
                .map(|r| CommConfig::in_process(r, Arc::clone(&group)).with_timeout(config.timeout))
                .collect()
        }
        LaunchTransport::SocketLoopback => {
            let endpoints = loopback_endpoints(config.num_ranks)?;
            (0..config.num_ranks)
                .map(|r| CommConfig::socket(r, endpoints.clone()).with_timeout(config.timeout))
                .collect()
        }
    };

    let program = &program;
    let mut results: Vec<Option<Result<RankReport<T>, String>>> =
        (0..config.num_ranks).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (rank, comm_config) in configs.into_iter().enumerate() {
            handles.push(scope.spawn(move || {
                let run = || -> Result<RankReport<T>, String> {
                    let comm = Communicator::create(comm_config).map_err(|e| e.to_string())?;
                    program(rank, &comm)
                };
                match catch_unwind(AssertUnwindSafe(run)) {
                    Ok(res) => res,
                    Err(panic) => Err(panic_message(panic.as_ref())),
                }
            }));
        }
        for (rank, handle) in handles.into_iter().enumerate() {
            results[rank] = Some(handle.join().unwrap_or_else(|p| Err(panic_message(p.as_ref()))));
        }
    });

    let mut per_rank = Vec::with_capacity(config.num_ranks);
    for (rank, slot) in results.into_iter().enumerate() {
        match slot.expect("every rank joined") {
            Ok(report) => per_rank.push(report),
            Err(message) => return Err(LaunchError::Rank { rank, message }),
        }
    }

    let rounds = per_rank.first().map(|r| r.rounds).unwrap_or(0);
    Ok(RunReport {
        rounds,
        total_items_forwarded: per_rank.iter().map(|r| r.items_received).sum(),
        total_items_dropped: per_rank.iter().map(|r| r.items_dropped).sum(),
        wall_micros: t0.elapsed().as_micros() as u64,
        per_rank,
    })
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}

/// Reserve `n` distinct loopback endpoints by briefly binding port 0.
pub fn loopback_endpoints(n: usize) -> Result<Vec<String>, std::io::Error> {
    let mut listeners = Vec::with_capacity(n);
    let mut endpoints = Vec::with_capacity(n);
    for _ in 0..n {
        let l = TcpListener::bind("127.0.0.1:0")?;
        endpoints.push(format!("127.0.0.1:{}", l.local_addr()?.port()));
        listeners.push(l);
    }
    drop(listeners);
    Ok(endpoints)
}

/// Guard against livelocked round loops.
pub const DEFAULT_MAX_ROUNDS: u64 = 1_000_000;

#[derive(Debug)]
pub enum RunRoundsError {
    Forward(ForwardError),
    /// The loop hit the max-rounds guard while work was still circulating.
    MaxRounds { rounds: u64 },
    Step(String),
}

impl fmt::Display for RunRoundsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunRoundsError::Forward(e) => write!(f, "{e}"),
            RunRoundsError::MaxRounds { rounds } => {
                write!(f, "round loop exceeded the {rounds}-round guard")
            }
            RunRoundsError::Step(m) => write!(f, "step failed: {m}"),
        }
    }
}

impl std::error::Error for RunRoundsError {}

impl From<ForwardError> for RunRoundsError {
    fn from(e: ForwardError) -> Self {
        RunRoundsError::Forward(e)
    }
}

/// Run `step`/`forward` rounds until the global item count reaches zero.
///
/// `step` reads the current input queue through the emit view and emits the
/// next round's items. Returns the number of rounds executed, identical on
/// every rank: a rank with an empty input queue keeps looping while other
/// ranks still hold work.
pub fn run_rounds<F>(
    ctx: &mut ForwardingContext,
    max_rounds: u64,
    mut step: F,
) -> Result<u64, RunRoundsError>
where
    F: FnMut(&RawEmitView<'_>) -> Result<(), String>,
{
    let mut rounds = 0u64;
    loop {
        if rounds >= max_rounds {
            return Err(RunRoundsError::MaxRounds { rounds });
        }
        step(&ctx.raw_view()).map_err(RunRoundsError::Step)?;
        rounds += 1;
        let remaining = ctx.forward()?;
        if remaining == 0 {
            return Ok(rounds);
        }
    }
}

/// A child process' identity under the process-launch protocol, read from
/// the `WF_*` environment variables.
#[derive(Debug, Clone)]
pub struct ChildEnv {
    pub rank: usize,
    pub num_ranks: usize,
    pub endpoints: Vec<String>,
    pub transport: Transport,
}

impl ChildEnv {
    /// Build this child rank's communicator.
    pub fn connect(&self, timeout: Duration) -> Result<Communicator, CommError> {
        match self.transport {
            Transport::Socket => Communicator::create(
                CommConfig::socket(self.rank, self.endpoints.clone()).with_timeout(timeout),
            ),
            Transport::InProcess => {
                if self.num_ranks == 1 {
                    Communicator::create(CommConfig::single().with_timeout(timeout))
                } else {
                    Err(CommError::Config(
                        "spawned processes cannot share an in-process group".into(),
                    ))
                }
            }
        }
    }
}

/// Detect whether this process was spawned as a rank of a process launch.
pub fn child_env() -> Option<Result<ChildEnv, LaunchError>> {
    let rank = std::env::var(ENV_RANK).ok()?;
    let parse = || -> Result<ChildEnv, LaunchError> {
        let rank: usize = rank
            .parse()
            .map_err(|_| LaunchError::Config(format!("bad {ENV_RANK}")))?;
        let num_ranks: usize = std::env::var(ENV_WORLD)
            .map_err(|_| LaunchError::Config(format!("{ENV_WORLD} not set")))?
            .parse()
            .map_err(|_| LaunchError::Config(format!("bad {ENV_WORLD}")))?;
        let transport = match std::env::var(ENV_TRANSPORT).as_deref() {
            Ok("socket") => Transport::Socket,
            Ok("in_process") => Transport::InProcess,
            other => {
                return Err(LaunchError::Config(format!(
                    "bad {ENV_TRANSPORT}: {other:?}"
                )))
            }
        };
        let endpoints: Vec<String> = std::env::var(ENV_ENDPOINTS)
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        Ok(ChildEnv { rank, num_ranks, endpoints, transport })
    };
    Some(parse())
}

/// Spawn `num_ranks` copies of the current binary with the given arguments
/// and the `WF_*` env vars set, then wait for all of them.
///
/// Children re-enter `main`, detect themselves via [`child_env`] and run the
/// rank program. Returns an error naming the first rank that exited
/// non-zero.
pub fn spawn_process_ranks(num_ranks: usize, args: &[String]) -> Result<(), LaunchError> {
    let exe = std::env::current_exe()?;
    let endpoints = loopback_endpoints(num_ranks)?;
    let endpoint_list = endpoints.join(",");
    let mut children = Vec::with_capacity(num_ranks);
    for rank in 0..num_ranks {
        let child = Command::new(&exe)
            .args(args)
            .env(ENV_RANK, rank.to_string())
            .env(ENV_WORLD, num_ranks.to_string())
            .env(ENV_ENDPOINTS, &endpoint_list)
            .env(ENV_TRANSPORT, "socket")
            .spawn()?;
        children.push((rank, child));
    }
    let mut first_failure: Option<(usize, i32)> = None;
    for (rank, mut child) in children {
        let status = child.wait()?;
        if !status.success() && first_failure.is_none() {
            first_failure = Some((rank, status.code().unwrap_or(-1)));
        }
    }
    if let Some((rank, code)) = first_failure {
        return Err(LaunchError::Rank {
            rank,
            message: format!("child process exited with status {code}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{WorkItem, WorkItemSchema};

    #[test]
    fn single_rank_launch_returns_result() {
        let report = launch(
            LaunchConfig::new(1, LaunchTransport::InProcess),
            |rank, _comm| {
                Ok(RankReport { detail: rank, ..Default::default() })
            },
        )
        .unwrap();
        assert_eq!(report.per_rank.len(), 1);
        assert_eq!(report.per_rank[0].detail, 0);
    }

    #[test]
    fn failing_rank_is_named() {
        let err = launch(
            LaunchConfig::new(4, LaunchTransport::InProcess).with_timeout(Duration::from_secs(5)),
            |rank, comm| -> Result<RankReport<()>, String> {
                if rank == 2 {
                    return Err("boom".into());
                }
                // other ranks do no collectives, so they return cleanly
                let _ = comm;
                Ok(RankReport::default())
            },
        )
        .unwrap_err();
        match err {
            LaunchError::Rank { rank, message } => {
                assert_eq!(rank, 2);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn panicking_rank_is_named() {
        let err = launch(
            LaunchConfig::new(2, LaunchTransport::InProcess).with_timeout(Duration::from_secs(5)),
            |rank, _comm| -> Result<RankReport<()>, String> {
                if rank == 1 {
                    panic!("kaboom");
                }
                Ok(RankReport::default())
            },
        )
        .unwrap_err();
        match err {
            LaunchError::Rank { rank, message } => {
                assert_eq!(rank, 1);
                assert!(message.contains("kaboom"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn run_rounds_without_emits_is_one_round() {
        let comm = Communicator::create(crate::comm::CommConfig::single()).unwrap();
        let mut ctx = ForwardingContext::new(&comm, WorkItemSchema::new(8).unwrap());
        ctx.resize_queues(8);
        let rounds = run_rounds(&mut ctx, DEFAULT_MAX_ROUNDS, |_| Ok(())).unwrap();
        assert_eq!(rounds, 1);
    }

    #[test]
    fn run_rounds_guard_catches_livelock() {
        let comm = Communicator::create(crate::comm::CommConfig::single()).unwrap();
        let mut ctx = ForwardingContext::new(&comm, WorkItemSchema::new(8).unwrap());
        ctx.resize_queues(8);
        ctx.seed_input_bytes(&1u64.to_le_bytes()).unwrap();
        let err = run_rounds(&mut ctx, 10, |view| {
            // re-emit whatever arrives, forever
            for i in 0..view.num_incoming() {
                view.emit_bytes(view.incoming_bytes(i), 0);
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, RunRoundsError::MaxRounds { rounds: 10 }));
    }

    #[test]
    fn report_totals_aggregate_received_items() {
        // one emit/forward round on 4 ranks: the report's total equals the
        // number of emitted items
        let report = launch(
            LaunchConfig::new(4, LaunchTransport::InProcess).with_timeout(Duration::from_secs(10)),
            |rank, comm| {
                let mut ctx = ForwardingContext::new(comm, WorkItemSchema::new(8).unwrap());
                ctx.resize_queues(16);
                {
                    let view = ctx.raw_view();
                    for i in 0..3u64 {
                        view.emit_bytes(&i.to_le_bytes(), (rank + i as usize) % comm.num_ranks());
                    }
                }
                ctx.forward().map_err(|e| e.to_string())?;
                Ok(RankReport::<()> {
                    rounds: 1,
                    items_received: ctx.input_count() as u64,
                    items_dropped: 0,
                    ..Default::default()
                })
            },
        )
        .unwrap();
        assert_eq!(report.total_items_forwarded, 12);
        assert_eq!(report.rounds, 1);
    }

    #[test]
    fn ring_walk_takes_hop_count_rounds() {
        // one item per rank walks the ring once: rounds == num_ranks
        for num_ranks in [1usize, 2, 4] {
            let report = launch(
                LaunchConfig::new(num_ranks, LaunchTransport::InProcess)
                    .with_timeout(Duration::from_secs(10)),
                |rank, comm| {
                    let mut ctx = ForwardingContext::new(comm, WorkItemSchema::new(8).unwrap());
                    ctx.resize_queues(4);
                    let hops = comm.num_ranks() as u64;
                    ctx.seed_input_bytes(&hops.to_le_bytes()).map_err(|e| e.to_string())?;
                    let next = (rank + 1) % comm.num_ranks();
                    let rounds = run_rounds(&mut ctx, 100, |view| {
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
            .unwrap();
            assert_eq!(report.rounds, num_ranks as u64);
            for r in &report.per_rank {
                assert_eq!(r.rounds, num_ranks as u64);
            }
        }
    }
}
