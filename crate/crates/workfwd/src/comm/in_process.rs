//! In-process transport: ranks are threads of one process meeting at a
//! shared rendezvous. Each collective is one fill/drain round guarded by a
//! generation counter so back-to-back collectives cannot interfere.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{opcode, CommError};

/// What one rank contributes to the current round.
enum Deposit {
    None,
    Scalar(u64),
    Counts(Vec<u64>),
    /// Mail per destination rank, already copied out of the send buffer.
    Mail(Vec<Vec<u8>>),
}

impl Deposit {
    fn scalar(&self) -> u64 {
        match self {
            Deposit::Scalar(v) => *v,
            _ => unreachable!("opcode-checked round holds uniform deposits"),
        }
    }
    fn counts(&self) -> &[u64] {
        match self {
            Deposit::Counts(v) => v,
            _ => unreachable!("opcode-checked round holds uniform deposits"),
        }
    }
    fn mail(&self) -> &[Vec<u8>] {
        match self {
            Deposit::Mail(v) => v,
            _ => unreachable!("opcode-checked round holds uniform deposits"),
        }
    }
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum Phase {
    Filling,
    Draining,
}

struct RoundState {
    phase: Phase,
    generation: u64,
    op: Option<u8>,
    arrived: usize,
    departed: usize,
    slots: Vec<Deposit>,
    /// Sticky failure: once a rank times out or breaks protocol the group is
    /// unusable and every later call fails fast instead of hanging.
    poisoned: Option<String>,
}

/// Shared rendezvous state for all ranks of one in-process world.
pub struct InProcessGroup {
    num_ranks: usize,
    state: Mutex<RoundState>,
    cv: Condvar,
    attached: Mutex<Vec<bool>>,
}

impl InProcessGroup {
    pub fn new(num_ranks: usize) -> Arc<Self> {
        assert!(num_ranks >= 1);
        Arc::new(InProcessGroup {
            num_ranks,
            state: Mutex::new(RoundState {
                phase: Phase::Filling,
                generation: 0,
                op: None,
                arrived: 0,
                departed: 0,
                slots: (0..num_ranks).map(|_| Deposit::None).collect(),
                poisoned: None,
            }),
            cv: Condvar::new(),
            attached: Mutex::new(vec![false; num_ranks]),
        })
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }
}

/// One rank's attachment to a group.
pub(super) struct Endpoint {
    group: Arc<InProcessGroup>,
    rank: usize,
    timeout: Duration,
}

impl Endpoint {
    pub(super) fn attach(
        group: Arc<InProcessGroup>,
        rank: usize,
        timeout: Duration,
    ) -> Result<Self, CommError> {
        {
            let mut attached = group.attached.lock().unwrap();
            if attached[rank] {
                return Err(CommError::Config(format!(
                    "duplicate rank {rank} attached to in-process group"
                )));
            }
            attached[rank] = true;
        }
        Ok(Endpoint { group, rank, timeout })
    }

    pub(super) fn barrier(&self) -> Result<(), CommError> {
        self.round(opcode::BARRIER, Deposit::None, |_, _| ())?;
        Ok(())
    }

    pub(super) fn allreduce_sum(&self, local: u64) -> Result<u64, CommError> {
        self.round(opcode::ALLREDUCE, Deposit::Scalar(local), |_, slots| {
            // fold in rank order: deterministic
            slots.iter().map(|d| d.scalar()).sum::<u64>()
        })
    }

    pub(super) fn alltoall_counts(&self, send_counts: &[u64]) -> Result<Vec<u64>, CommError> {
        let me = self.rank;
        self.round(
            opcode::ALLTOALL_COUNTS,
            Deposit::Counts(send_counts.to_vec()),
            move |_, slots| slots.iter().map(|d| d.counts()[me]).collect::<Vec<u64>>(),
        )
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
        let mail: Vec<Vec<u8>> = (0..self.group.num_ranks)
            .map(|dst| {
                let off = send_offsets[dst] as usize;
                let len = send_counts[dst] as usize;
                send_buf[off..off + len].to_vec()
            })
            .collect();
        let me = self.rank;
        let inbound = self.round(opcode::ALLTOALLV, Deposit::Mail(mail), move |_, slots| {
            slots
                .iter()
                .map(|d| d.mail()[me].clone())
                .collect::<Vec<Vec<u8>>>()
        })?;
        for (src, bytes) in inbound.iter().enumerate() {
            if bytes.len() as u64 != recv_counts[src] {
                return Err(CommError::Protocol(format!(
                    "rank {src} sent {} bytes, recv_counts says {}",
                    bytes.len(),
                    recv_counts[src]
                )));
            }
            let off = recv_offsets[src] as usize;
            recv_buf[off..off + bytes.len()].copy_from_slice(bytes);
        }
        Ok(())
    }

    /// Run one collective round: deposit, wait for all ranks, compute this
    /// rank's result from everyone's deposits, and hand the round back once
    /// all ranks have drained.
    fn round<T>(
        &self,
        op: u8,
        deposit: Deposit,
        compute: impl FnOnce(usize, &[Deposit]) -> T,
    ) -> Result<T, CommError> {
        let deadline = Instant::now() + self.timeout;
        let group = &*self.group;
        let mut state = group.state.lock().unwrap();

        // Wait for the previous round to drain.
        while state.phase == Phase::Draining {
            check_poison(&state)?;
            let (s, timed_out) = self.wait(state, deadline)?;
            state = s;
            if timed_out {
                return Err(self.poison_timeout(state, op));
            }
        }
        check_poison(&state)?;

        if state.arrived == 0 {
            state.op = Some(op);
        } else if state.op != Some(op) {
            let msg = format!(
                "rank {} called opcode {} while round runs opcode {:?}",
                self.rank, op, state.op
            );
            state.poisoned = Some(msg.clone());
            group.cv.notify_all();
            return Err(CommError::Protocol(msg));
        }
        state.slots[self.rank] = deposit;
        state.arrived += 1;
        let gen = state.generation;

        if state.arrived == group.num_ranks {
            state.phase = Phase::Draining;
            group.cv.notify_all();
        } else {
            while !(state.phase == Phase::Draining && state.generation == gen) {
                check_poison(&state)?;
                let (s, timed_out) = self.wait(state, deadline)?;
                state = s;
                if timed_out {
                    return Err(self.poison_timeout(state, op));
                }
            }
        }
        check_poison(&state)?;

        let out = compute(self.rank, &state.slots);
        state.departed += 1;
        if state.departed == group.num_ranks {
            state.generation += 1;
            state.phase = Phase::Filling;
            state.arrived = 0;
            state.departed = 0;
            state.op = None;
            for slot in state.slots.iter_mut() {
                *slot = Deposit::None;
            }
            group.cv.notify_all();
        }
        Ok(out)
    }

    fn wait<'a>(
        &self,
        state: std::sync::MutexGuard<'a, RoundState>,
        deadline: Instant,
    ) -> Result<(std::sync::MutexGuard<'a, RoundState>, bool), CommError> {
        let now = Instant::now();
        if now >= deadline {
            return Ok((state, true));
        }
        let (state, res) = self
            .group
            .cv
            .wait_timeout(state, deadline - now)
            .map_err(|_| CommError::Protocol("rendezvous mutex poisoned".into()))?;
        Ok((state, res.timed_out() && Instant::now() >= deadline))
    }

    fn poison_timeout(
        &self,
        mut state: std::sync::MutexGuard<'_, RoundState>,
        op: u8,
    ) -> CommError {
        let msg = format!(
            "rank {} timed out after {:?} waiting for peers in opcode {}",
            self.rank, self.timeout, op
        );
        if state.poisoned.is_none() {
            state.poisoned = Some(msg.clone());
        }
        self.group.cv.notify_all();
        CommError::Timeout(msg)
    }
}

fn check_poison(state: &RoundState) -> Result<(), CommError> {
    if let Some(msg) = &state.poisoned {
        return Err(CommError::Protocol(format!("group poisoned: {msg}")));
    }
    Ok(())
}
