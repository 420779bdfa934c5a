//! Distributed Barnes-Hut N-body: Morton-order domain decomposition, three
//! forwarding contexts (particles, virtual particles, refinement requests),
//! essential-tree exchange and leapfrog integration.

pub mod exchange;
pub mod forces;
pub mod morton;
pub mod tree;

pub use exchange::{conservative_accept, essential_tree_exchange, ExchangeError};
pub use forces::{
    compute_forces, leapfrog_finish_kick, leapfrog_kick_drift, leapfrog_step, mac_accept,
    tree_force, ForceParams, ForceStats,
};
pub use morton::{morton_key, Bounds3, MortonPartition};
pub use tree::{Atom, BhNode, BhTree, NodeKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::Communicator;
use crate::forward::wire;
use crate::forward::{ForwardError, TypedContext, WorkItem};

/// A simulated body. The force field is a cache: it is recomputed from
/// scratch after every migration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub force: [f64; 3],
    pub mass: f64,
}

impl WorkItem for Particle {
    const ITEM_SIZE: usize = 80;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_vec3(dst, &mut at, self.pos);
        wire::put_vec3(dst, &mut at, self.vel);
        wire::put_vec3(dst, &mut at, self.force);
        wire::put_f64(dst, &mut at, self.mass);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        Particle {
            pos: wire::get_vec3(src, &mut at),
            vel: wire::get_vec3(src, &mut at),
            force: wire::get_vec3(src, &mut at),
            mass: wire::get_f64(src, &mut at),
        }
    }
}

/// A remote tree node travelling during the essential-tree exchange:
/// center of mass, total mass, node size for the opening criterion
/// (0 marks an exact point mass) and the rank that owns the subtree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualParticle {
    pub pos: [f64; 3],
    pub mass: f64,
    pub smax: f64,
    pub source_rank: u32,
}

impl WorkItem for VirtualParticle {
    const ITEM_SIZE: usize = 44;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_vec3(dst, &mut at, self.pos);
        wire::put_f64(dst, &mut at, self.mass);
        wire::put_f64(dst, &mut at, self.smax);
        wire::put_u32(dst, &mut at, self.source_rank);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        VirtualParticle {
            pos: wire::get_vec3(src, &mut at),
            mass: wire::get_f64(src, &mut at),
            smax: wire::get_f64(src, &mut at),
            source_rank: wire::get_u32(src, &mut at),
        }
    }
}

/// Ask the source of a virtual particle to send finer data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefinementReq {
    pub sender_rank: u32,
}

impl WorkItem for RefinementReq {
    const ITEM_SIZE: usize = 4;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_u32(dst, &mut at, self.sender_rank);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        RefinementReq { sender_rank: wire::get_u32(src, &mut at) }
    }
}

/// Per-rank diagnostics gathered to rank 0 after every step.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DiagRecord {
    src: u32,
    count: u32,
    mass: f64,
    momentum: [f64; 3],
}

impl WorkItem for DiagRecord {
    const ITEM_SIZE: usize = 40;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_u32(dst, &mut at, self.src);
        wire::put_u32(dst, &mut at, self.count);
        wire::put_f64(dst, &mut at, self.mass);
        wire::put_vec3(dst, &mut at, self.momentum);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        DiagRecord {
            src: wire::get_u32(src, &mut at),
            count: wire::get_u32(src, &mut at),
            mass: wire::get_f64(src, &mut at),
            momentum: wire::get_vec3(src, &mut at),
        }
    }
}

/// One particle's position and mass, for rank-0 snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotRow {
    pub pos: [f64; 3],
    pub mass: f64,
}

impl WorkItem for SnapshotRow {
    const ITEM_SIZE: usize = 32;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_vec3(dst, &mut at, self.pos);
        wire::put_f64(dst, &mut at, self.mass);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        SnapshotRow { pos: wire::get_vec3(src, &mut at), mass: wire::get_f64(src, &mut at) }
    }
}

/// Position/force pair for cross-run force comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceRow {
    pub pos: [f64; 3],
    pub force: [f64; 3],
}

impl WorkItem for ForceRow {
    const ITEM_SIZE: usize = 48;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_vec3(dst, &mut at, self.pos);
        wire::put_vec3(dst, &mut at, self.force);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        ForceRow { pos: wire::get_vec3(src, &mut at), force: wire::get_vec3(src, &mut at) }
    }
}

/// One per-step message-matrix entry: particles rank `src` sent to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommTraceRow {
    pub step: u32,
    pub src: u32,
    pub dst: u32,
    pub items: u64,
}

impl WorkItem for CommTraceRow {
    const ITEM_SIZE: usize = 20;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_u32(dst, &mut at, self.step);
        wire::put_u32(dst, &mut at, self.src);
        wire::put_u32(dst, &mut at, self.dst);
        dst[at..at + 8].copy_from_slice(&self.items.to_le_bytes());
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        let step = wire::get_u32(src, &mut at);
        let s = wire::get_u32(src, &mut at);
        let d = wire::get_u32(src, &mut at);
        let items = u64::from_le_bytes(src[at..at + 8].try_into().unwrap());
        CommTraceRow { step, src: s, dst: d, items }
    }
}

#[derive(Debug, Clone)]
pub struct NBodyConfig {
    pub n: usize,
    pub steps: u32,
    pub theta: f64,
    pub dt: f64,
    pub softening: f64,
    pub quadrupole: bool,
    pub seed: u64,
    pub bounds: Bounds3,
    /// Gather a rank-0 snapshot every K steps (and at step 0).
    pub snapshot_every: Option<u32>,
    /// Record the per-step migration message matrix on rank 0.
    pub comm_trace: bool,
}

impl NBodyConfig {
    pub fn new(n: usize) -> Self {
        NBodyConfig {
            n,
            steps: 10,
            theta: 0.5,
            dt: 1e-3,
            softening: 1e-2,
            quadrupole: false,
            seed: 0,
            bounds: Bounds3::cube(1.0),
            snapshot_every: None,
            comm_trace: false,
        }
    }

    pub fn force_params(&self) -> ForceParams {
        ForceParams {
            theta: self.theta,
            softening: self.softening,
            gravity: 1.0,
            quadrupole: self.quadrupole,
        }
    }

    /// Output queue budget for particle migration: twice the balanced
    /// per-rank share.
    pub fn particle_capacity(&self, num_ranks: usize) -> usize {
        (2 * self.n.div_ceil(num_ranks)).max(64)
    }

    /// Budget for the exchange contexts: four times a generous estimate of
    /// the essential-tree size.
    pub fn exchange_capacity(&self, num_ranks: usize) -> usize {
        (4 * (self.n / 2 + 64 * num_ranks)).max(1024)
    }
}

/// The full deterministic initial condition; every rank generates all `n`
/// bodies identically and keeps its owned subset.
pub fn init_particles(cfg: &NBodyConfig) -> Vec<Particle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.bounds.extent();
    let scale = e[0].min(e[1]).min(e[2]);
    (0..cfg.n)
        .map(|_| {
            let mut pos = [0f64; 3];
            for a in 0..3 {
                pos[a] = cfg.bounds.lo[a] + e[a] * rng.gen_range(0.1..0.9);
            }
            let mut vel = [0f64; 3];
            for v in vel.iter_mut() {
                *v = scale * 0.05 * rng.gen_range(-1.0..1.0);
            }
            Particle { pos, vel, force: [0.0; 3], mass: rng.gen_range(0.5..1.5) }
        })
        .collect()
}

/// Send every particle to the owner of its current position and receive
/// this rank's new population. Self-sends are the common case.
pub fn migrate(
    pctx: &mut TypedContext<Particle>,
    partition: &MortonPartition,
    particles: Vec<Particle>,
) -> Result<Vec<Particle>, ForwardError> {
    {
        let view = pctx.view();
        for p in &particles {
            let owner = partition.owner_of_particle(p.pos);
            if !view.emit_outgoing(p, owner) {
                return Err(ForwardError::Config(format!(
                    "particle queue overflow: {} bodies exceed capacity {}",
                    particles.len(),
                    pctx.capacity()
                )));
            }
        }
    }
    pctx.forward()?;
    Ok(pctx.incoming_items())
}

/// Forward `items` to rank 0 and return them there (empty elsewhere).
fn gather_to_root<T: WorkItem>(
    ctx: &mut TypedContext<T>,
    items: &[T],
) -> Result<Vec<T>, ForwardError> {
    {
        let view = ctx.view();
        for item in items {
            if !view.emit_outgoing(item, 0) {
                return Err(ForwardError::Config("gather queue overflow".into()));
            }
        }
    }
    ctx.forward()?;
    Ok(if ctx.comm().rank() == 0 { ctx.incoming_items() } else { Vec::new() })
}

/// Global invariants after one step, assembled on rank 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiag {
    pub step: u32,
    pub count: u64,
    pub total_mass: f64,
    pub momentum: [f64; 3],
}

/// Rank-0 data collected over a run (empty on other ranks).
#[derive(Debug, Default)]
pub struct NBodySummary {
    pub diags: Vec<StepDiag>,
    pub snapshots: Vec<(u32, Vec<SnapshotRow>)>,
    pub comm_rows: Vec<CommTraceRow>,
    /// Pinned-import fallback evaluations summed over steps (global).
    pub pinned_fallbacks: u64,
    /// Bodies on this rank after the last step.
    pub local_final: usize,
}

/// Run this rank's share of a leapfrog simulation.
///
/// Per step: half-kick, drift, migrate, rebuild the local tree, exchange
/// essential remote data, recompute forces, half-kick. Step 0's diagnostics
/// describe the initial condition.
pub fn run_nbody_rank(comm: &Communicator, cfg: &NBodyConfig) -> Result<NBodySummary, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let num_ranks = comm.num_ranks();
    let rank = comm.rank();
    let partition = MortonPartition::equal_ranges(num_ranks, cfg.bounds);
    let mut particles: Vec<Particle> = init_particles(cfg)
        .into_iter()
        .filter(|p| partition.owner_of_particle(p.pos) == rank)
        .collect();

    let mut pctx = TypedContext::<Particle>::new(comm).map_err(|e| err(&e))?;
    pctx.resize_queues(cfg.particle_capacity(num_ranks));
    let mut vctx = TypedContext::<VirtualParticle>::new(comm).map_err(|e| err(&e))?;
    vctx.resize_queues(cfg.exchange_capacity(num_ranks));
    let mut rctx = TypedContext::<RefinementReq>::new(comm).map_err(|e| err(&e))?;
    rctx.resize_queues(cfg.exchange_capacity(num_ranks));
    let mut dctx = TypedContext::<DiagRecord>::new(comm).map_err(|e| err(&e))?;
    dctx.resize_queues(num_ranks.max(2) * 2);
    let mut sctx = if cfg.snapshot_every.is_some() {
        let mut c = TypedContext::<SnapshotRow>::new(comm).map_err(|e| err(&e))?;
        c.resize_queues(cfg.n.max(1));
        Some(c)
    } else {
        None
    };
    let mut tctx = if cfg.comm_trace {
        let mut c = TypedContext::<CommTraceRow>::new(comm).map_err(|e| err(&e))?;
        c.resize_queues(num_ranks * num_ranks + num_ranks);
        Some(c)
    } else {
        None
    };

    let params = cfg.force_params();
    let mut summary = NBodySummary::default();

    let refresh_forces = |particles: &mut Vec<Particle>,
                          vctx: &mut TypedContext<VirtualParticle>,
                          rctx: &mut TypedContext<RefinementReq>,
                          summary: &mut NBodySummary|
     -> Result<(), String> {
        let points: Vec<([f64; 3], f64)> = particles.iter().map(|p| (p.pos, p.mass)).collect();
        let local_tree = BhTree::build_points(cfg.bounds, &points);
        let imports = essential_tree_exchange(&local_tree, vctx, rctx, &partition, cfg.theta)
            .map_err(|e| err(&e))?;
        let stats = compute_forces(particles, &imports, cfg.bounds, &params);
        summary.pinned_fallbacks += stats.pinned_fallbacks;
        Ok(())
    };

    let record_diag = |step: u32,
                       particles: &[Particle],
                       dctx: &mut TypedContext<DiagRecord>,
                       summary: &mut NBodySummary|
     -> Result<(), String> {
        let mut mass = 0f64;
        let mut momentum = [0f64; 3];
        for p in particles {
            mass += p.mass;
            for a in 0..3 {
                momentum[a] += p.mass * p.vel[a];
            }
        }
        let rec = DiagRecord { src: rank as u32, count: particles.len() as u32, mass, momentum };
        let mut rows = gather_to_root(dctx, &[rec]).map_err(|e| err(&e))?;
        if rank == 0 {
            rows.sort_by_key(|r| r.src);
            let mut diag = StepDiag { step, count: 0, total_mass: 0.0, momentum: [0.0; 3] };
            for r in rows {
                diag.count += r.count as u64;
                diag.total_mass += r.mass;
                for a in 0..3 {
                    diag.momentum[a] += r.momentum[a];
                }
            }
            summary.diags.push(diag);
        }
        Ok(())
    };

    let snapshot_due = |step: u32| match cfg.snapshot_every {
        Some(k) if k > 0 => step.is_multiple_of(k),
        _ => false,
    };
    let take_snapshot = |step: u32,
                         particles: &[Particle],
                         sctx: &mut Option<TypedContext<SnapshotRow>>,
                         summary: &mut NBodySummary|
     -> Result<(), String> {
        if let Some(ctx) = sctx.as_mut() {
            let rows: Vec<SnapshotRow> =
                particles.iter().map(|p| SnapshotRow { pos: p.pos, mass: p.mass }).collect();
            let gathered = gather_to_root(ctx, &rows).map_err(|e| err(&e))?;
            if rank == 0 {
                summary.snapshots.push((step, gathered));
            }
        }
        Ok(())
    };

    refresh_forces(&mut particles, &mut vctx, &mut rctx, &mut summary)?;
    record_diag(0, &particles, &mut dctx, &mut summary)?;
    if snapshot_due(0) {
        take_snapshot(0, &particles, &mut sctx, &mut summary)?;
    }

    for step in 1..=cfg.steps {
        leapfrog_kick_drift(&mut particles, cfg.dt);
        particles = migrate(&mut pctx, &partition, particles).map_err(|e| err(&e))?;
        if let Some(ctx) = tctx.as_mut() {
            let sent = pctx.last_round().sent_to.clone();
            let rows: Vec<CommTraceRow> = sent
                .iter()
                .enumerate()
                .map(|(dst, &items)| CommTraceRow { step, src: rank as u32, dst: dst as u32, items })
                .collect();
            let gathered = gather_to_root(ctx, &rows).map_err(|e| err(&e))?;
            if rank == 0 {
                summary.comm_rows.extend(gathered);
            }
        }
        refresh_forces(&mut particles, &mut vctx, &mut rctx, &mut summary)?;
        leapfrog_finish_kick(&mut particles, cfg.dt);
        record_diag(step, &particles, &mut dctx, &mut summary)?;
        if snapshot_due(step) {
            take_snapshot(step, &particles, &mut sctx, &mut summary)?;
        }
    }

    // total fallbacks across ranks, so any rank can assert on them
    summary.pinned_fallbacks =
        comm.allreduce_sum(summary.pinned_fallbacks).map_err(|e| err(&e))?;
    summary.local_final = particles.len();
    if rank == 0 {
        summary.comm_rows.sort_by_key(|r| (r.step, r.src, r.dst));
    }
    Ok(summary)
}

/// Compute forces once (no integration) and gather (position, force) rows
/// on rank 0, sorted by position bits. Used for cross-rank-count
/// equivalence checks.
pub fn forces_once(comm: &Communicator, cfg: &NBodyConfig) -> Result<Vec<ForceRow>, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let num_ranks = comm.num_ranks();
    let rank = comm.rank();
    let partition = MortonPartition::equal_ranges(num_ranks, cfg.bounds);
    let mut particles: Vec<Particle> = init_particles(cfg)
        .into_iter()
        .filter(|p| partition.owner_of_particle(p.pos) == rank)
        .collect();

    let mut vctx = TypedContext::<VirtualParticle>::new(comm).map_err(|e| err(&e))?;
    vctx.resize_queues(cfg.exchange_capacity(num_ranks));
    let mut rctx = TypedContext::<RefinementReq>::new(comm).map_err(|e| err(&e))?;
    rctx.resize_queues(cfg.exchange_capacity(num_ranks));
    let mut fctx = TypedContext::<ForceRow>::new(comm).map_err(|e| err(&e))?;
    fctx.resize_queues(cfg.n.max(1));

    let points: Vec<([f64; 3], f64)> = particles.iter().map(|p| (p.pos, p.mass)).collect();
    let local_tree = BhTree::build_points(cfg.bounds, &points);
    let imports = essential_tree_exchange(&local_tree, &mut vctx, &mut rctx, &partition, cfg.theta)
        .map_err(|e| err(&e))?;
    compute_forces(&mut particles, &imports, cfg.bounds, &cfg.force_params());

    let rows: Vec<ForceRow> =
        particles.iter().map(|p| ForceRow { pos: p.pos, force: p.force }).collect();
    let mut gathered = gather_to_root(&mut fctx, &rows).map_err(|e| err(&e))?;
    gathered.sort_by_key(|r| (r.pos[0].to_bits(), r.pos[1].to_bits(), r.pos[2].to_bits()));
    Ok(gathered)
}
