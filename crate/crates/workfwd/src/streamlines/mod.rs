//! Round-based, data-parallel particle advection over a distributed vector
//! field, producing streamline polylines.
//!
//! Each round, a rank steps every particle in its input queue once (RK4),
//! records the new polyline point locally, and emits the particle to the
//! owner of its new position. The run terminates when the global forward
//! count reaches zero; rank 0 then gathers all recorded points through a
//! second forwarding context and assembles the polylines.

pub mod field;
pub mod partition;
pub mod rk4;

pub use field::{abc_field, constant_field, load_field_spec, rotation_field, VectorField};
pub use partition::{BlockSample, FieldBlock, GridPartition, Owner};
pub use rk4::{rk4_step, rk4_step_block, BlockStep, StepResult, Termination};

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use crate::forward::wire;
use crate::forward::{EmitView, TypedContext, WorkItem};
use crate::harness::{launch, LaunchConfig, LaunchTransport, RankReport};
use crate::comm::Communicator;

/// A particle being advected: a unique id, its position and how many steps
/// it has taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParticle {
    pub id: u32,
    pub pos: [f64; 3],
    pub steps_taken: u32,
}

impl WorkItem for TraceParticle {
    const ITEM_SIZE: usize = 32;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_u32(dst, &mut at, self.id);
        wire::put_vec3(dst, &mut at, self.pos);
        wire::put_u32(dst, &mut at, self.steps_taken);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        TraceParticle {
            id: wire::get_u32(src, &mut at),
            pos: wire::get_vec3(src, &mut at),
            steps_taken: wire::get_u32(src, &mut at),
        }
    }
}

/// One recorded polyline point, gathered to rank 0 at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRecord {
    pub id: u32,
    pub step: u32,
    pub pos: [f64; 3],
}

impl WorkItem for SegmentRecord {
    const ITEM_SIZE: usize = 32;

    fn store(&self, dst: &mut [u8]) {
        let mut at = 0;
        wire::put_u32(dst, &mut at, self.id);
        wire::put_u32(dst, &mut at, self.step);
        wire::put_vec3(dst, &mut at, self.pos);
    }

    fn load(src: &[u8]) -> Self {
        let mut at = 0;
        SegmentRecord {
            id: wire::get_u32(src, &mut at),
            step: wire::get_u32(src, &mut at),
            pos: wire::get_vec3(src, &mut at),
        }
    }
}

/// Integration parameters.
#[derive(Debug, Clone, Copy)]
pub struct TraceParams {
    pub h: f64,
    pub max_steps: u32,
    pub epsilon_move: f64,
}

impl TraceParams {
    /// Defaults derived from the field geometry: h = 0.25 x min spacing,
    /// epsilon_move = 1e-7 x |spacing|.
    pub fn for_field(field: &VectorField) -> Self {
        let s = field.spacing();
        let min_s = s[0].min(s[1]).min(s[2]);
        let mag = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        TraceParams { h: 0.25 * min_s, max_steps: 1000, epsilon_move: 1e-7 * mag }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }
}

/// One particle's polyline: the seed point plus one point per accepted
/// step, ordered by step index. Empty when the seed fell outside the
/// domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    pub id: u32,
    pub points: Vec<[f64; 3]>,
}

/// One advection round: step every incoming particle once.
///
/// A finished or out-of-domain particle retires silently; a surviving one
/// has its new point recorded by this (the stepping) rank and is emitted to
/// the owner of the new position, which may be this rank again. A particle
/// whose stage samples fall beyond the local halo is forwarded unchanged to
/// the rank owning the first escaping stage position.
pub fn advect_round(
    view: &EmitView<'_, TraceParticle>,
    block: &FieldBlock,
    part: &GridPartition,
    params: &TraceParams,
    records: &mut Vec<SegmentRecord>,
) {
    for p in view.incoming() {
        if p.steps_taken >= params.max_steps {
            continue;
        }
        match rk4_step_block(block, p.pos, params.h, params.epsilon_move) {
            BlockStep::Terminated(_) => {}
            BlockStep::NeedsBlock(stage_pos) => {
                if let Owner::Rank(r) = part.owner_of(stage_pos) {
                    view.emit_outgoing(&p, r);
                }
            }
            BlockStep::Moved(q) => {
                let steps = p.steps_taken + 1;
                records.push(SegmentRecord { id: p.id, step: steps, pos: q });
                if steps < params.max_steps {
                    if let Owner::Rank(r) = part.owner_of(q) {
                        view.emit_outgoing(
                            &TraceParticle { id: p.id, pos: q, steps_taken: steps },
                            r,
                        );
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct StreamlineError(pub String);

impl std::fmt::Display for StreamlineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "streamlines failed: {}", self.0)
    }
}

impl std::error::Error for StreamlineError {}

/// Run one rank's share of a streamline computation.
///
/// Rank 0 seeds all particles (routed to their owners through the first
/// forward) and returns the assembled streamlines; other ranks return an
/// empty vector. Rounds executed are identical on every rank.
pub fn run_streamlines_rank(
    comm: &Communicator,
    fld: &VectorField,
    seeds: &[[f64; 3]],
    params: &TraceParams,
) -> Result<(Vec<Streamline>, u64), StreamlineError> {
    let err = |e: &dyn std::fmt::Display| StreamlineError(e.to_string());
    let rank = comm.rank();
    let part = GridPartition::for_ranks(comm.num_ranks(), fld.origin(), fld.max_bound());
    let (lo, hi) = part.rank_vertex_range(rank, fld.dims(), fld.spacing());
    let block = FieldBlock::extract(fld, lo, hi);

    let n = seeds.len();
    if n == 0 {
        return Err(StreamlineError("no seeds given".into()));
    }
    let mut pctx = TypedContext::<TraceParticle>::new(comm).map_err(|e| err(&e))?;
    pctx.resize_queues(n);
    let mut rctx = TypedContext::<SegmentRecord>::new(comm).map_err(|e| err(&e))?;
    rctx.resize_queues(n * (params.max_steps as usize + 1));

    let mut records: Vec<SegmentRecord> = Vec::new();
    if rank == 0 {
        let view = pctx.view();
        for (i, &pos) in seeds.iter().enumerate() {
            let id = i as u32;
            if let Owner::Rank(owner) = part.owner_of(pos) {
                records.push(SegmentRecord { id, step: 0, pos });
                if !view.emit_outgoing(&TraceParticle { id, pos, steps_taken: 0 }, owner) {
                    return Err(StreamlineError(format!(
                        "seed queue overflow: capacity must cover all {n} seeds"
                    )));
                }
            }
            // seeds outside the domain yield empty streamlines
        }
    }
    pctx.forward().map_err(|e| err(&e))?;

    let mut rounds = 0u64;
    let round_guard = 2 * params.max_steps as u64 + 16;
    loop {
        if rounds >= round_guard {
            return Err(StreamlineError(format!(
                "advection exceeded the {round_guard}-round guard (h too large for the halo?)"
            )));
        }
        advect_round(&pctx.view(), &block, &part, params, &mut records);
        rounds += 1;
        let remaining = pctx.forward().map_err(|e| err(&e))?;
        if remaining == 0 {
            break;
        }
    }

    // gather the recorded points on rank 0
    {
        let rview = rctx.view();
        for rec in &records {
            if !rview.emit_outgoing(rec, 0) {
                return Err(StreamlineError("record queue overflow".into()));
            }
        }
    }
    rctx.forward().map_err(|e| err(&e))?;

    if rank != 0 {
        return Ok((Vec::new(), rounds));
    }
    let mut recs = rctx.incoming_items();
    recs.sort_by_key(|r| (r.id, r.step));
    let mut lines: Vec<Streamline> = (0..n as u32).map(|id| Streamline { id, points: Vec::new() }).collect();
    for rec in recs {
        lines[rec.id as usize].points.push(rec.pos);
    }
    Ok((lines, rounds))
}

/// Launch a full streamline run on `num_ranks` concurrent ranks and return
/// rank 0's assembled streamlines.
pub fn run_streamlines(
    num_ranks: usize,
    transport: LaunchTransport,
    fld: &VectorField,
    seeds: &[[f64; 3]],
    params: &TraceParams,
) -> Result<Vec<Streamline>, StreamlineError> {
    let report = launch(
        LaunchConfig::new(num_ranks, transport).with_timeout(Duration::from_secs(120)),
        |_rank, comm| {
            let (lines, rounds) = run_streamlines_rank(comm, fld, seeds, params)
                .map_err(|e| e.to_string())?;
            Ok(RankReport { rounds, ..RankReport::with_detail(lines) })
        },
    )
    .map_err(|e| StreamlineError(e.to_string()))?;
    let mut per_rank = report.per_rank;
    Ok(per_rank.remove(0).detail)
}

/// Parse seeds: `random:N:SEED`, `grid:NXxNYxNZ`, or a path to a text file
/// with one `x y z` triple per line.
pub fn load_seeds_spec(
    spec: &str,
    origin: [f64; 3],
    max: [f64; 3],
) -> Result<Vec<[f64; 3]>, StreamlineError> {
    use rand::{Rng, SeedableRng};
    if let Some(rest) = spec.strip_prefix("random:") {
        let mut parts = rest.split(':');
        let n: usize = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| StreamlineError(format!("bad seed count in {spec}")))?;
        let seed: u64 = match parts.next() {
            None => 0,
            Some(s) => s.parse().map_err(|_| StreamlineError(format!("bad rng seed in {spec}")))?,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // keep clear of the boundary so the first steps stay in-domain
        return Ok((0..n)
            .map(|_| {
                let mut p = [0f64; 3];
                for a in 0..3 {
                    let span = max[a] - origin[a];
                    p[a] = origin[a] + span * rng.gen_range(0.1..0.9);
                }
                p
            })
            .collect());
    }
    if let Some(rest) = spec.strip_prefix("grid:") {
        let dims: Vec<usize> = rest
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| StreamlineError(format!("bad grid spec {spec}")))?;
        if dims.len() != 3 || dims.contains(&0) {
            return Err(StreamlineError(format!("grid spec needs NXxNYxNZ: {spec}")));
        }
        let mut seeds = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let f = |idx: usize, n: usize, a: usize| {
                        origin[a] + (max[a] - origin[a]) * (idx as f64 + 1.0) / (n as f64 + 1.0)
                    };
                    seeds.push([f(i, dims[0], 0), f(j, dims[1], 1), f(k, dims[2], 2)]);
                }
            }
        }
        return Ok(seeds);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| StreamlineError(format!("cannot read seeds file {spec}: {e}")))?;
    let mut seeds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let comps: Vec<f64> = line
            .split_whitespace()
            .map(|c| c.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| StreamlineError(format!("bad seed on line {}", lineno + 1)))?;
        if comps.len() != 3 {
            return Err(StreamlineError(format!("seed on line {} needs 3 numbers", lineno + 1)));
        }
        seeds.push([comps[0], comps[1], comps[2]]);
    }
    Ok(seeds)
}

/// Write streamlines as text: lines `id x y z` grouped per streamline,
/// blank-line separated, ordered by id.
pub fn write_streamlines(out: &mut dyn Write, lines: &[Streamline]) -> std::io::Result<()> {
    let mut sorted: Vec<&Streamline> = lines.iter().collect();
    sorted.sort_by_key(|l| l.id);
    for (i, line) in sorted.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for p in &line.points {
            writeln!(out, "{} {} {} {}", line.id, p[0], p[1], p[2])?;
        }
    }
    Ok(())
}

/// Convenience wrapper writing to a file path.
pub fn write_streamlines_file(path: &Path, lines: &[Streamline]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_streamlines(&mut f, lines)
}
