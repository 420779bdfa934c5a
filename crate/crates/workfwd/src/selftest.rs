//! Headless cross-module property suite backing the `selftest` subcommand.
//!
//! Each check is small enough to run in seconds and prints one line; the
//! suite passes only when every check does.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_threads, BenchConfig, Pattern};
use crate::comm::Communicator;
use crate::forward::sort::{compute_segments, pack_sort_keys, sort_and_gather};
use crate::forward::{TypedContext, WorkItem};
use crate::harness::{launch, run_rounds, LaunchConfig, LaunchTransport, RankReport};
use crate::nbody;
use crate::streamlines;

type Check = (&'static str, fn() -> Result<(), String>);

/// All checks in execution order.
pub fn checks() -> Vec<Check> {
    vec![
        ("comm_counts_transpose", comm_counts_transpose),
        ("forwarding_conservation", forwarding_conservation),
        ("sort_pipeline_oracle", sort_pipeline_oracle),
        ("ring_termination", ring_termination),
        ("transport_equivalence", transport_equivalence),
        ("rk4_order", rk4_order),
        ("streamlines_partition_independence", streamlines_partition_independence),
        ("nbody_force_accuracy", nbody_force_accuracy),
        ("nbody_rank_equivalence", nbody_rank_equivalence),
        ("bench_conservation", bench_conservation),
    ]
}

/// Run every check, printing one line each; returns the failure count.
pub fn run_all() -> usize {
    let mut failures = 0;
    for (name, check) in checks() {
        match check() {
            Ok(()) => println!("ok      {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAILED  {name}: {msg}");
            }
        }
    }
    failures
}

fn ranks_run<T, F>(num_ranks: usize, f: F) -> Result<Vec<T>, String>
where
    T: Send + Clone,
    F: Fn(usize, &Communicator) -> Result<T, String> + Send + Sync,
{
    let report = launch(
        LaunchConfig::new(num_ranks, LaunchTransport::InProcess)
            .with_timeout(Duration::from_secs(30)),
        |rank, comm| Ok(RankReport::with_detail(f(rank, comm)?)),
    )
    .map_err(|e| e.to_string())?;
    Ok(report.per_rank.into_iter().map(|r| r.detail).collect())
}

fn expect(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn comm_counts_transpose() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for num_ranks in [1usize, 2, 3, 4] {
        let matrix: Vec<Vec<u64>> = (0..num_ranks)
            .map(|_| (0..num_ranks).map(|_| rng.gen_range(0..100)).collect())
            .collect();
        let rows = {
            let matrix = matrix.clone();
            ranks_run(num_ranks, move |rank, comm| {
                comm.alltoall_counts(&matrix[rank]).map_err(|e| e.to_string())
            })?
        };
        for r in 0..num_ranks {
            for s in 0..num_ranks {
                expect(rows[r][s] == matrix[s][r], format!("transpose broken at ({r},{s})"))?;
            }
        }
    }
    Ok(())
}

fn forwarding_conservation() -> Result<(), String> {
    for (trial, &num_ranks) in [2usize, 3, 4].iter().enumerate() {
        let results = ranks_run(num_ranks, move |rank, comm| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + trial as u64 * 17 + rank as u64);
            let attempts = rng.gen_range(0..400usize);
            let mut ctx = TypedContext::<u64>::new(comm).map_err(|e| e.to_string())?;
            ctx.resize_queues(400 * num_ranks);
            let mut accepted: Vec<(u64, usize)> = Vec::new();
            {
                let view = ctx.view();
                for i in 0..attempts {
                    let id = ((rank as u64) << 32) | i as u64;
                    let dest = rng.gen_range(0..num_ranks);
                    if view.emit_outgoing(&id, dest) {
                        accepted.push((id, dest));
                    }
                }
            }
            ctx.forward().map_err(|e| e.to_string())?;
            Ok((accepted, ctx.incoming_items()))
        })?;
        let mut sent: Vec<(u64, usize)> = Vec::new();
        let mut got: Vec<(u64, usize)> = Vec::new();
        for (rank, (accepted, received)) in results.into_iter().enumerate() {
            sent.extend(accepted);
            got.extend(received.into_iter().map(|id| (id, rank)));
        }
        sent.sort_unstable();
        got.sort_unstable();
        expect(sent == got, format!("multisets differ in trial {trial}"))?;
    }
    Ok(())
}

fn sort_pipeline_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(0..500usize);
        let num_ranks = rng.gen_range(1..9usize);
        let item_size = 8usize;
        let items: Vec<u8> = (0..n * item_size).map(|_| rng.gen()).collect();
        let dests: Vec<u32> = (0..n).map(|_| rng.gen_range(0..num_ranks as u32)).collect();

        // stable counting-sort oracle
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| dests[i]);
        let mut expect_items = Vec::new();
        for &i in &order {
            expect_items.extend_from_slice(&items[i * item_size..(i + 1) * item_size]);
        }

        let keys = pack_sort_keys(&dests, n);
        let (sorted, sorted_dests) = sort_and_gather(&items, item_size, &keys);
        expect(sorted == expect_items, "gather order differs from the stable oracle")?;

        let (counts, offsets) = compute_segments(&sorted_dests, num_ranks);
        let mut oracle_counts = vec![0u64; num_ranks];
        for &d in &dests {
            oracle_counts[d as usize] += 1;
        }
        expect(counts == oracle_counts, "segment counts differ")?;
        let mut acc = 0u64;
        for r in 0..num_ranks {
            expect(offsets[r] == acc, "segment offsets differ")?;
            acc += counts[r];
        }
    }
    Ok(())
}

fn ring_termination() -> Result<(), String> {
    for num_ranks in [1usize, 2, 4] {
        let rounds = ranks_run(num_ranks, move |rank, comm| {
            let mut ctx = crate::forward::ForwardingContext::new(
                comm,
                crate::forward::WorkItemSchema::new(8).unwrap(),
            );
            ctx.resize_queues(4);
            ctx.seed_input_bytes(&(num_ranks as u64).to_le_bytes())
                .map_err(|e| e.to_string())?;
            let next = (rank + 1) % num_ranks;
            run_rounds(&mut ctx, 100, |view| {
                for i in 0..view.num_incoming() {
                    let hops = u64::load(view.incoming_bytes(i));
                    if hops > 1 {
                        view.emit_bytes(&(hops - 1).to_le_bytes(), next);
                    }
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
        })?;
        expect(
            rounds.iter().all(|&r| r == num_ranks as u64),
            format!("ring over {num_ranks} ranks finished in {rounds:?}"),
        )?;
    }
    Ok(())
}

fn transport_equivalence() -> Result<(), String> {
    let workload = |rank: usize, comm: &Communicator| -> Result<(u64, Vec<u64>), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + rank as u64);
        let mut ctx = TypedContext::<u64>::new(comm).map_err(|e| e.to_string())?;
        ctx.resize_queues(512);
        let mut received_total = 0u64;
        let mut all: Vec<u64> = Vec::new();
        for _round in 0..4 {
            {
                let view = ctx.view();
                for i in 0..rng.gen_range(0..100u64) {
                    let id = ((rank as u64) << 32) | i;
                    view.emit_outgoing(&id, rng.gen_range(0..comm.num_ranks()));
                }
            }
            ctx.forward().map_err(|e| e.to_string())?;
            received_total += ctx.input_count() as u64;
            all.extend(ctx.incoming_items());
        }
        all.sort_unstable();
        Ok((received_total, all))
    };
    let report_of = |transport| -> Result<Vec<(u64, Vec<u64>)>, String> {
        let report = launch(
            LaunchConfig::new(2, transport).with_timeout(Duration::from_secs(30)),
            |rank, comm| Ok(RankReport::with_detail(workload(rank, comm)?)),
        )
        .map_err(|e| e.to_string())?;
        Ok(report.per_rank.into_iter().map(|r| r.detail).collect())
    };
    let inproc = report_of(LaunchTransport::InProcess)?;
    let socket = report_of(LaunchTransport::SocketLoopback)?;
    expect(inproc == socket, "transports delivered different item sets")
}

fn rk4_order() -> Result<(), String> {
    let field = streamlines::rotation_field(65, 2.0, [0.0; 3]);
    // deliberately 157 x 0.04, not 2*pi: both step sizes must divide the
    // integration time exactly so only the truncation error is compared
    #[allow(clippy::approx_constant)]
    let total_time = 6.28;
    let error_at = |h: f64| -> Result<f64, String> {
        let steps = (total_time / h).round() as usize;
        let mut pos = [1.0, 0.0, 0.0];
        for _ in 0..steps {
            match streamlines::rk4_step(&field, pos, h, 1e-15) {
                streamlines::StepResult::Moved(p) => pos = p,
                other => return Err(format!("terminated early: {other:?}")),
            }
        }
        let t = steps as f64 * h;
        let exact = [t.cos(), t.sin(), 0.0];
        Ok(((pos[0] - exact[0]).powi(2) + (pos[1] - exact[1]).powi(2)).sqrt())
    };
    let e1 = error_at(0.04)?;
    let e2 = error_at(0.02)?;
    let ratio = e1 / e2;
    expect(
        (12.0..=20.0).contains(&ratio),
        format!("halving h changed the error by {ratio:.2}x, not ~16x"),
    )
}

fn streamlines_partition_independence() -> Result<(), String> {
    let field = streamlines::abc_field(16);
    let params = streamlines::TraceParams::for_field(&field).with_max_steps(40);
    let seeds = streamlines::load_seeds_spec("random:8:7", field.origin(), field.max_bound())
        .map_err(|e| e.to_string())?;
    let one = streamlines::run_streamlines(1, LaunchTransport::InProcess, &field, &seeds, &params)
        .map_err(|e| e.to_string())?;
    let two = streamlines::run_streamlines(2, LaunchTransport::InProcess, &field, &seeds, &params)
        .map_err(|e| e.to_string())?;
    for (a, b) in one.iter().zip(&two) {
        expect(a.points.len() == b.points.len(), format!("step counts differ for id {}", a.id))?;
        for (p, q) in a.points.iter().zip(&b.points) {
            for c in 0..3 {
                expect(
                    (p[c] - q[c]).abs() < 1e-6,
                    format!("polyline {} deviates by {}", a.id, (p[c] - q[c]).abs()),
                )?;
            }
        }
    }
    Ok(())
}

fn nbody_force_accuracy() -> Result<(), String> {
    let mut cfg = nbody::NBodyConfig::new(128);
    cfg.seed = 4;
    let mut particles = nbody::init_particles(&cfg);
    // direct O(N^2) reference
    let mut oracle = vec![[0f64; 3]; particles.len()];
    for i in 0..particles.len() {
        for j in 0..particles.len() {
            if i == j {
                continue;
            }
            let (a, b) = (&particles[i], &particles[j]);
            let r = [b.pos[0] - a.pos[0], b.pos[1] - a.pos[1], b.pos[2] - a.pos[2]];
            let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + cfg.softening * cfg.softening;
            let s = a.mass * b.mass / (r2 * r2.sqrt());
            for c in 0..3 {
                oracle[i][c] += s * r[c];
            }
        }
    }
    nbody::compute_forces(&mut particles, &[], cfg.bounds, &cfg.force_params());
    let mut errors: Vec<f64> = particles
        .iter()
        .zip(&oracle)
        .map(|(p, o)| {
            let d = [p.force[0] - o[0], p.force[1] - o[1], p.force[2] - o[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let m = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            n / m.max(1e-30)
        })
        .collect();
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = errors[errors.len() / 2];
    expect(median < 0.02, format!("median force error {median}"))
}

fn nbody_rank_equivalence() -> Result<(), String> {
    let mut cfg = nbody::NBodyConfig::new(128);
    cfg.seed = 6;
    let reference = {
        let comm = Communicator::create(crate::comm::CommConfig::single())
            .map_err(|e| e.to_string())?;
        nbody::forces_once(&comm, &cfg)?
    };
    let distributed = {
        let cfg = cfg.clone();
        ranks_run(2, move |_rank, comm| nbody::forces_once(comm, &cfg))?.remove(0)
    };
    expect(reference.len() == distributed.len(), "row counts differ")?;
    for (a, b) in reference.iter().zip(&distributed) {
        expect(a.pos == b.pos, "row order differs")?;
        let scale =
            (a.force[0].powi(2) + a.force[1].powi(2) + a.force[2].powi(2)).sqrt().max(1e-30);
        for c in 0..3 {
            let rel = (a.force[c] - b.force[c]).abs() / scale;
            expect(rel < 1e-10, format!("force deviates by {rel:.2e}"))?;
        }
    }
    Ok(())
}

fn bench_conservation() -> Result<(), String> {
    let mut cfg = BenchConfig::new(2, vec![200, 2000]);
    cfg.rounds = 2;
    cfg.pattern = Pattern::UniformRandom;
    let rows = bench_threads(&cfg, LaunchTransport::InProcess).map_err(|e| e.to_string())?;
    expect(rows.len() == 2, "expected one row per sweep point")?;
    expect(rows.iter().all(|r| r.items_per_sec > 0.0), "non-positive throughput")
}
