//! Command-line entry point: throughput benchmark, the two driver
//! applications and the headless selftest.
//!
//! With `--transport socket` the command re-launches itself once per rank
//! (same arguments, `WF_*` environment variables set) and the child
//! processes form a TCP mesh; rank 0 writes the output.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use workfwd::bench::{self, BenchConfig, Pattern};
use workfwd::harness::{self, LaunchConfig, LaunchTransport, RankReport};
use workfwd::nbody::{self, NBodyConfig, NBodySummary};
use workfwd::streamlines::{self, Streamline, TraceParams};
use workfwd::Communicator;

#[derive(Parser)]
#[command(name = "workfwd", version, about = "Work-item forwarding between ranks: benchmark, particle advection and Barnes-Hut drivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the collective forward path over a sweep of batch sizes.
    Bench(BenchArgs),
    /// Trace streamlines through a vector field on N ranks.
    Streamlines(StreamlinesArgs),
    /// Run a distributed Barnes-Hut N-body simulation.
    Nbody(NbodyArgs),
    /// Run the cross-module property suite headlessly.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    /// Ranks as threads sharing this process.
    InProcess,
    /// Ranks as spawned processes over a TCP mesh.
    Socket,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of ranks.
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    /// Comma-separated items-per-rank sweep.
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    items: Vec<u64>,
    /// Payload size in bytes (at least 8).
    #[arg(long, default_value_t = 44)]
    payload_bytes: usize,
    /// Timed rounds per sweep point (plus one discarded warm-up).
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    /// Destination pattern: uniform_random, ring, all_to_one or self.
    #[arg(long, default_value = "uniform_random")]
    pattern: String,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamlinesArgs {
    /// Field source: a JSON header path, or abc:N / rot:N / const:N[:vx,vy,vz].
    #[arg(long)]
    field: String,
    /// Seed source: a text file, random:N[:SEED], or grid:NXxNYxNZ.
    #[arg(long, default_value = "random:100:0")]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    /// Integration step size (defaults to a quarter of the min spacing).
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    max_steps: u32,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
    /// Output path for the polylines (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NbodyArgs {
    /// Number of bodies.
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    ranks: usize,
    #[arg(long, default_value_t = 10)]
    steps: u32,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1e-2)]
    softening: f64,
    /// Add quadrupole corrections to accepted nodes.
    #[arg(long, default_value_t = false)]
    quadrupole: bool,
    /// Write an `x y z m` snapshot on rank 0 every K steps.
    #[arg(long)]
    snapshot_every: Option<u32>,
    /// Write the per-step migration message matrix as CSV.
    #[arg(long, default_value_t = false)]
    comm_trace: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
    /// Directory for snapshots and the comm trace.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Streamlines(args) => run_streamlines_cmd(args),
        Command::Nbody(args) => run_nbody_cmd(args),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Run `per_rank` on every rank of the requested world and hand rank 0's
/// result to `finish`. For the socket transport the parent spawns one child
/// process per rank and exits with their status; children detect their rank
/// from the environment.
fn launch_world<T, F, G>(
    ranks: usize,
    transport: TransportArg,
    per_rank: F,
    finish: G,
) -> Result<ExitCode, String>
where
    T: Send,
    F: Fn(&Communicator) -> Result<T, String> + Send + Sync,
    G: FnOnce(T) -> Result<(), String>,
{
    if ranks == 0 {
        return Err("--ranks must be at least 1".into());
    }
    match harness::child_env() {
        Some(env) => {
            // we are one spawned rank of a socket world
            let env = env.map_err(|e| e.to_string())?;
            let comm = env.connect(Duration::from_secs(30)).map_err(|e| e.to_string())?;
            let out = per_rank(&comm)?;
            if comm.rank() == 0 {
                finish(out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        None => match transport {
            TransportArg::InProcess => {
                let report = harness::launch(
                    LaunchConfig::new(ranks, LaunchTransport::InProcess)
                        .with_timeout(Duration::from_secs(600)),
                    |_rank, comm| Ok(RankReport::with_detail(per_rank(comm)?)),
                )
                .map_err(|e| e.to_string())?;
                let rank0 = report.per_rank.into_iter().next().expect("rank 0 present");
                finish(rank0.detail)?;
                Ok(ExitCode::SUCCESS)
            }
            TransportArg::Socket => {
                let args: Vec<String> = std::env::args().skip(1).collect();
                harness::spawn_process_ranks(ranks, &args).map_err(|e| e.to_string())?;
                Ok(ExitCode::SUCCESS)
            }
        },
    }
}

fn run_bench(args: BenchArgs) -> Result<ExitCode, String> {
    let pattern = Pattern::parse(&args.pattern)
        .ok_or_else(|| format!("unknown pattern: {}", args.pattern))?;
    let cfg = BenchConfig {
        payload_bytes: args.payload_bytes,
        items_per_rank: args.items.clone(),
        rounds: args.rounds,
        num_ranks: args.ranks,
        pattern,
        seed: args.seed,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let out = args.out.clone();
    launch_world(
        args.ranks,
        args.transport,
        |comm| bench::bench_rank(comm, &cfg).map_err(|e| e.to_string()),
        move |rows| {
            if let Some(warning) = bench::trend_warning(&rows) {
                eprintln!("warning: {warning}");
            }
            let csv = bench::to_csv(&rows);
            match &out {
                Some(path) => std::fs::write(path, csv).map_err(|e| e.to_string()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        },
    )
}

fn run_streamlines_cmd(args: StreamlinesArgs) -> Result<ExitCode, String> {
    let field = streamlines::load_field_spec(&args.field).map_err(|e| e.to_string())?;
    let seeds = streamlines::load_seeds_spec(&args.seeds, field.origin(), field.max_bound())
        .map_err(|e| e.to_string())?;
    let mut params = TraceParams::for_field(&field).with_max_steps(args.max_steps);
    if let Some(h) = args.h {
        if h <= 0.0 {
            return Err("--h must be positive".into());
        }
        params.h = h;
    }
    let out = args.out.clone();
    let write = move |lines: Vec<Streamline>| -> Result<(), String> {
        match &out {
            Some(path) => {
                streamlines::write_streamlines_file(path, &lines).map_err(|e| e.to_string())
            }
            None => {
                let mut buf = Vec::new();
                streamlines::write_streamlines(&mut buf, &lines).map_err(|e| e.to_string())?;
                print!("{}", String::from_utf8_lossy(&buf));
                Ok(())
            }
        }
    };
    launch_world(
        args.ranks,
        args.transport,
        |comm| {
            streamlines::run_streamlines_rank(comm, &field, &seeds, &params)
                .map(|(lines, _rounds)| lines)
                .map_err(|e| e.to_string())
        },
        write,
    )
}

fn run_nbody_cmd(args: NbodyArgs) -> Result<ExitCode, String> {
    let cfg = NBodyConfig {
        n: args.n,
        steps: args.steps,
        theta: args.theta,
        dt: args.dt,
        softening: args.softening,
        quadrupole: args.quadrupole,
        seed: args.seed,
        bounds: nbody::Bounds3::cube(1.0),
        snapshot_every: args.snapshot_every,
        comm_trace: args.comm_trace,
    };
    if cfg.theta <= 0.0 {
        return Err("--theta must be positive".into());
    }
    let out_dir = args.out_dir.clone();
    launch_world(
        args.ranks,
        args.transport,
        |comm| nbody::run_nbody_rank(comm, &cfg),
        move |summary| write_nbody_outputs(&out_dir, &summary),
    )
}

fn write_nbody_outputs(out_dir: &PathBuf, summary: &NBodySummary) -> Result<(), String> {
    use std::io::Write;
    println!("step,count,total_mass,momentum_x,momentum_y,momentum_z");
    for d in &summary.diags {
        println!(
            "{},{},{:.12e},{:.6e},{:.6e},{:.6e}",
            d.step, d.count, d.total_mass, d.momentum[0], d.momentum[1], d.momentum[2]
        );
    }
    if let (Some(first), Some(last)) = (summary.diags.first(), summary.diags.last()) {
        let drift: f64 = (0..3)
            .map(|a| (last.momentum[a] - first.momentum[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        eprintln!("momentum drift over the run: {drift:.6e}");
    }
    if summary.pinned_fallbacks > 0 {
        eprintln!(
            "note: {} pinned-import fallback evaluations (non-aligned partition)",
            summary.pinned_fallbacks
        );
    }
    if !summary.snapshots.is_empty() || !summary.comm_rows.is_empty() {
        std::fs::create_dir_all(out_dir).map_err(|e| e.to_string())?;
    }
    for (step, rows) in &summary.snapshots {
        let path = out_dir.join(format!("snapshot_{step:06}.txt"));
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| e.to_string())?,
        );
        for r in rows {
            writeln!(f, "{} {} {} {}", r.pos[0], r.pos[1], r.pos[2], r.mass)
                .map_err(|e| e.to_string())?;
        }
    }
    if !summary.comm_rows.is_empty() {
        let path = out_dir.join("comm_trace.csv");
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| e.to_string())?,
        );
        writeln!(f, "step,src,dst,items").map_err(|e| e.to_string())?;
        for r in &summary.comm_rows {
            writeln!(f, "{},{},{},{}", r.step, r.src, r.dst, r.items)
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn run_selftest() -> Result<ExitCode, String> {
    let failures = workfwd::selftest::run_all();
    if failures == 0 {
        println!("selftest: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(format!("{failures} selftest check(s) failed"))
    }
}
