//! Streamlines through an ABC flow on four ranks. Particles advect one RK4
//! step per round, hop between ranks as they cross macrocell boundaries,
//! and rank 0 assembles the polylines.
//!
//! ```bash
//! cargo run --example streamlines_abc
//! ```

use workfwd::harness::LaunchTransport;
use workfwd::streamlines::{abc_field, load_seeds_spec, run_streamlines, TraceParams};

fn main() {
    let field = abc_field(32);
    let params = TraceParams::for_field(&field).with_max_steps(200);
    let seeds = load_seeds_spec("random:20:42", field.origin(), field.max_bound()).unwrap();

    let lines = run_streamlines(4, LaunchTransport::InProcess, &field, &seeds, &params)
        .expect("run failed");

    let total_points: usize = lines.iter().map(|l| l.points.len()).sum();
    println!("{} streamlines, {} points total", lines.len(), total_points);
    for line in lines.iter().take(3) {
        let first = line.points.first();
        let last = line.points.last();
        println!(
            "  id {}: {} points, {:?} -> {:?}",
            line.id,
            line.points.len(),
            first.map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]),
            last.map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]),
        );
    }

    let path = std::env::temp_dir().join("abc_streamlines.txt");
    workfwd::streamlines::write_streamlines_file(&path, &lines).unwrap();
    println!("wrote {}", path.display());
}
