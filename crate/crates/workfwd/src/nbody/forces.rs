//! Barnes-Hut force evaluation over a combined tree of local particles and
//! imported remote multipoles, plus the leapfrog integrator.

use super::morton::Bounds3;
use super::tree::{Atom, BhTree, NodeKind};
use super::{Particle, VirtualParticle};

/// Opening criterion: a node of size `smax` at center-of-mass `node_pos`
/// may approximate its contents for an evaluation at `eval_pos` iff
/// `smax / distance < theta`. Point sources (`smax == 0`) always pass;
/// zero distance with finite size must refine.
pub fn mac_accept(smax: f64, node_pos: [f64; 3], eval_pos: [f64; 3], theta: f64) -> bool {
    debug_assert!(theta > 0.0);
    if smax == 0.0 {
        return true;
    }
    let d = dist(node_pos, eval_pos);
    d > 0.0 && smax / d < theta
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct ForceParams {
    pub theta: f64,
    pub softening: f64,
    pub gravity: f64,
    pub quadrupole: bool,
}

impl Default for ForceParams {
    fn default() -> Self {
        ForceParams { theta: 0.5, softening: 1e-2, gravity: 1.0, quadrupole: false }
    }
}

/// Counters from one force evaluation pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForceStats {
    pub monopole_evals: u64,
    pub point_evals: u64,
    /// Pinned import atoms evaluated on the descend path (only possible
    /// when a straddling cell's per-atom acceptance disagreed; zero for
    /// cell-aligned partitions).
    pub pinned_fallbacks: u64,
}

/// Softened monopole force of (`mass` at `src`) on (`m_p` at `p`), added
/// into `out`: F = G m_p M r / (|r|^2 + eps^2)^{3/2} with r = src - p.
fn add_monopole(
    out: &mut [f64; 3],
    p: [f64; 3],
    m_p: f64,
    src: [f64; 3],
    mass: f64,
    params: &ForceParams,
) {
    let r = [src[0] - p[0], src[1] - p[1], src[2] - p[2]];
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let soft2 = r2 + params.softening * params.softening;
    if soft2 == 0.0 {
        return; // coincident and unsoftened: no force
    }
    let inv = params.gravity * m_p * mass / (soft2 * soft2.sqrt());
    out[0] += inv * r[0];
    out[1] += inv * r[1];
    out[2] += inv * r[2];
}

/// Traceless-quadrupole correction of a source at `src` on `p`:
/// a = G [ Q r / s^5 - (5/2) (r'Q r) r / s^7 ], r = p - src, s softened.
fn add_quadrupole(
    out: &mut [f64; 3],
    p: [f64; 3],
    m_p: f64,
    src: [f64; 3],
    quad: &[f64; 6],
    params: &ForceParams,
) {
    let r = [p[0] - src[0], p[1] - src[1], p[2] - src[2]];
    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let s2 = r2 + params.softening * params.softening;
    if s2 == 0.0 {
        return;
    }
    let (qxx, qxy, qxz, qyy, qyz, qzz) = (quad[0], quad[1], quad[2], quad[3], quad[4], quad[5]);
    let qr = [
        qxx * r[0] + qxy * r[1] + qxz * r[2],
        qxy * r[0] + qyy * r[1] + qyz * r[2],
        qxz * r[0] + qyz * r[1] + qzz * r[2],
    ];
    let rqr = r[0] * qr[0] + r[1] * qr[1] + r[2] * qr[2];
    let s = s2.sqrt();
    let inv5 = 1.0 / (s2 * s2 * s);
    let inv7 = inv5 / s2;
    let g = params.gravity * m_p;
    for a in 0..3 {
        out[a] += g * (qr[a] * inv5 - 2.5 * rqr * r[a] * inv7);
    }
}

/// Force of every source in `tree` on the point (`p`, `m_p`), skipping the
/// point atom whose `local_index` is `skip`.
pub fn tree_force(
    tree: &BhTree,
    p: [f64; 3],
    m_p: f64,
    skip: Option<u32>,
    params: &ForceParams,
    stats: &mut ForceStats,
) -> [f64; 3] {
    let mut out = [0f64; 3];
    if let Some(root) = tree.root() {
        node_force(tree, root, p, m_p, skip, params, &mut out, stats);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn node_force(
    tree: &BhTree,
    id: u32,
    p: [f64; 3],
    m_p: f64,
    skip: Option<u32>,
    params: &ForceParams,
    out: &mut [f64; 3],
    stats: &mut ForceStats,
) {
    let node = tree.node(id);
    if node.mass == 0.0 {
        return;
    }
    if mac_accept(node.smax, node.com, p, params.theta) {
        // a node containing the skipped particle is never accepted by the
        // MAC (the evaluation point sits inside the cell), except for the
        // particle's own single-point leaf, where monopole(self) is zero
        // distance and contributes nothing
        stats.monopole_evals += 1;
        add_monopole(out, p, m_p, node.com, node.mass, params);
        if params.quadrupole {
            add_quadrupole(out, p, m_p, node.com, &node.quad, params);
        }
        return;
    }
    for &pi in &node.pinned {
        let atom = tree.atom(pi);
        debug_assert!(
            mac_accept(atom.smax, atom.pos, p, params.theta),
            "imported aggregate used below its acceptance point"
        );
        stats.pinned_fallbacks += (atom.smax > 0.0) as u64;
        add_monopole(out, p, m_p, atom.pos, atom.mass, params);
        if params.quadrupole {
            add_quadrupole(out, p, m_p, atom.pos, &atom.quad, params);
        }
    }
    match &node.kind {
        NodeKind::Leaf { points } => {
            for &pi in points {
                let atom = tree.atom(pi);
                if skip.is_some() && atom.local_index == skip {
                    continue;
                }
                stats.point_evals += 1;
                add_monopole(out, p, m_p, atom.pos, atom.mass, params);
            }
        }
        NodeKind::Internal { children } => {
            for child in children.iter().flatten() {
                node_force(tree, *child, p, m_p, skip, params, out, stats);
            }
        }
    }
}

/// Build the combined evaluation tree over local particles and imported
/// virtual particles and write softened Barnes-Hut forces into
/// `particles[i].force`.
pub fn compute_forces(
    particles: &mut [Particle],
    imports: &[VirtualParticle],
    bounds: Bounds3,
    params: &ForceParams,
) -> ForceStats {
    let mut atoms: Vec<Atom> = Vec::with_capacity(particles.len() + imports.len());
    for (i, p) in particles.iter().enumerate() {
        atoms.push(Atom::point(p.pos, p.mass, Some(i as u32)));
    }
    for v in imports {
        atoms.push(Atom {
            pos: v.pos,
            mass: v.mass,
            smax: v.smax,
            quad: [0.0; 6],
            local_index: None,
        });
    }
    let tree = BhTree::build(bounds, atoms);
    let mut stats = ForceStats::default();
    for i in 0..particles.len() {
        let (pos, mass) = (particles[i].pos, particles[i].mass);
        particles[i].force = tree_force(&tree, pos, mass, Some(i as u32), params, &mut stats);
    }
    stats
}

/// First leapfrog half: half-kick then full drift.
pub fn leapfrog_kick_drift(particles: &mut [Particle], dt: f64) {
    for p in particles.iter_mut() {
        let s = dt / (2.0 * p.mass);
        for a in 0..3 {
            p.vel[a] += p.force[a] * s;
        }
        for a in 0..3 {
            p.pos[a] += p.vel[a] * dt;
        }
    }
}

/// Second leapfrog half: half-kick with the freshly recomputed forces.
pub fn leapfrog_finish_kick(particles: &mut [Particle], dt: f64) {
    for p in particles.iter_mut() {
        let s = dt / (2.0 * p.mass);
        for a in 0..3 {
            p.vel[a] += p.force[a] * s;
        }
    }
}

/// Kick-drift-kick with the current forces on both half-kicks. The real
/// step loop recomputes forces between the halves; this form covers the
/// degenerate cases (zero force, dt = 0) and tests.
pub fn leapfrog_step(particles: &mut [Particle], dt: f64) {
    leapfrog_kick_drift(particles, dt);
    leapfrog_finish_kick(particles, dt);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn particle(pos: [f64; 3], vel: [f64; 3], mass: f64) -> Particle {
        Particle { pos, vel, force: [0.0; 3], mass }
    }

    fn unsoftened(theta: f64) -> ForceParams {
        ForceParams { theta, softening: 0.0, gravity: 1.0, quadrupole: false }
    }

    #[test]
    fn mac_rules() {
        let at = [0.0; 3];
        assert!(mac_accept(0.0, [5.0, 0.0, 0.0], at, 0.5));
        assert!(mac_accept(1.0, [10.0, 0.0, 0.0], at, 0.5)); // 0.1 < 0.5
        assert!(!mac_accept(1.0, [1.0, 0.0, 0.0], at, 0.5)); // 1.0 >= 0.5
        assert!(!mac_accept(1.0, at, at, 0.5)); // zero distance must refine
    }

    #[test]
    fn newton_pair() {
        // two unit masses at distance 1: |F| = 1, opposite directions
        let mut ps = vec![
            particle([0.0, 0.0, 0.0], [0.0; 3], 1.0),
            particle([1.0, 0.0, 0.0], [0.0; 3], 1.0),
        ];
        compute_forces(&mut ps, &[], Bounds3::cube(2.0), &unsoftened(0.5));
        assert!((ps[0].force[0] - 1.0).abs() < 1e-12);
        assert!((ps[1].force[0] + 1.0).abs() < 1e-12);
        for a in 1..3 {
            assert_eq!(ps[0].force[a], 0.0);
            assert_eq!(ps[1].force[a], 0.0);
        }
    }

    #[test]
    fn symmetric_square_has_zero_net_force() {
        let mut ps = vec![
            particle([1.0, 1.0, 0.0], [0.0; 3], 1.0),
            particle([-1.0, 1.0, 0.0], [0.0; 3], 1.0),
            particle([-1.0, -1.0, 0.0], [0.0; 3], 1.0),
            particle([1.0, -1.0, 0.0], [0.0; 3], 1.0),
        ];
        compute_forces(&mut ps, &[], Bounds3::cube(2.0), &unsoftened(0.3));
        let mut net = [0f64; 3];
        for p in &ps {
            for a in 0..3 {
                net[a] += p.force[a];
            }
        }
        for a in 0..3 {
            assert!(net[a].abs() < 1e-10, "net force {net:?}");
        }
    }

    #[test]
    fn coincident_unsoftened_points_do_not_blow_up() {
        let mut ps = vec![
            particle([0.5, 0.5, 0.5], [0.0; 3], 1.0),
            particle([0.5, 0.5, 0.5], [0.0; 3], 1.0),
        ];
        compute_forces(&mut ps, &[], Bounds3::cube(1.0), &unsoftened(0.5));
        for p in &ps {
            assert!(p.force.iter().all(|f| f.is_finite()));
            assert_eq!(p.force, [0.0; 3]);
        }
    }

    #[test]
    fn quadrupole_matches_axis_pair_expansion() {
        // two masses m at +-d on x; target far on the x axis:
        // quadrupole correction is -6 G m d^2 / R^4
        let (m, d, big_r) = (1.0, 0.1, 4.0);
        let q = {
            // direct quadrupole of the pair about its COM (the origin)
            let mut q = [0f64; 6];
            for x in [d, -d] {
                let dv = [x, 0.0, 0.0];
                let d2 = x * x;
                q[0] += m * (3.0 * dv[0] * dv[0] - d2);
                q[3] += m * -d2;
                q[5] += m * -d2;
            }
            q
        };
        let mut out = [0f64; 3];
        let params = unsoftened(0.5);
        add_quadrupole(&mut out, [big_r, 0.0, 0.0], 1.0, [0.0; 3], &q, &params);
        let expect = -6.0 * m * d * d / big_r.powi(4);
        assert!(
            (out[0] - expect).abs() < 1e-12,
            "quad force {} vs {expect}",
            out[0]
        );
    }

    #[test]
    fn zero_force_drift_and_zero_dt() {
        let mut ps = vec![particle([0.0; 3], [1.0, 2.0, 3.0], 2.0)];
        leapfrog_step(&mut ps, 0.5);
        assert_eq!(ps[0].pos, [0.5, 1.0, 1.5]);
        assert_eq!(ps[0].vel, [1.0, 2.0, 3.0]);
        let before = ps[0];
        leapfrog_step(&mut ps, 0.0);
        assert_eq!(ps[0].pos, before.pos);
        assert_eq!(ps[0].vel, before.vel);
    }

    #[test]
    fn circular_two_body_energy_drift_is_bounded() {
        // equal masses on a circular orbit about the barycenter;
        // r = separation 1, G = 1: v^2 = G m / (2 r)
        let m = 1.0;
        let r = 1.0;
        let v = f64::sqrt(m / (2.0 * r));
        let mut ps = vec![
            particle([-r / 2.0, 0.0, 0.0], [0.0, -v, 0.0], m),
            particle([r / 2.0, 0.0, 0.0], [0.0, v, 0.0], m),
        ];
        let params = ForceParams { theta: 0.2, softening: 0.0, gravity: 1.0, quadrupole: false };
        let bounds = Bounds3::cube(4.0);
        let energy = |ps: &[Particle]| -> f64 {
            let mut e = 0.0;
            for p in ps {
                e += 0.5 * p.mass * (p.vel[0].powi(2) + p.vel[1].powi(2) + p.vel[2].powi(2));
            }
            let d = dist(ps[0].pos, ps[1].pos);
            e - ps[0].mass * ps[1].mass / d
        };
        // period of the relative orbit: omega = v_rel / r with v_rel = 2v
        let period = std::f64::consts::TAU * r / (2.0 * v);
        let dt = 1e-3 * period;
        compute_forces(&mut ps, &[], bounds, &params);
        let e0 = energy(&ps);
        let mut max_drift = 0f64;
        for _ in 0..1000 {
            leapfrog_kick_drift(&mut ps, dt);
            compute_forces(&mut ps, &[], bounds, &params);
            leapfrog_finish_kick(&mut ps, dt);
            let drift = ((energy(&ps) - e0) / e0).abs();
            max_drift = max_drift.max(drift);
        }
        assert!(max_drift < 1e-3, "energy drift {max_drift}");
    }
}
