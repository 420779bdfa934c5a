//! Classical 4th-order Runge-Kutta stepping over sampled vector fields.

use super::field::VectorField;
use super::partition::{BlockSample, FieldBlock};

/// Why a particle stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// A stage sampled outside the field domain.
    OutOfDomain,
    /// The step moved less than the epsilon threshold.
    DidNotMove,
}

/// Outcome of one RK4 step against the full field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepResult {
    Moved([f64; 3]),
    Terminated(Termination),
}

/// Outcome of one RK4 step against a rank's block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockStep {
    Moved([f64; 3]),
    Terminated(Termination),
    /// A stage landed inside the domain but beyond this block's halo; the
    /// step must be retried by the block owning the given position.
    NeedsBlock([f64; 3]),
}

fn axpy(p: [f64; 3], s: f64, v: [f64; 3]) -> [f64; 3] {
    [p[0] + s * v[0], p[1] + s * v[1], p[2] + s * v[2]]
}

/// One classical RK4 step: `pos + h/6 (k1 + 2 k2 + 2 k3 + k4)`.
///
/// Terminates when a stage samples out of bounds or the step displacement
/// falls below `epsilon_move`.
pub fn rk4_step(field: &VectorField, pos: [f64; 3], h: f64, epsilon_move: f64) -> StepResult {
    debug_assert!(h > 0.0);
    let sample = |p: [f64; 3]| field.sample(p);
    let k1 = match sample(pos) {
        Some(v) => v,
        None => return StepResult::Terminated(Termination::OutOfDomain),
    };
    let k2 = match sample(axpy(pos, h / 2.0, k1)) {
        Some(v) => v,
        None => return StepResult::Terminated(Termination::OutOfDomain),
    };
    let k3 = match sample(axpy(pos, h / 2.0, k2)) {
        Some(v) => v,
        None => return StepResult::Terminated(Termination::OutOfDomain),
    };
    let k4 = match sample(axpy(pos, h, k3)) {
        Some(v) => v,
        None => return StepResult::Terminated(Termination::OutOfDomain),
    };
    finish_step(pos, h, k1, k2, k3, k4, epsilon_move)
        .map_or(StepResult::Terminated(Termination::DidNotMove), StepResult::Moved)
}

/// Block-local variant of [`rk4_step`]; arithmetic is bit-identical, only
/// the sampling source differs.
pub fn rk4_step_block(
    block: &FieldBlock,
    pos: [f64; 3],
    h: f64,
    epsilon_move: f64,
) -> BlockStep {
    debug_assert!(h > 0.0);
    let stage = |p: [f64; 3]| match block.sample(p) {
        BlockSample::Value(v) => Ok(v),
        BlockSample::OutsideDomain => Err(BlockStep::Terminated(Termination::OutOfDomain)),
        BlockSample::OutsideBlock(q) => Err(BlockStep::NeedsBlock(q)),
    };
    let k1 = match stage(pos) {
        Ok(v) => v,
        Err(out) => return out,
    };
    let k2 = match stage(axpy(pos, h / 2.0, k1)) {
        Ok(v) => v,
        Err(out) => return out,
    };
    let k3 = match stage(axpy(pos, h / 2.0, k2)) {
        Ok(v) => v,
        Err(out) => return out,
    };
    let k4 = match stage(axpy(pos, h, k3)) {
        Ok(v) => v,
        Err(out) => return out,
    };
    finish_step(pos, h, k1, k2, k3, k4, epsilon_move)
        .map_or(BlockStep::Terminated(Termination::DidNotMove), BlockStep::Moved)
}

fn finish_step(
    pos: [f64; 3],
    h: f64,
    k1: [f64; 3],
    k2: [f64; 3],
    k3: [f64; 3],
    k4: [f64; 3],
    epsilon_move: f64,
) -> Option<[f64; 3]> {
    let mut new_pos = [0f64; 3];
    let mut dist2 = 0f64;
    for a in 0..3 {
        let d = h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        new_pos[a] = pos[a] + d;
        dist2 += d * d;
    }
    (dist2.sqrt() >= epsilon_move).then_some(new_pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamlines::field::{constant_field, rotation_field};

    #[test]
    fn constant_field_steps_exactly() {
        // RK4 is exact for constant fields: pos + h * v
        let field = constant_field(8, [1.0, 0.0, 0.0]);
        match rk4_step(&field, [0.2, 0.5, 0.5], 0.1, 1e-12) {
            StepResult::Moved(p) => {
                assert!((p[0] - 0.3).abs() < 1e-15);
                assert_eq!(p[1], 0.5);
                assert_eq!(p[2], 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_field_terminates_via_epsilon() {
        let field = constant_field(8, [0.0, 0.0, 0.0]);
        assert_eq!(
            rk4_step(&field, [0.5, 0.5, 0.5], 0.1, 1e-9),
            StepResult::Terminated(Termination::DidNotMove)
        );
    }

    #[test]
    fn stage_beyond_domain_terminates() {
        let field = constant_field(8, [10.0, 0.0, 0.0]);
        // k4 stage at pos + h*v jumps past the domain edge
        assert_eq!(
            rk4_step(&field, [0.9, 0.5, 0.5], 0.05, 1e-12),
            StepResult::Terminated(Termination::OutOfDomain)
        );
    }

    #[test]
    fn circle_closure_is_fourth_order_accurate() {
        // v = (-y, x, 0): exact orbit of radius 1. 628 steps of h = 2*pi/628
        // return to the start with only the RK4 truncation error.
        let field = rotation_field(65, 2.0, [0.0; 3]);
        let steps = 628usize;
        let h = std::f64::consts::TAU / steps as f64;
        let mut pos = [1.0, 0.0, 0.0];
        for _ in 0..steps {
            match rk4_step(&field, pos, h, 1e-15) {
                StepResult::Moved(p) => pos = p,
                other => panic!("terminated early: {other:?}"),
            }
        }
        let err = ((pos[0] - 1.0).powi(2) + pos[1].powi(2) + pos[2].powi(2)).sqrt();
        assert!(err < 1e-3, "closure error {err}");
        // truncation-only closure sits at the h^4 scale
        assert!(err < 1e-6, "closure error {err} larger than the h^4 scale");
    }
}
