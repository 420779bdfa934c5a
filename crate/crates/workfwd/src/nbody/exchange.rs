//! Adaptive essential-tree exchange.
//!
//! Round 0 broadcasts each rank's root multipole to every peer. A receiver
//! keeps any virtual particle that passes the conservative opening
//! criterion (evaluated at the nearest point of the receiving rank's domain
//! box, so acceptance holds for every local evaluation point) and answers
//! the rest with refinement requests. A responder replaces each refused
//! node by its children: subtrees holding a single particle travel as exact
//! point masses, larger ones as their aggregates. The loop runs until the
//! request context reports global zero.
//!
//! Both ends evaluate the same acceptance predicate on the same numbers, so
//! a responder can reconstruct which of its outstanding nodes were refused
//! from the partition geometry alone; the per-peer request count is used to
//! cross-check that reconstruction.

use crate::forward::{ForwardError, TypedContext};

use super::forces::mac_accept;
use super::morton::{Bounds3, MortonPartition};
use super::tree::{BhTree, NodeKind};
use super::{RefinementReq, VirtualParticle};

#[derive(Debug)]
pub enum ExchangeError {
    Forward(ForwardError),
    /// The mutual-determinism cross-check failed or a refinement addressed
    /// a rank that sent nothing.
    Protocol(String),
    /// The refinement loop exceeded its round guard.
    RoundGuard(u64),
}

impl std::fmt::Display for ExchangeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExchangeError::Forward(e) => write!(f, "{e}"),
            ExchangeError::Protocol(m) => write!(f, "exchange protocol error: {m}"),
            ExchangeError::RoundGuard(n) => {
                write!(f, "essential-tree exchange exceeded {n} rounds")
            }
        }
    }
}

impl std::error::Error for ExchangeError {}

impl From<ForwardError> for ExchangeError {
    fn from(e: ForwardError) -> Self {
        ExchangeError::Forward(e)
    }
}

/// Conservative acceptance for the exchange: the opening rule evaluated at
/// the nearest point of the requesting rank's domain box to the node's
/// center of mass. Passing here implies passing at every point inside the
/// box.
pub fn conservative_accept(smax: f64, com: [f64; 3], requester: &Bounds3, theta: f64) -> bool {
    mac_accept(smax, com, requester.nearest_point(com), theta)
}

/// Run the exchange for this rank's `tree`. Returns the imported virtual
/// particles: every remote node needed so local force evaluations never
/// require refinement that did not happen.
pub fn essential_tree_exchange(
    tree: &BhTree,
    vctx: &mut TypedContext<VirtualParticle>,
    rctx: &mut TypedContext<RefinementReq>,
    partition: &MortonPartition,
    theta: f64,
) -> Result<Vec<VirtualParticle>, ExchangeError> {
    let comm = vctx.comm().clone();
    let num_ranks = comm.num_ranks();
    let me = comm.rank();
    if num_ranks == 1 {
        return Ok(Vec::new());
    }

    let bboxes: Vec<Bounds3> = (0..num_ranks).map(|r| partition.rank_bbox(r)).collect();
    let my_bbox = bboxes[me];

    // per-peer set of tree nodes sent and not yet resolved
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new(); num_ranks];
    {
        let view = vctx.view();
        if let Some(root) = tree.root() {
            let node = tree.node(root);
            for q in 0..num_ranks {
                if q == me {
                    continue;
                }
                let v = VirtualParticle {
                    pos: node.com,
                    mass: node.mass,
                    smax: node.smax,
                    source_rank: me as u32,
                };
                if !view.emit_outgoing(&v, q) {
                    return Err(ExchangeError::Protocol("virtual queue overflow".into()));
                }
                frontier[q].push(root);
            }
        }
    }
    vctx.forward()?;

    let mut accepted: Vec<VirtualParticle> = Vec::new();
    let round_guard = 64u64;
    let mut rounds = 0u64;
    loop {
        rounds += 1;
        if rounds > round_guard {
            return Err(ExchangeError::RoundGuard(round_guard));
        }

        // classify received virtuals; refuse what the conservative MAC
        // cannot accept
        {
            let rview = rctx.view();
            for v in vctx.incoming_items() {
                if conservative_accept(v.smax, v.pos, &my_bbox, theta) {
                    accepted.push(v);
                } else {
                    debug_assert!(v.smax > 0.0, "point atoms are always accepted");
                    let req = RefinementReq { sender_rank: me as u32 };
                    if !rview.emit_outgoing(&req, v.source_rank as usize) {
                        return Err(ExchangeError::Protocol("request queue overflow".into()));
                    }
                }
            }
        }
        let outstanding = rctx.forward()?;
        if outstanding == 0 {
            return Ok(accepted);
        }

        // answer refinement requests: replace refused frontier nodes by
        // their children
        let mut req_counts = vec![0u64; num_ranks];
        for req in rctx.incoming_items() {
            let q = req.sender_rank as usize;
            if q >= num_ranks || q == me {
                return Err(ExchangeError::Protocol(format!("bad request sender {q}")));
            }
            req_counts[q] += 1;
        }
        {
            let view = vctx.view();
            for q in 0..num_ranks {
                let pending = std::mem::take(&mut frontier[q]);
                if pending.is_empty() {
                    if req_counts[q] > 0 {
                        return Err(ExchangeError::Protocol(format!(
                            "rank {q} requested refinement but nothing is outstanding"
                        )));
                    }
                    continue;
                }
                let (refused, _kept): (Vec<u32>, Vec<u32>) = pending.into_iter().partition(|&id| {
                    let n = tree.node(id);
                    !conservative_accept(n.smax, n.com, &bboxes[q], theta)
                });
                if refused.len() as u64 != req_counts[q] {
                    return Err(ExchangeError::Protocol(format!(
                        "rank {q} sent {} requests, geometry implies {}",
                        req_counts[q],
                        refused.len()
                    )));
                }
                for id in refused {
                    emit_children(tree, id, me, q, &view, &mut frontier[q])?;
                }
            }
        }
        vctx.forward()?;
    }
}

/// Emit the children of a refused node to rank `q`: single-particle
/// subtrees as exact points, everything else as the child aggregate that
/// stays on the frontier.
fn emit_children(
    tree: &BhTree,
    id: u32,
    me: usize,
    q: usize,
    view: &crate::forward::EmitView<'_, VirtualParticle>,
    next_frontier: &mut Vec<u32>,
) -> Result<(), ExchangeError> {
    let send = |v: VirtualParticle| -> Result<(), ExchangeError> {
        if !view.emit_outgoing(&v, q) {
            return Err(ExchangeError::Protocol("virtual queue overflow".into()));
        }
        Ok(())
    };
    let node = tree.node(id);
    match &node.kind {
        NodeKind::Leaf { points } => {
            // refusing a leaf bottoms out at its particles
            for &pi in points {
                let a = tree.atom(pi);
                send(VirtualParticle {
                    pos: a.pos,
                    mass: a.mass,
                    smax: 0.0,
                    source_rank: me as u32,
                })?;
            }
        }
        NodeKind::Internal { children } => {
            for child in children.iter().flatten() {
                let c = tree.node(*child);
                if let NodeKind::Leaf { points } = &c.kind {
                    if points.len() == 1 {
                        // a single particle is its own exact aggregate
                        let a = tree.atom(points[0]);
                        send(VirtualParticle {
                            pos: a.pos,
                            mass: a.mass,
                            smax: 0.0,
                            source_rank: me as u32,
                        })?;
                        continue;
                    }
                }
                send(VirtualParticle {
                    pos: c.com,
                    mass: c.mass,
                    smax: c.smax,
                    source_rank: me as u32,
                })?;
                next_frontier.push(*child);
            }
        }
    }
    Ok(())
}
