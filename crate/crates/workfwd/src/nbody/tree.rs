//! Morton-ordered octree over fixed global bounds with bottom-up mass,
//! center-of-mass and (optional) traceless-quadrupole aggregation.
//!
//! Nodes are dyadic cells of the global box, subdivided until a cell holds
//! at most one point or the Morton resolution is exhausted. Cell geometry
//! (and therefore `smax`) depends only on the global bounds, never on the
//! particles, so two ranks holding the same particle subset build
//! bit-identical aggregates for it.
//!
//! Besides point particles the builder accepts aggregate atoms pinned to a
//! fixed cell depth (imported remote multipoles); they contribute to the
//! aggregates of their node and its ancestors but are never subdivided.

use super::morton::{interleave, quantize, Bounds3, MORTON_BITS};

/// One input to a tree build: a point mass or a pinned aggregate.
#[derive(Debug, Clone, Copy)]
pub struct Atom {
    /// Position (point) or center of mass (aggregate).
    pub pos: [f64; 3],
    pub mass: f64,
    /// 0 for points; for aggregates, the max side length of the source
    /// cell, which pins the atom at the matching depth.
    pub smax: f64,
    /// Traceless quadrupole about `pos` (zeros for points and for imported
    /// aggregates, whose quadrupole is unknown).
    pub quad: [f64; 6],
    /// Index into the caller's particle array for local points.
    pub local_index: Option<u32>,
}

impl Atom {
    pub fn point(pos: [f64; 3], mass: f64, local_index: Option<u32>) -> Self {
        Atom { pos, mass, smax: 0.0, quad: [0.0; 6], local_index }
    }
}

#[derive(Debug)]
pub enum NodeKind {
    /// Point atoms live here; at most one unless the depth limit is hit.
    Leaf { points: Vec<u32> },
    Internal { children: [Option<u32>; 8] },
}

/// One octree node: a dyadic cell with aggregated source data.
#[derive(Debug)]
pub struct BhNode {
    pub depth: u32,
    /// Cell anchor in Morton quanta (2^10 lattice).
    pub anchor: [u32; 3],
    pub mass: f64,
    pub com: [f64; 3],
    /// Max side length of the cell box.
    pub smax: f64,
    /// Traceless quadrupole about `com`.
    pub quad: [f64; 6],
    /// Aggregate atoms pinned to exactly this cell.
    pub pinned: Vec<u32>,
    pub kind: NodeKind,
}

/// Octree plus the atom array it was built over.
#[derive(Debug)]
pub struct BhTree {
    bounds: Bounds3,
    atoms: Vec<Atom>,
    nodes: Vec<BhNode>,
    root: Option<u32>,
}

impl BhTree {
    /// Build over point particles given as (position, mass) pairs.
    pub fn build_points(bounds: Bounds3, points: &[([f64; 3], f64)]) -> Self {
        let atoms: Vec<Atom> = points
            .iter()
            .enumerate()
            .map(|(i, (pos, mass))| Atom::point(*pos, *mass, Some(i as u32)))
            .collect();
        Self::build(bounds, atoms)
    }

    /// Build over arbitrary atoms.
    pub fn build(bounds: Bounds3, atoms: Vec<Atom>) -> Self {
        let mut tree = BhTree { bounds, atoms, nodes: Vec::new(), root: None };
        if tree.atoms.is_empty() {
            return tree;
        }
        // canonical order: Morton key, then position bits, then mass bits,
        // so identical atom sets aggregate identically regardless of input
        // order
        let mut order: Vec<u32> = (0..tree.atoms.len() as u32).collect();
        let sort_key = |i: &u32| {
            let a = &tree.atoms[*i as usize];
            let key = interleave(quantize(&tree.bounds, a.pos));
            (
                key,
                a.pos[0].to_bits(),
                a.pos[1].to_bits(),
                a.pos[2].to_bits(),
                a.mass.to_bits(),
                a.smax.to_bits(),
            )
        };
        order.sort_by_key(sort_key);
        let keys: Vec<u64> = order
            .iter()
            .map(|&i| interleave(quantize(&tree.bounds, tree.atoms[i as usize].pos)))
            .collect();
        let root = tree.build_node(&order, &keys, 0, order.len(), 0, 0);
        tree.root = root;
        tree
    }

    /// Recursive build over `order[start..end]` (Morton-sorted atoms) for
    /// the cell with the given key prefix at `depth`.
    fn build_node(
        &mut self,
        order: &[u32],
        keys: &[u64],
        start: usize,
        end: usize,
        depth: u32,
        prefix: u64,
    ) -> Option<u32> {
        if start == end {
            return None;
        }
        let pin_side = self.side_at(depth);
        let mut pinned = Vec::new();
        let mut points = Vec::new();
        let mut descend = Vec::new();
        for k in start..end {
            let idx = order[k];
            let atom = &self.atoms[idx as usize];
            if atom.smax > 0.0 && atom.smax >= pin_side * 0.999_999 {
                // aggregate pinned at this depth
                pinned.push(idx);
            } else if atom.smax > 0.0 {
                descend.push(k);
            } else {
                points.push((k, idx));
            }
        }

        let is_leaf_level = depth == MORTON_BITS || (points.len() <= 1 && descend.is_empty());
        let kind = if is_leaf_level {
            debug_assert!(descend.is_empty() || depth == MORTON_BITS);
            // keep the canonical (content-sorted) order so aggregation sums
            // identically on every rank holding the same set
            let leaf_points: Vec<u32> = points.iter().map(|&(_, idx)| idx).collect();
            // aggregates that could not reach their pin depth (max
            // resolution) stay pinned here
            for k in descend {
                pinned.push(order[k]);
            }
            NodeKind::Leaf { points: leaf_points }
        } else {
            // partition the sorted range by the 3-bit digit at this depth
            let shift = 3 * (MORTON_BITS - depth - 1);
            let mut children: [Option<u32>; 8] = [None; 8];
            let mut at = start;
            for digit in 0..8u64 {
                let child_prefix = (prefix << 3) | digit;
                let mut hi = at;
                while hi < end && (keys[hi] >> shift) == child_prefix {
                    hi += 1;
                }
                // skip atoms pinned at this level when slicing children
                let (lo_c, hi_c) = (at, hi);
                at = hi;
                if lo_c == hi_c {
                    continue;
                }
                children[digit as usize] =
                    self.build_node_filtered(order, keys, lo_c, hi_c, depth + 1, child_prefix, &pinned);
            }
            NodeKind::Internal { children }
        };

        let node = BhNode {
            depth,
            anchor: self.anchor_of(prefix, depth),
            mass: 0.0,
            com: [0.0; 3],
            smax: self.side_at(depth),
            quad: [0.0; 6],
            pinned,
            kind,
        };
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.aggregate(id);
        Some(id)
    }

    /// Child build that excludes atoms already pinned to the parent.
    #[allow(clippy::too_many_arguments)]
    fn build_node_filtered(
        &mut self,
        order: &[u32],
        keys: &[u64],
        start: usize,
        end: usize,
        depth: u32,
        prefix: u64,
        parent_pinned: &[u32],
    ) -> Option<u32> {
        if parent_pinned.is_empty() {
            return self.build_node(order, keys, start, end, depth, prefix);
        }
        let filtered_order: Vec<u32> = order[start..end]
            .iter()
            .copied()
            .filter(|i| !parent_pinned.contains(i))
            .collect();
        if filtered_order.is_empty() {
            return None;
        }
        let filtered_keys: Vec<u64> = filtered_order
            .iter()
            .map(|&i| interleave(quantize(&self.bounds, self.atoms[i as usize].pos)))
            .collect();
        self.build_node(&filtered_order, &filtered_keys, 0, filtered_order.len(), depth, prefix)
    }

    /// Mass, COM and quadrupole of node `id` from children, pinned atoms
    /// and own points (children first, in digit order).
    fn aggregate(&mut self, id: u32) {
        let (mass, weighted) = {
            let node = &self.nodes[id as usize];
            let mut mass = 0f64;
            let mut weighted = [0f64; 3];
            let mut add = |m: f64, p: [f64; 3]| {
                mass += m;
                weighted[0] += m * p[0];
                weighted[1] += m * p[1];
                weighted[2] += m * p[2];
            };
            if let NodeKind::Internal { children } = &node.kind {
                for child in children.iter().flatten() {
                    let c = &self.nodes[*child as usize];
                    add(c.mass, c.com);
                }
            }
            for &pi in &node.pinned {
                let a = &self.atoms[pi as usize];
                add(a.mass, a.pos);
            }
            if let NodeKind::Leaf { points } = &self.nodes[id as usize].kind {
                for &pi in points {
                    let a = &self.atoms[pi as usize];
                    add(a.mass, a.pos);
                }
            }
            (mass, weighted)
        };
        let com = if mass > 0.0 {
            [weighted[0] / mass, weighted[1] / mass, weighted[2] / mass]
        } else {
            self.cell_center(id)
        };
        let quad = self.aggregate_quadrupole(id, com);
        let node = &mut self.nodes[id as usize];
        node.mass = mass;
        node.com = com;
        node.quad = quad;
    }

    /// Traceless quadrupole about `com`: children shift by the parallel-axis
    /// rule, points contribute directly.
    fn aggregate_quadrupole(&self, id: u32, com: [f64; 3]) -> [f64; 6] {
        let node = &self.nodes[id as usize];
        let mut q = [0f64; 6];
        let mut add_shifted = |qc: &[f64; 6], m: f64, p: [f64; 3]| {
            let d = [p[0] - com[0], p[1] - com[1], p[2] - com[2]];
            let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            q[0] += qc[0] + m * (3.0 * d[0] * d[0] - d2);
            q[1] += qc[1] + m * 3.0 * d[0] * d[1];
            q[2] += qc[2] + m * 3.0 * d[0] * d[2];
            q[3] += qc[3] + m * (3.0 * d[1] * d[1] - d2);
            q[4] += qc[4] + m * 3.0 * d[1] * d[2];
            q[5] += qc[5] + m * (3.0 * d[2] * d[2] - d2);
        };
        if let NodeKind::Internal { children } = &node.kind {
            for child in children.iter().flatten() {
                let c = &self.nodes[*child as usize];
                add_shifted(&c.quad, c.mass, c.com);
            }
        }
        for &pi in &node.pinned {
            let a = &self.atoms[pi as usize];
            add_shifted(&a.quad, a.mass, a.pos);
        }
        if let NodeKind::Leaf { points } = &node.kind {
            for &pi in points {
                let a = &self.atoms[pi as usize];
                add_shifted(&[0.0; 6], a.mass, a.pos);
            }
        }
        q
    }

    fn side_at(&self, depth: u32) -> f64 {
        self.bounds.max_side() / (1u64 << depth) as f64
    }

    fn anchor_of(&self, prefix: u64, depth: u32) -> [u32; 3] {
        // prefix holds 3*depth bits; shift up to full key resolution
        let key = prefix << (3 * (MORTON_BITS - depth));
        let q = super::morton::deinterleave(key);
        [q[0], q[1], q[2]]
    }

    fn cell_center(&self, id: u32) -> [f64; 3] {
        let node = &self.nodes[id as usize];
        let e = self.bounds.extent();
        let cells = (1u32 << node.depth) as f64;
        let mut c = [0f64; 3];
        for a in 0..3 {
            let cell_lo =
                self.bounds.lo[a] + node.anchor[a] as f64 / super::morton::MORTON_SIDE as f64 * e[a];
            c[a] = cell_lo + e[a] / cells / 2.0;
        }
        c
    }

    pub fn bounds(&self) -> &Bounds3 {
        &self.bounds
    }

    pub fn root(&self) -> Option<u32> {
        self.root
    }

    pub fn node(&self, id: u32) -> &BhNode {
        &self.nodes[id as usize]
    }

    pub fn atom(&self, id: u32) -> &Atom {
        &self.atoms[id as usize]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }
}
