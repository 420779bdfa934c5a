//! Macrocell grid partition: maps world positions to owning ranks and
//! carves per-rank field blocks with a one-vertex halo.

use super::field::{cell_and_frac, lerp_cell, VectorField};

/// Who owns a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Rank(usize),
    /// Beyond the field domain.
    Outside,
}

/// A regular grid of macrocells over the field domain; every macrocell maps
/// to exactly one rank. Shared faces belong to the lower-index cell.
#[derive(Debug, Clone)]
pub struct GridPartition {
    macro_dims: [usize; 3],
    mapping: Vec<u32>,
    origin: [f64; 3],
    domain_max: [f64; 3],
    cell_size: [f64; 3],
    num_ranks: usize,
}

impl GridPartition {
    /// One macrocell per rank, balanced factorization of `num_ranks` into a
    /// 3D grid, identity mapping.
    pub fn for_ranks(num_ranks: usize, origin: [f64; 3], domain_max: [f64; 3]) -> Self {
        let macro_dims = balanced_dims(num_ranks);
        Self::with_mapping(macro_dims, (0..num_ranks as u32).collect(), origin, domain_max)
    }

    pub fn with_mapping(
        macro_dims: [usize; 3],
        mapping: Vec<u32>,
        origin: [f64; 3],
        domain_max: [f64; 3],
    ) -> Self {
        assert_eq!(mapping.len(), macro_dims[0] * macro_dims[1] * macro_dims[2]);
        let num_ranks = mapping.iter().map(|&r| r as usize + 1).max().unwrap_or(1);
        let cell_size = [
            (domain_max[0] - origin[0]) / macro_dims[0] as f64,
            (domain_max[1] - origin[1]) / macro_dims[1] as f64,
            (domain_max[2] - origin[2]) / macro_dims[2] as f64,
        ];
        GridPartition { macro_dims, mapping, origin, domain_max, cell_size, num_ranks }
    }

    pub fn num_ranks(&self) -> usize {
        self.num_ranks
    }

    pub fn macro_dims(&self) -> [usize; 3] {
        self.macro_dims
    }

    /// Macrocell containing `pos`; positions exactly on a shared face fall
    /// into the lower-index cell.
    pub fn macrocell_of(&self, pos: [f64; 3]) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            if pos[a] < self.origin[a] || pos[a] > self.domain_max[a] {
                return None;
            }
            let u = (pos[a] - self.origin[a]) / self.cell_size[a];
            // upper-inclusive cells: ceil(u) - 1, clamped at the domain edge
            let c = (u.ceil() - 1.0).max(0.0) as usize;
            cell[a] = c.min(self.macro_dims[a] - 1);
        }
        Some(cell)
    }

    pub fn owner_of(&self, pos: [f64; 3]) -> Owner {
        match self.macrocell_of(pos) {
            None => Owner::Outside,
            Some([i, j, k]) => {
                let id = i + self.macro_dims[0] * (j + self.macro_dims[1] * k);
                Owner::Rank(self.mapping[id] as usize)
            }
        }
    }

    /// Macrocells mapped to `rank`.
    pub fn cells_of_rank(&self, rank: usize) -> Vec<[usize; 3]> {
        let mut cells = Vec::new();
        for k in 0..self.macro_dims[2] {
            for j in 0..self.macro_dims[1] {
                for i in 0..self.macro_dims[0] {
                    let id = i + self.macro_dims[0] * (j + self.macro_dims[1] * k);
                    if self.mapping[id] as usize == rank {
                        cells.push([i, j, k]);
                    }
                }
            }
        }
        cells
    }

    /// Vertex range (inclusive, without halo) a rank's block must store so
    /// every position inside its macrocells can be sampled.
    pub fn rank_vertex_range(&self, rank: usize, dims: [usize; 3], spacing: [f64; 3]) -> ([usize; 3], [usize; 3]) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for cell in self.cells_of_rank(rank) {
            for a in 0..3 {
                let w_lo = cell[a] as f64 * self.cell_size[a];
                let w_hi = (cell[a] + 1) as f64 * self.cell_size[a];
                let v_lo = (w_lo / spacing[a]).floor().max(0.0) as usize;
                let v_hi = ((w_hi / spacing[a]).floor() as usize + 1).min(dims[a] - 1);
                lo[a] = lo[a].min(v_lo);
                hi[a] = hi[a].max(v_hi);
            }
        }
        (lo, hi)
    }
}

/// Factor `n` into a 3D grid with near-equal extents (largest factors on x).
fn balanced_dims(n: usize) -> [usize; 3] {
    let mut best = [n, 1, 1];
    let mut best_spread = n as i64;
    for a in 1..=n {
        if !n.is_multiple_of(a) {
            continue;
        }
        let rem = n / a;
        for b in 1..=rem {
            if !rem.is_multiple_of(b) {
                continue;
            }
            let c = rem / b;
            let mut f = [a, b, c];
            f.sort_unstable_by(|x, y| y.cmp(x));
            let spread = (f[0] - f[2]) as i64;
            if spread < best_spread {
                best_spread = spread;
                best = f;
            }
        }
    }
    best
}

/// Result of sampling a rank's field block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockSample {
    Value([f64; 3]),
    /// Inside the domain but not covered by this block (beyond the halo).
    OutsideBlock([f64; 3]),
    /// Beyond the global field domain.
    OutsideDomain,
}

/// One rank's slice of the vertex grid plus a one-vertex halo.
///
/// Sampling is referenced against the global origin, so a position sampled
/// through any block yields bit-identical results to sampling the full
/// field.
#[derive(Debug, Clone)]
pub struct FieldBlock {
    global_dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    halo_lo: [usize; 3],
    stored_dims: [usize; 3],
    values: Vec<[f64; 3]>,
}

impl FieldBlock {
    /// Copy vertices `[lo, hi]` (inclusive) out of `field`, extended by a
    /// one-vertex halo clamped to the grid.
    pub fn extract(field: &VectorField, lo: [usize; 3], hi: [usize; 3]) -> Self {
        let dims = field.dims();
        let halo_lo = [lo[0].saturating_sub(1), lo[1].saturating_sub(1), lo[2].saturating_sub(1)];
        let halo_hi = [
            (hi[0] + 1).min(dims[0] - 1),
            (hi[1] + 1).min(dims[1] - 1),
            (hi[2] + 1).min(dims[2] - 1),
        ];
        let stored_dims = [
            halo_hi[0] - halo_lo[0] + 1,
            halo_hi[1] - halo_lo[1] + 1,
            halo_hi[2] - halo_lo[2] + 1,
        ];
        let mut values = Vec::with_capacity(stored_dims[0] * stored_dims[1] * stored_dims[2]);
        for z in 0..stored_dims[2] {
            for y in 0..stored_dims[1] {
                for x in 0..stored_dims[0] {
                    values.push(field.vertex(halo_lo[0] + x, halo_lo[1] + y, halo_lo[2] + z));
                }
            }
        }
        FieldBlock {
            global_dims: dims,
            spacing: field.spacing(),
            origin: field.origin(),
            halo_lo,
            stored_dims,
            values,
        }
    }

    /// The whole field as a single block (single-rank runs).
    pub fn whole(field: &VectorField) -> Self {
        let dims = field.dims();
        Self::extract(field, [0, 0, 0], [dims[0] - 1, dims[1] - 1, dims[2] - 1])
    }

    pub fn sample(&self, pos: [f64; 3]) -> BlockSample {
        let cf = match cell_and_frac(self.global_dims, self.origin, self.spacing, pos) {
            None => return BlockSample::OutsideDomain,
            Some(cf) => cf,
        };
        for a in 0..3 {
            // the lerp touches vertices cell and cell+1
            if cf.cell[a] < self.halo_lo[a] || cf.cell[a] + 1 > self.halo_lo[a] + self.stored_dims[a] - 1 {
                return BlockSample::OutsideBlock(pos);
            }
        }
        let v = lerp_cell(&cf, |x, y, z| {
            let lx = x - self.halo_lo[0];
            let ly = y - self.halo_lo[1];
            let lz = z - self.halo_lo[2];
            self.values[lx + self.stored_dims[0] * (ly + self.stored_dims[1] * lz)]
        });
        BlockSample::Value(v)
    }

    pub fn stored_dims(&self) -> [usize; 3] {
        self.stored_dims
    }
}
