//! Morton (Z-order) keys over fixed global bounds and the key-range
//! decomposition of the domain across ranks.
//!
//! Positions quantize to 10 bits per axis; the 30-bit key interleaves the
//! coordinate bits with x in bit 0. The owner of any position is computable
//! from the position alone.

/// Bits per axis; keys span [0, 2^30).
pub const MORTON_BITS: u32 = 10;
pub const MORTON_SIDE: u32 = 1 << MORTON_BITS;
pub const KEY_SPACE: u64 = 1 << (3 * MORTON_BITS);

/// Fixed axis-aligned global bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds3 {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Bounds3 {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        assert!((0..3).all(|a| hi[a] > lo[a]), "degenerate bounds");
        Bounds3 { lo, hi }
    }

    pub fn cube(half: f64) -> Self {
        Bounds3::new([-half; 3], [half; 3])
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn max_side(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    /// Closest point of the box to `p` (clamp per axis).
    pub fn nearest_point(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
            p[2].clamp(self.lo[2], self.hi[2]),
        ]
    }

    pub fn union(&self, other: &Bounds3) -> Bounds3 {
        Bounds3 {
            lo: [
                self.lo[0].min(other.lo[0]),
                self.lo[1].min(other.lo[1]),
                self.lo[2].min(other.lo[2]),
            ],
            hi: [
                self.hi[0].max(other.hi[0]),
                self.hi[1].max(other.hi[1]),
                self.hi[2].max(other.hi[2]),
            ],
        }
    }
}

/// Spread the low 10 bits of `v` so consecutive bits land 3 apart.
fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0x3ff;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    x = (x | (x << 2)) & 0x0924_9249;
    x
}

fn compact_bits(x: u64) -> u32 {
    let mut v = x & 0x0924_9249;
    v = (v | (v >> 2)) & 0x030c_30c3;
    v = (v | (v >> 4)) & 0x0300_f00f;
    v = (v | (v >> 8)) & 0x0300_00ff;
    v = (v | (v >> 16)) & 0x3ff;
    v as u32
}

/// Interleave quantized coordinates into a 30-bit key (x in bit 0).
pub fn interleave(q: [u32; 3]) -> u64 {
    spread_bits(q[0]) | (spread_bits(q[1]) << 1) | (spread_bits(q[2]) << 2)
}

/// Inverse of [`interleave`].
pub fn deinterleave(key: u64) -> [u32; 3] {
    [compact_bits(key), compact_bits(key >> 1), compact_bits(key >> 2)]
}

/// Quantize a position to the 10-bit lattice, clamping positions outside
/// the bounds onto the boundary quanta.
pub fn quantize(bounds: &Bounds3, pos: [f64; 3]) -> [u32; 3] {
    let e = bounds.extent();
    let mut q = [0u32; 3];
    for a in 0..3 {
        let u = (pos[a] - bounds.lo[a]) / e[a] * MORTON_SIDE as f64;
        q[a] = (u.floor().max(0.0) as u32).min(MORTON_SIDE - 1);
    }
    q
}

/// 30-bit Morton key of a position (clamped onto the bounds).
pub fn morton_key(bounds: &Bounds3, pos: [f64; 3]) -> u64 {
    interleave(quantize(bounds, pos))
}

/// Half-open key intervals assigning every Morton key to one rank.
#[derive(Debug, Clone)]
pub struct MortonPartition {
    bounds: Bounds3,
    /// `starts[r]..starts[r+1]` is rank r's interval; `starts[num_ranks]`
    /// is the key-space size.
    starts: Vec<u64>,
}

impl MortonPartition {
    /// Equal key ranges (remainder spread over the first ranks).
    pub fn equal_ranges(num_ranks: usize, bounds: Bounds3) -> Self {
        assert!(num_ranks >= 1);
        let base = KEY_SPACE / num_ranks as u64;
        let rem = KEY_SPACE % num_ranks as u64;
        let mut starts = Vec::with_capacity(num_ranks + 1);
        let mut at = 0u64;
        for r in 0..num_ranks as u64 {
            starts.push(at);
            at += base + if r < rem { 1 } else { 0 };
        }
        starts.push(KEY_SPACE);
        MortonPartition { bounds, starts }
    }

    pub fn num_ranks(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn bounds(&self) -> &Bounds3 {
        &self.bounds
    }

    pub fn key_range(&self, rank: usize) -> (u64, u64) {
        (self.starts[rank], self.starts[rank + 1])
    }

    /// Rank whose interval contains `key` (binary search).
    pub fn owner_of_key(&self, key: u64) -> usize {
        debug_assert!(key < KEY_SPACE);
        match self.starts.binary_search(&key) {
            Ok(i) if i == self.starts.len() - 1 => i - 1,
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Rank owning `pos`; total over all space because keys clamp onto the
    /// bounds.
    pub fn owner_of_particle(&self, pos: [f64; 3]) -> usize {
        self.owner_of_key(morton_key(&self.bounds, pos))
    }

    /// World-space bounding box of a rank's key interval.
    ///
    /// The interval is decomposed into maximal aligned octree cells; the
    /// box is the union of their cell boxes. Conservative for MAC purposes:
    /// every particle owned by the rank lies inside.
    pub fn rank_bbox(&self, rank: usize) -> Bounds3 {
        let (start, end) = self.key_range(rank);
        let mut out: Option<Bounds3> = None;
        let mut at = start;
        while at < end {
            // largest aligned cell starting at `at` that fits in the range
            let mut cell_keys = 1u64;
            while cell_keys < KEY_SPACE {
                let next = cell_keys * 8;
                if at % next != 0 || at + next > end {
                    break;
                }
                cell_keys = next;
            }
            let cell = self.cell_box(at, cell_keys);
            out = Some(match out {
                None => cell,
                Some(acc) => acc.union(&cell),
            });
            at += cell_keys;
        }
        out.expect("non-empty key range")
    }

    /// Box of the aligned cell `[first, first + cell_keys)`.
    fn cell_box(&self, first: u64, cell_keys: u64) -> Bounds3 {
        // cell side in quanta: cell_keys = side^3
        let side = (cell_keys as f64).cbrt().round() as u32;
        debug_assert_eq!((side as u64).pow(3), cell_keys);
        let q = deinterleave(first);
        let e = self.bounds.extent();
        let unit = [
            e[0] / MORTON_SIDE as f64,
            e[1] / MORTON_SIDE as f64,
            e[2] / MORTON_SIDE as f64,
        ];
        Bounds3 {
            lo: [
                self.bounds.lo[0] + q[0] as f64 * unit[0],
                self.bounds.lo[1] + q[1] as f64 * unit[1],
                self.bounds.lo[2] + q[2] as f64 * unit[2],
            ],
            hi: [
                self.bounds.lo[0] + (q[0] + side) as f64 * unit[0],
                self.bounds.lo[1] + (q[1] + side) as f64 * unit[1],
                self.bounds.lo[2] + (q[2] + side) as f64 * unit[2],
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_endpoints() {
        let b = Bounds3::new([0.0; 3], [1.0; 3]);
        assert_eq!(morton_key(&b, [0.0, 0.0, 0.0]), 0);
        assert_eq!(morton_key(&b, [1.0, 1.0, 1.0]), KEY_SPACE - 1);
    }

    #[test]
    fn one_bit_toy_interleave() {
        // quantized coords (1,0,0) with one bit per axis: key 0b001
        assert_eq!(interleave([1, 0, 0]) & 0b111, 0b001);
        assert_eq!(interleave([0, 1, 0]) & 0b111, 0b010);
        assert_eq!(interleave([0, 0, 1]) & 0b111, 0b100);
    }

    #[test]
    fn interleave_roundtrip() {
        for q in [[0u32, 0, 0], [1023, 1023, 1023], [5, 700, 33], [512, 1, 1022]] {
            assert_eq!(deinterleave(interleave(q)), q);
        }
    }

    #[test]
    fn clamped_positions_stay_owned() {
        let b = Bounds3::new([0.0; 3], [1.0; 3]);
        let p = MortonPartition::equal_ranges(3, b);
        for pos in [[-5.0, 0.5, 0.5], [0.5, 2.0, 0.5], [9.0, 9.0, 9.0]] {
            let r = p.owner_of_particle(pos);
            assert!(r < 3);
        }
        assert_eq!(p.owner_of_particle([-1.0, -1.0, -1.0]), 0);
        assert_eq!(p.owner_of_particle([2.0, 2.0, 2.0]), 2);
    }

    #[test]
    fn owner_matches_linear_scan_oracle() {
        let b = Bounds3::new([-1.0; 3], [1.0; 3]);
        for num_ranks in [1usize, 2, 3, 4, 7, 8] {
            let p = MortonPartition::equal_ranges(num_ranks, b);
            let linear_owner = |key: u64| -> usize {
                (0..num_ranks)
                    .find(|&r| {
                        let (s, e) = p.key_range(r);
                        key >= s && key < e
                    })
                    .unwrap()
            };
            // endpoints of each range plus a pseudo-random sample
            let mut keys: Vec<u64> = Vec::new();
            for r in 0..num_ranks {
                let (s, e) = p.key_range(r);
                keys.extend([s, e - 1]);
            }
            let mut state = 9u64;
            for _ in 0..200 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                keys.push(state % KEY_SPACE);
            }
            for key in keys {
                assert_eq!(p.owner_of_key(key), linear_owner(key), "key {key}");
            }
        }
    }

    #[test]
    fn ranges_partition_key_space() {
        for num_ranks in [1usize, 2, 5, 8] {
            let p = MortonPartition::equal_ranges(num_ranks, Bounds3::cube(1.0));
            let mut total = 0u64;
            for r in 0..num_ranks {
                let (s, e) = p.key_range(r);
                assert!(e > s);
                assert_eq!(s, total);
                total = e;
            }
            assert_eq!(total, KEY_SPACE);
        }
    }

    #[test]
    fn rank_bbox_contains_owned_positions() {
        let b = Bounds3::new([0.0; 3], [2.0; 3]);
        for num_ranks in [2usize, 3, 4, 8] {
            let p = MortonPartition::equal_ranges(num_ranks, b);
            let mut state = 77u64;
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            for _ in 0..500 {
                let pos = [2.0 * next(), 2.0 * next(), 2.0 * next()];
                let r = p.owner_of_particle(pos);
                let bbox = p.rank_bbox(r);
                for a in 0..3 {
                    assert!(
                        pos[a] >= bbox.lo[a] - 1e-12 && pos[a] <= bbox.hi[a] + 1e-12,
                        "rank {r} bbox {bbox:?} misses {pos:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn power_of_two_rank_bboxes_tile_cleanly() {
        let b = Bounds3::new([0.0; 3], [1.0; 3]);
        let p = MortonPartition::equal_ranges(2, b);
        let b0 = p.rank_bbox(0);
        let b1 = p.rank_bbox(1);
        // rank 0 holds the z < 0.5 octants, rank 1 the upper half
        assert!((b0.hi[2] - 0.5).abs() < 1e-12);
        assert!((b1.lo[2] - 0.5).abs() < 1e-12);
    }
}
