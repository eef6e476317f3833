//! Blocked Morton reordering for cache- and contention-friendly point order.
//!
//! Points are quantized to a 21-bit grid, sorted along the Z-order curve,
//! then grouped into fixed-size blocks whose order is shuffled. Intra-block
//! locality survives while spatially adjacent blocks stop being adjacent in
//! memory, which spreads atomic traffic across the framebuffer.

use super::cloud::{bounding_box, PointCloud};
use crate::rng::{key_bits, Stream};
use nalgebra::Vector3;

pub const DEFAULT_BLOCK_SIZE: usize = 128;

const GRID_BITS: u32 = 21;

/// Spreads the low 21 bits of v so consecutive bits land 3 apart.
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaved 63-bit Morton code; x occupies the least significant slot so
/// the curve traverses x fastest.
pub fn morton_code(qx: u64, qy: u64, qz: u64) -> u64 {
    spread_bits(qx) | (spread_bits(qy) << 1) | (spread_bits(qz) << 2)
}

fn quantize(positions: &[Vector3<f64>]) -> Vec<u64> {
    let (lo, hi) = bounding_box(positions);
    let extent = hi - lo;
    let max_q = ((1u64 << GRID_BITS) - 1) as f64;
    let scale = extent.map(|e| if e > 0.0 { max_q / e } else { 0.0 });
    positions
        .iter()
        .map(|p| {
            let q = |c: f64, lo: f64, s: f64| ((c - lo) * s).round().clamp(0.0, max_q) as u64;
            morton_code(
                q(p.x, lo.x, scale.x),
                q(p.y, lo.y, scale.y),
                q(p.z, lo.z, scale.z),
            )
        })
        .collect()
}

/// Computes the blocked Morton permutation: `perm[new] = old`. Ties and the
/// block shuffle are deterministic functions of the input order and seed.
pub fn morton_permutation(
    positions: &[Vector3<f64>],
    block_size: usize,
    seed: u64,
) -> Vec<usize> {
    let block_size = block_size.max(1);
    let codes = quantize(positions);
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));

    let num_blocks = order.len().div_ceil(block_size);
    let mut blocks: Vec<usize> = (0..num_blocks).collect();
    // Fisher-Yates on the block sequence, driven by the keyed counter RNG.
    for i in (1..num_blocks).rev() {
        let j = (key_bits(seed, Stream::Shuffle, i as u64, 0) % (i as u64 + 1)) as usize;
        blocks.swap(i, j);
    }
    blocks
        .into_iter()
        .flat_map(|b| {
            let start = b * block_size;
            let end = (start + block_size).min(order.len());
            order[start..end].iter().copied()
        })
        .collect()
}

/// Returns the reordered cloud plus the permutation that produced it.
pub fn morton_reorder(cloud: &PointCloud, block_size: usize, seed: u64) -> (PointCloud, Vec<usize>) {
    let perm = morton_permutation(&cloud.positions, block_size, seed);
    (cloud.permuted(&perm), perm)
}
