//! World-space radius estimation from local point density.
//!
//! Each point's radius is the median distance to its k nearest neighbors.
//! A uniform grid makes the search near-linear while returning exactly the
//! same neighbors as a brute-force scan.

use super::cloud::bounding_box;
use crate::{Error, Result};
use nalgebra::Vector3;
use std::collections::HashMap;

pub const DEFAULT_NEIGHBORS: usize = 4;

/// Relative floor applied against the bounding-box diagonal so duplicate
/// points still get a positive radius.
const RADIUS_FLOOR_REL: f64 = 1e-9;

pub fn estimate_world_radii(positions: &[Vector3<f64>], k: usize) -> Result<Vec<f64>> {
    let n = positions.len();
    if k == 0 {
        return Err(Error::InvalidArgument("neighbor count must be >= 1".into()));
    }
    if n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "radius estimation needs at least {} points, got {n}",
            k + 1
        )));
    }
    let (lo, hi) = bounding_box(positions);
    let diag = (hi - lo).norm();
    let floor = (RADIUS_FLOOR_REL * diag).max(f64::MIN_POSITIVE);

    // Aim for ~1 point per cell under a uniform distribution.
    let cell = if diag > 0.0 {
        (diag / (n as f64).cbrt()).max(diag * 1e-12)
    } else {
        1.0
    };
    let cell_of = |p: &Vector3<f64>| -> (i64, i64, i64) {
        (
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i);
    }

    let radii = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = cell_of(p);
            // k smallest neighbor distances, kept sorted ascending.
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                continue;
                            };
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let d = (positions[j] - p).norm();
                                if best.len() < k {
                                    let pos = best.partition_point(|&b| b <= d);
                                    best.insert(pos, d);
                                } else if d < best[k - 1] {
                                    let pos = best.partition_point(|&b| b <= d);
                                    best.insert(pos, d);
                                    best.pop();
                                }
                            }
                        }
                    }
                }
                // Rings 0..=r cover every point closer than r*cell, so the
                // current k-th distance is final once it fits inside.
                let complete = best.len() == k && best[k - 1] < ring as f64 * cell;
                let exhausted = ring as f64 * cell > diag + cell;
                if complete || exhausted {
                    break;
                }
                ring += 1;
            }
            debug_assert_eq!(best.len(), k);
            median_sorted(&best).max(floor)
        })
        .collect();
    Ok(radii)
}

/// Median of an ascending slice; even lengths average the middle pair.
fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Brute-force all-pairs reference used by tests.
#[doc(hidden)]
pub fn estimate_world_radii_bruteforce(positions: &[Vector3<f64>], k: usize) -> Result<Vec<f64>> {
    let n = positions.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument("bad kNN configuration".into()));
    }
    let (lo, hi) = bounding_box(positions);
    let floor = (RADIUS_FLOOR_REL * (hi - lo).norm()).max(f64::MIN_POSITIVE);
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median_sorted(&d[..k]).max(floor)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lattice_interior_radius_is_spacing() {
        let positions: Vec<Vector3<f64>> =
            (0..20).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let radii = estimate_world_radii(&positions, 2).unwrap();
        for r in &radii[1..19] {
            assert_relative_eq!(*r, 1.0, epsilon = 1e-12);
        }
        // Endpoints see neighbors at distance 1 and 2.
        assert_relative_eq!(radii[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn cluster_scales_are_recovered() {
        let mut state = 3u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut positions = Vec::new();
        for _ in 0..120 {
            positions.push(Vector3::new(next(), next(), next()));
        }
        for _ in 0..120 {
            positions.push(Vector3::new(100.0 + 0.1 * next(), 0.1 * next(), 0.1 * next()));
        }
        let radii = estimate_world_radii(&positions, DEFAULT_NEIGHBORS).unwrap();
        let oracle = estimate_world_radii_bruteforce(&positions, DEFAULT_NEIGHBORS).unwrap();
        assert_eq!(radii, oracle);
        let mean_a: f64 = radii[..120].iter().sum::<f64>() / 120.0;
        let mean_b: f64 = radii[120..].iter().sum::<f64>() / 120.0;
        let ratio = mean_a / mean_b;
        assert!((7.0..13.0).contains(&ratio), "scale ratio {ratio} not near 10");
    }

    #[test]
    fn five_points_match_bruteforce() {
        let positions = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.5, 0.7, 0.1),
            Vector3::new(0.3, -0.9, 0.4),
            Vector3::new(2.0, 1.0, 1.0),
        ];
        let radii = estimate_world_radii(&positions, 4).unwrap();
        let oracle = estimate_world_radii_bruteforce(&positions, 4).unwrap();
        assert_eq!(radii, oracle);
    }

    #[test]
    fn grid_search_matches_bruteforce_exactly() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        // Mixed density: a tight blob, a shell, and uniform fill.
        let mut positions = Vec::new();
        for _ in 0..400 {
            positions.push(Vector3::new(next() * 4.0, next() * 4.0, next() * 4.0));
        }
        for _ in 0..300 {
            positions.push(Vector3::new(
                2.0 + 0.02 * (next() - 0.5),
                2.0 + 0.02 * (next() - 0.5),
                2.0 + 0.02 * (next() - 0.5),
            ));
        }
        for _ in 0..300 {
            let d = Vector3::new(next() - 0.5, next() - 0.5, next() - 0.5).normalize();
            positions.push(Vector3::new(1.0, 1.0, 1.0) + d * 1.5);
        }
        let radii = estimate_world_radii(&positions, DEFAULT_NEIGHBORS).unwrap();
        let oracle = estimate_world_radii_bruteforce(&positions, DEFAULT_NEIGHBORS).unwrap();
        assert_eq!(radii, oracle);
    }

    #[test]
    fn duplicates_get_floored_positive_radius() {
        let mut positions = vec![Vector3::new(0.0, 0.0, 0.0); 6];
        positions.push(Vector3::new(10.0, 0.0, 0.0));
        let radii = estimate_world_radii(&positions, 4).unwrap();
        assert!(radii[0] > 0.0);
        assert_relative_eq!(radii[0], 1e-9 * 10.0, epsilon = 1e-20);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let positions = vec![Vector3::zeros(); 4];
        assert!(estimate_world_radii(&positions, 4).is_err());
    }
}
