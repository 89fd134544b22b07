//! Exact nearest-neighbor queries on a uniform grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{sq_dist, Point};

/// Uniform spatial grid over a point set's bounding box.
///
/// Queries expand cell rings around the query until no unvisited cell can
/// hold a closer point, so results equal a brute-force scan exactly,
/// including the lowest-index tie rule.
#[derive(Debug, Clone)]
pub struct NNIndex<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    entries: Vec<u32>,
}

const TARGET_OCCUPANCY: f64 = 2.0;

impl<'a> NNIndex<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        assert!(!points.is_empty(), "NNIndex over an empty point set");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let max_ext = ext[0].max(ext[1]).max(ext[2]);
        let target_cells = (points.len() as f64 / TARGET_OCCUPANCY).max(1.0);
        let cells_for = |h: f64| -> f64 { ext.iter().map(|e| libm::floor(e / h) + 1.0).product() };
        let cell = if max_ext <= 0.0 {
            1.0
        } else {
            // Bisect for the smallest cell size whose cell count stays within budget.
            let (mut small, mut big) = (max_ext * 1e-9, max_ext * 2.0);
            for _ in 0..60 {
                let mid = 0.5 * (small + big);
                if cells_for(mid) > target_cells {
                    small = mid;
                } else {
                    big = mid;
                }
            }
            big
        };
        let dims = ext.map(|e| (libm::floor(e / cell) as usize + 1).max(1));
        let mut index = NNIndex {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            entries: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncells + 1];
        let cell_of: Vec<usize> = points.iter().map(|p| index.flat(index.coords(p))).collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut entries = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            entries[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        index.starts = counts;
        index.entries = entries;
        index
    }

    fn coords(&self, p: &Point) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let f = libm::floor((p[k] - self.origin[k]) / self.cell);
            c[k] = if f <= 0.0 { 0 } else { (f as usize).min(self.dims[k] - 1) };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest indexed point to `q`.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let c = self.coords(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        for ring in 0..=max_ring {
            self.scan_ring(c, ring, q, &mut best);
            // Lower bound on the distance to any cell outside the visited block.
            let mut bound = f64::INFINITY;
            let mut covers_all = true;
            for k in 0..3 {
                if c[k] >= ring + 1 {
                    covers_all = false;
                    let face = self.origin[k] + (c[k] - ring) as f64 * self.cell;
                    bound = bound.min((q[k] - face).abs());
                }
                if c[k] + ring + 1 < self.dims[k] {
                    covers_all = false;
                    let face = self.origin[k] + (c[k] + ring + 1) as f64 * self.cell;
                    bound = bound.min((face - q[k]).abs());
                }
            }
            if covers_all {
                break;
            }
            let slack = bound - self.cell * 1e-9;
            if slack > 0.0 && slack * slack > best.1 {
                break;
            }
        }
        best
    }

    fn scan_ring(&self, c: [usize; 3], ring: usize, q: &Point, best: &mut (usize, f64)) {
        let lo = |k: usize| c[k].saturating_sub(ring);
        let hi = |k: usize| (c[k] + ring).min(self.dims[k] - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let on_shell = x.abs_diff(c[0]) == ring || y.abs_diff(c[1]) == ring || z.abs_diff(c[2]) == ring;
                    if !on_shell {
                        continue;
                    }
                    let f = self.flat([x, y, z]);
                    for &e in &self.entries[self.starts[f] as usize..self.starts[f + 1] as usize] {
                        let i = e as usize;
                        let d = sq_dist(q, &self.points[i]);
                        if d < best.1 || (d == best.1 && i < best.0) {
                            *best = (i, d);
                        }
                    }
                }
            }
        }
    }
}

/// Brute-force nearest neighbor with the lowest-index tie rule.
pub fn nearest_brute(target: &[Point], q: &Point) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in target.iter().enumerate() {
        let d = sq_dist(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// How nearest neighbors are found by the point-set metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NearestStrategy {
    /// Grid for large targets, scan otherwise.
    #[default]
    Auto,
    BruteForce,
    Grid,
}

const GRID_MIN_POINTS: usize = 96;

/// Nearest target point (index, squared distance) for each query point.
pub fn nearest_all(query: &[Point], target: &[Point], strategy: NearestStrategy) -> Vec<(usize, f64)> {
    let grid = match strategy {
        NearestStrategy::Auto => target.len() >= GRID_MIN_POINTS && query.len() >= GRID_MIN_POINTS,
        NearestStrategy::BruteForce => false,
        NearestStrategy::Grid => true,
    };
    if grid {
        let index = NNIndex::new(target);
        query.iter().map(|q| index.nearest(q)).collect()
    } else {
        query.iter().map(|q| nearest_brute(target, q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect()
    }

    #[test]
    fn grid_equals_brute_force_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = random_points(&mut rng, 500);
        let index = NNIndex::new(&target);
        for _ in 0..1000 {
            let q = [rng.random::<f64>() * 1.6 - 0.8, rng.random::<f64>() * 1.6 - 0.8, rng.random::<f64>() * 1.6 - 0.8];
            assert_eq!(index.nearest(&q), nearest_brute(&target, &q));
        }
    }

    #[test]
    fn grid_handles_flat_and_duplicate_sets() {
        let target: Vec<Point> = (0..200).map(|i| [(i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0]).collect();
        let index = NNIndex::new(&target);
        for t in &target {
            assert_eq!(index.nearest(t), nearest_brute(&target, t));
        }
        let dup = vec![[0.5, 0.5, 0.5]; 10];
        let index = NNIndex::new(&dup);
        assert_eq!(index.nearest(&[0.0, 0.0, 0.0]).0, 0);
    }
}
