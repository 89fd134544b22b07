//! Independent reference computations for the metrics.

#![allow(dead_code)]

use axform_core::{Point, PointCloud};
use rand::Rng;

use super::gradcheck::rng;

fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn directed(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let mut total = 0.0;
    for p in &a.points {
        let mut best = f64::INFINITY;
        for q in &b.points {
            best = best.min(d2(p, q));
        }
        total += if squared { best } else { best.sqrt() };
    }
    total / a.len() as f64
}

/// O(n m) chamfer distances `(l1, l2)` under the crate's conventions.
pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> (f64, f64) {
    let l1 = 0.5 * (directed(a, b, false) + directed(b, a, false));
    let l2 = directed(a, b, true) + directed(b, a, true);
    (l1, l2)
}

pub fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = rng(seed);
    PointCloud::new((0..n).map(|_| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]).collect())
}

/// Largest deviation of the library chamfer from the brute force over
/// `pairs` random pairs of up to `max_n` points.
pub fn chamfer_oracle_gap(pairs: u64, max_n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..pairs {
        let mut r = rng(s);
        let (n, m) = (r.random_range(1..=max_n), r.random_range(1..=max_n));
        let (a, b) = (random_cloud(2 * s + 1000, n), random_cloud(2 * s + 1001, m));
        let (l1, l2) = brute_chamfer(&a, &b);
        worst = worst.max((axform_core::metrics::chamfer_l1(&a, &b).unwrap() - l1).abs());
        worst = worst.max((axform_core::metrics::chamfer_l2(&a, &b).unwrap() - l2).abs());
    }
    worst
}

/// Two generated and two reference single-point clouds on the x axis at
/// 0, 4 (generated) and 1, 2 (reference). Pairwise CD-L2 is `2 dx^2`:
///
/// ```text
///        g0  g1  r0  r1
///   g0    0  32   2   8
///   g1   32   0  18   8
///   r0    2  18   0   2
///   r1    8   8   2   0
/// ```
///
/// MMD = mean(min(2, 18), min(8, 8)) = 5. Each generated cloud's nearest
/// reference is distinct (g0 -> r0, g1 -> r1), so COV = 1. Leave-one-out:
/// g0 (same 32, other 2) and g1 (same 32, other 8) are misclassified; r0
/// ties 2 vs 2, which counts as same-set; r1 (same 2, other 8) is correct:
/// 1-NNA = 2 / 4.
pub fn hand_instance() -> (Vec<PointCloud>, Vec<PointCloud>, (f64, f64, f64)) {
    let at = |x: f64| PointCloud::new(vec![[x, 0.0, 0.0]]);
    (vec![at(0.0), at(4.0)], vec![at(1.0), at(2.0)], (5.0, 1.0, 0.5))
}

/// Ground truth on a unit-spaced line and a completion whose points all sit
/// at distance exactly 0.1 from their nearest ground-truth point.
pub fn equal_distance_instance() -> (PointCloud, PointCloud) {
    let gt = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
    let complete = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.1]).collect());
    (gt, complete)
}
