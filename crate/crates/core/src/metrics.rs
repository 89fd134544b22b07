//! Point-set distances, scores, sampling, and distribution-level metrics.
//!
//! Chamfer conventions: L2 is the sum of the two directed mean squared
//! nearest distances; L1 is half the sum of the two directed mean nearest
//! distances. Values are raw; display scaling belongs to reporting.

use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{sq_dist, Point, PointCloud};
use crate::error::{contract_err, Result};
pub use crate::nn_index::{nearest_all, nearest_brute, NNIndex, NearestStrategy};

pub(crate) fn nearest_indices(query: &[Point], target: &[Point]) -> Vec<usize> {
    nearest_all(query, target, NearestStrategy::Auto).into_iter().map(|(i, _)| i).collect()
}

fn directed_mean(src: &[Point], dst: &[Point], squared: bool, strategy: NearestStrategy) -> f64 {
    let s: f64 = nearest_all(src, dst, strategy)
        .into_iter()
        .map(|(_, d2)| if squared { d2 } else { libm::sqrt(d2) })
        .sum();
    s / src.len() as f64
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    a.require_nonempty("chamfer")?;
    b.require_nonempty("chamfer")
}

pub fn chamfer_l2_with(a: &PointCloud, b: &PointCloud, strategy: NearestStrategy) -> Result<f64> {
    check_pair(a, b)?;
    Ok(directed_mean(&a.points, &b.points, true, strategy) + directed_mean(&b.points, &a.points, true, strategy))
}

pub fn chamfer_l1_with(a: &PointCloud, b: &PointCloud, strategy: NearestStrategy) -> Result<f64> {
    check_pair(a, b)?;
    Ok(0.5 * (directed_mean(&a.points, &b.points, false, strategy) + directed_mean(&b.points, &a.points, false, strategy)))
}

/// Squared-distance Chamfer distance.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_l2_with(a, b, NearestStrategy::Auto)
}

/// Euclidean-distance Chamfer distance with the 1/2 factor.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_l1_with(a, b, NearestStrategy::Auto)
}

/// F-score at an absolute distance threshold.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<f64> {
    pred.require_nonempty("fscore prediction")?;
    gt.require_nonempty("fscore ground truth")?;
    if !(threshold > 0.0) {
        return Err(contract_err!("fscore threshold must be positive, got {threshold}"));
    }
    let t2 = threshold * threshold;
    let within = |src: &[Point], dst: &[Point]| -> f64 {
        let hits = nearest_all(src, dst, NearestStrategy::Auto).into_iter().filter(|&(_, d2)| d2 <= t2).count();
        hits as f64 / src.len() as f64
    };
    let precision = within(&pred.points, &gt.points);
    let recall = within(&gt.points, &pred.points);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Greedy farthest point sampling; returns the chosen indices in pick order.
///
/// Ties resolve to the lowest index.
pub fn fps_indices(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(contract_err!("fps needs 1 <= k <= {}, got k = {k}", points.len()));
    }
    if seed_index >= points.len() {
        return Err(contract_err!("fps seed index {seed_index} out of range for {} points", points.len()));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = seed_index;
    for _ in 0..k {
        chosen.push(current);
        taken[current] = true;
        let c = points[current];
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > far {
                far = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(chosen)
}

pub fn fps(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<PointCloud> {
    Ok(cloud.select(&fps_indices(&cloud.points, k, seed_index)?))
}

fn occupancy(set: &[PointCloud], resolution: usize) -> Result<Vec<f64>> {
    let mut hist = vec![0.0; resolution * resolution * resolution];
    let cell = |v: f64| -> usize { (libm::floor((v + 0.5) * resolution as f64) as usize).min(resolution - 1) };
    for cloud in set {
        for p in &cloud.points {
            if p.iter().any(|v| !(-0.5..=0.5).contains(v)) {
                return Err(contract_err!("point {:?} lies outside [-0.5, 0.5]^3", p));
            }
            hist[(cell(p[0]) * resolution + cell(p[1])) * resolution + cell(p[2])] += 1.0;
        }
    }
    let total: f64 = hist.iter().sum();
    if total == 0.0 {
        return Err(contract_err!("jsd over a set without points"));
    }
    hist.iter_mut().for_each(|h| *h /= total);
    Ok(hist)
}

/// Jensen-Shannon divergence (natural log) between the pooled occupancy
/// histograms of two sets of clouds on a `resolution^3` grid over `[-0.5, 0.5]^3`.
pub fn jsd(set_a: &[PointCloud], set_b: &[PointCloud], resolution: usize) -> Result<f64> {
    if resolution == 0 {
        return Err(contract_err!("jsd resolution must be positive"));
    }
    let p = occupancy(set_a, resolution)?;
    let q = occupancy(set_b, resolution)?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_p += pi * libm::log(pi / mi);
        }
        if qi > 0.0 {
            kl_q += qi * libm::log(qi / mi);
        }
    }
    Ok((0.5 * (kl_p + kl_q)).max(0.0))
}

/// Distribution-level scores of a generated set against a reference set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationScores {
    /// Mean over reference clouds of the smallest CD to any generated cloud.
    pub mmd_cd: f64,
    /// Fraction of reference clouds that are some generated cloud's nearest.
    pub cov: f64,
    /// Leave-one-out 1-nearest-neighbor accuracy over the union.
    pub nna: f64,
}

/// Scores from a precomputed distance table over `gen ++ ref`
/// (`n_gen + n_ref` square, row-major).
pub fn generation_scores_from_table(table: &[f64], n_gen: usize, n_ref: usize) -> Result<GenerationScores> {
    if n_gen == 0 || n_ref == 0 {
        return Err(contract_err!("generation metrics need nonempty sets (gen {n_gen}, ref {n_ref})"));
    }
    let n = n_gen + n_ref;
    if table.len() != n * n {
        return Err(contract_err!("distance table has {} entries, expected {}", table.len(), n * n));
    }
    let d = |i: usize, j: usize| table[i * n + j];
    let mut mmd = 0.0;
    for r in 0..n_ref {
        let best = (0..n_gen).map(|g| d(n_gen + r, g)).fold(f64::INFINITY, f64::min);
        mmd += best;
    }
    mmd /= n_ref as f64;
    let mut matched = vec![false; n_ref];
    for g in 0..n_gen {
        let mut best = (0usize, f64::INFINITY);
        for r in 0..n_ref {
            let v = d(g, n_gen + r);
            if v < best.1 {
                best = (r, v);
            }
        }
        matched[best.0] = true;
    }
    let cov = matched.iter().filter(|&&m| m).count() as f64 / n_ref as f64;
    let mut correct = 0usize;
    for i in 0..n {
        let same = |j: usize| (i < n_gen) == (j < n_gen);
        let mut best_same = f64::INFINITY;
        let mut best_other = f64::INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            let v = d(i, j);
            if same(j) {
                best_same = best_same.min(v);
            } else {
                best_other = best_other.min(v);
            }
        }
        // Equal distances count as a same-set classification.
        if best_same <= best_other {
            correct += 1;
        }
    }
    Ok(GenerationScores { mmd_cd: mmd, cov, nna: correct as f64 / n as f64 })
}

/// Symmetric CD-L2 table over `gen ++ ref`.
pub fn pairwise_cd_table(gen: &[PointCloud], reference: &[PointCloud]) -> Result<Vec<f64>> {
    let all: Vec<&PointCloud> = gen.iter().chain(reference).collect();
    let n = all.len();
    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = chamfer_l2(all[i], all[j])?;
            table[i * n + j] = v;
            table[j * n + i] = v;
        }
    }
    Ok(table)
}

/// MMD-CD, COV and 1-NNA of `gen` against `reference`, with CD-L2 as the distance.
pub fn mmd_cov_1nna(gen: &[PointCloud], reference: &[PointCloud]) -> Result<GenerationScores> {
    if gen.is_empty() || reference.is_empty() {
        return Err(contract_err!("generation metrics need nonempty sets"));
    }
    let table = pairwise_cd_table(gen, reference)?;
    generation_scores_from_table(&table, gen.len(), reference.len())
}

/// Directed `complete -> gt` mean nearest distance before and after
/// replacing the leading `lambda` fraction of `complete` by their nearest
/// ground-truth points.
pub fn partial_replacement_check(gt: &PointCloud, complete: &PointCloud, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(contract_err!("replacement fraction must lie in (0, 1), got {lambda}"));
    }
    gt.require_nonempty("replacement check ground truth")?;
    complete.require_nonempty("replacement check completion")?;
    let before = directed_mean(&complete.points, &gt.points, false, NearestStrategy::Auto);
    let count = libm::round(lambda * complete.len() as f64) as usize;
    let nn = nearest_all(&complete.points[..count], &gt.points, NearestStrategy::Auto);
    let mut replaced = complete.points.clone();
    for (slot, (j, _)) in replaced.iter_mut().zip(nn) {
        *slot = gt.points[j];
    }
    let after = directed_mean(&replaced, &gt.points, false, NearestStrategy::Auto);
    Ok((before, after))
}
