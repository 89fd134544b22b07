//! Reference-based part labeling of multi-branch reconstructions.
//!
//! A branch tends to cover the same region across shapes, so labeling the
//! branches once on a labeled reference shape labels every reconstruction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{sq_dist, PointCloud};
use crate::error::{contract_err, Result};
use crate::metrics::{nearest_all, NearestStrategy};
use crate::models::ReconstructionNet;
use crate::params::ParamSet;

/// A decoder whose output points each come from one of `branches()` branches.
pub trait BranchModel {
    fn branches(&self) -> usize;
    fn reconstruct_with_branches(&self, params: &ParamSet, cloud: &PointCloud) -> Result<(PointCloud, Vec<usize>)>;
}

impl BranchModel for ReconstructionNet {
    fn branches(&self) -> usize {
        ReconstructionNet::branches(self)
    }

    fn reconstruct_with_branches(&self, params: &ParamSet, cloud: &PointCloud) -> Result<(PointCloud, Vec<usize>)> {
        self.reconstruct(params, cloud)
    }
}

/// Semantic label of every branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSemanticMap {
    /// `labels[b]` is the label id of branch `b`.
    pub labels: Vec<u16>,
    /// Name of each label id; ids are `0..label_names.len()`.
    pub label_names: Vec<String>,
    pub reference: String,
    /// Branches whose points all coincide on the reference reconstruction.
    pub degenerate_branches: Vec<usize>,
}

impl BranchSemanticMap {
    pub fn new(labels: Vec<u16>, label_names: Vec<String>, reference: String) -> Result<Self> {
        let map = BranchSemanticMap { labels, label_names, reference, degenerate_branches: Vec::new() };
        map.validate()?;
        Ok(map)
    }

    pub fn branches(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(contract_err!("branch map is empty"));
        }
        if let Some((b, l)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize >= self.label_names.len()) {
            return Err(contract_err!("branch {b} maps to label {l}, but only {} labels are named", self.label_names.len()));
        }
        Ok(())
    }
}

/// Label of the nearest ground-truth point for every generated point.
pub fn transfer_labels(gt: &PointCloud, generated: &PointCloud) -> Result<Vec<u16>> {
    gt.require_nonempty("label transfer")?;
    let labels = gt.labels.as_ref().ok_or_else(|| contract_err!("ground-truth cloud has no part labels"))?;
    Ok(nearest_all(&generated.points, &gt.points, NearestStrategy::Auto).into_iter().map(|(j, _)| labels[j]).collect())
}

/// Most frequent label among the points of each branch (ties to the lowest id);
/// `None` for a branch without points.
pub fn branch_majorities(point_labels: &[u16], branch_ids: &[usize], branches: usize) -> Result<Vec<Option<u16>>> {
    if point_labels.len() != branch_ids.len() {
        return Err(contract_err!("{} labels for {} branch ids", point_labels.len(), branch_ids.len()));
    }
    let nlabels = point_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; nlabels]; branches];
    for (&l, &b) in point_labels.iter().zip(branch_ids) {
        if b >= branches {
            return Err(contract_err!("branch id {b} out of range for {branches} branches"));
        }
        counts[b][l as usize] += 1;
    }
    Ok(counts
        .iter()
        .map(|c| {
            let mut best: Option<(usize, usize)> = None;
            for (l, &n) in c.iter().enumerate() {
                if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((l, n));
                }
            }
            best.map(|(l, _)| l as u16)
        })
        .collect())
}

fn label_names_for(gt: &PointCloud, names: Option<&[String]>) -> Vec<String> {
    match names {
        Some(n) => n.to_vec(),
        None => {
            let count = gt.labels.as_ref().map_or(0, |l| l.iter().map(|&x| x as usize + 1).max().unwrap_or(0));
            (0..count).map(|i| format!("part{i}")).collect()
        }
    }
}

/// Builds the map from an existing reconstruction of the labeled reference.
pub fn assign_from_reconstruction(
    reference: &PointCloud,
    generated: &PointCloud,
    branch_ids: &[usize],
    branches: usize,
    label_names: Option<&[String]>,
    reference_id: &str,
) -> Result<BranchSemanticMap> {
    let point_labels = transfer_labels(reference, generated)?;
    let majorities = branch_majorities(&point_labels, branch_ids, branches)?;
    let fallback = branch_majorities(&point_labels, &vec![0; point_labels.len()], 1)?[0].unwrap_or(0);
    let labels = majorities.iter().map(|m| m.unwrap_or(fallback)).collect();
    let mut degenerate = Vec::new();
    for b in 0..branches {
        let pts: Vec<_> = branch_ids.iter().zip(&generated.points).filter(|(&id, _)| id == b).map(|(_, p)| *p).collect();
        if pts.is_empty() || pts.iter().all(|p| sq_dist(p, &pts[0]) == 0.0) {
            degenerate.push(b);
        }
    }
    let mut map = BranchSemanticMap::new(labels, label_names_for(reference, label_names), reference_id.into())?;
    map.degenerate_branches = degenerate;
    Ok(map)
}

/// Reconstructs the labeled reference and gives each branch its majority label.
pub fn assign_branches<M: BranchModel>(
    model: &M,
    params: &ParamSet,
    reference: &PointCloud,
    label_names: Option<&[String]>,
    reference_id: &str,
) -> Result<BranchSemanticMap> {
    if reference.labels.is_none() {
        return Err(contract_err!("reference cloud has no part labels"));
    }
    let (generated, ids) = model.reconstruct_with_branches(params, reference)?;
    assign_from_reconstruction(reference, &generated, &ids, model.branches(), label_names, reference_id)
}

/// Labels generated points by their branch.
pub fn label_by_branches(generated: &PointCloud, branch_ids: &[usize], map: &BranchSemanticMap) -> Result<PointCloud> {
    if branch_ids.len() != generated.len() {
        return Err(contract_err!("{} branch ids for {} points", branch_ids.len(), generated.len()));
    }
    let labels = branch_ids
        .iter()
        .map(|&b| map.labels.get(b).copied().ok_or_else(|| contract_err!("branch {b} missing from the map")))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::with_labels(generated.points.clone(), labels)
}

/// Labeled reconstruction of `cloud`.
pub fn segment<M: BranchModel>(model: &M, params: &ParamSet, cloud: &PointCloud, map: &BranchSemanticMap) -> Result<PointCloud> {
    if map.branches() != model.branches() {
        return Err(contract_err!("map covers {} branches, model has {}", map.branches(), model.branches()));
    }
    let (generated, ids) = model.reconstruct_with_branches(params, cloud)?;
    label_by_branches(&generated, &ids, map)
}

/// Fraction of segmented points whose label equals that of the nearest ground-truth point.
pub fn label_accuracy(segmented: &PointCloud, gt: &PointCloud) -> Result<f64> {
    segmented.require_nonempty("label accuracy")?;
    let predicted = segmented.labels.as_ref().ok_or_else(|| contract_err!("segmented cloud has no labels"))?;
    let truth = transfer_labels(gt, segmented)?;
    let hits = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// One shape for [`consistency_from_reconstructions`].
#[derive(Debug, Clone, Copy)]
pub struct Reconstructed<'a> {
    pub gt: &'a PointCloud,
    pub generated: &'a PointCloud,
    pub branch_ids: &'a [usize],
}

/// Fraction of (shape, branch) pairs whose majority ground-truth label equals
/// the map's label for that branch. Branches without points count as misses.
pub fn consistency_from_reconstructions(shapes: &[Reconstructed<'_>], map: &BranchSemanticMap) -> Result<f64> {
    if shapes.is_empty() {
        return Err(contract_err!("consistency score of an empty test set"));
    }
    let k = map.branches();
    let mut hits = 0usize;
    for s in shapes {
        let point_labels = transfer_labels(s.gt, s.generated)?;
        let majorities = branch_majorities(&point_labels, s.branch_ids, k)?;
        hits += majorities.iter().zip(&map.labels).filter(|(m, l)| **m == Some(**l)).count();
    }
    Ok(hits as f64 / (shapes.len() * k) as f64)
}

pub fn consistency_score<M: BranchModel>(model: &M, params: &ParamSet, map: &BranchSemanticMap, test_set: &[PointCloud]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(contract_err!("consistency score of an empty test set"));
    }
    if map.branches() != model.branches() {
        return Err(contract_err!("map covers {} branches, model has {}", map.branches(), model.branches()));
    }
    let recon = test_set
        .iter()
        .map(|c| model.reconstruct_with_branches(params, c))
        .collect::<Result<Vec<_>>>()?;
    let shapes: Vec<Reconstructed<'_>> = test_set
        .iter()
        .zip(&recon)
        .map(|(gt, (generated, ids))| Reconstructed { gt, generated, branch_ids: ids })
        .collect();
    consistency_from_reconstructions(&shapes, map)
}

/// Mean RMS radius of each branch's points about their own centroid, and the
/// RMS radius of the whole cloud.
pub fn branch_compactness(generated: &PointCloud, branch_ids: &[usize], branches: usize) -> Result<(f64, f64)> {
    generated.require_nonempty("branch compactness")?;
    if branch_ids.len() != generated.len() {
        return Err(contract_err!("{} branch ids for {} points", branch_ids.len(), generated.len()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for b in 0..branches {
        let idx: Vec<usize> = (0..branch_ids.len()).filter(|&i| branch_ids[i] == b).collect();
        if idx.is_empty() {
            continue;
        }
        total += generated.select(&idx).rms_radius();
        used += 1;
    }
    Ok((total / used as f64, generated.rms_radius()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_ties_go_to_lowest_label() {
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        assert_eq!(branch_majorities(&labels, &[0; 10], 1).unwrap(), vec![Some(0)]);
        assert_eq!(branch_majorities(&[2, 2, 1], &[0, 0, 0], 2).unwrap(), vec![Some(2), None]);
    }

    #[test]
    fn aligned_branches_recover_part_assignment() {
        let gt = PointCloud::with_labels(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [5.1, 0.0, 0.0]], vec![1, 1, 0, 0]).unwrap();
        let generated = PointCloud::new(vec![[5.0, 0.0, 0.0], [5.1, 0.0, 0.0], [0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        let map = assign_from_reconstruction(&gt, &generated, &[0, 0, 1, 1], 2, None, "ref").unwrap();
        assert_eq!(map.labels, vec![0, 1]);
        assert!(map.degenerate_branches.is_empty());
        let seg = label_by_branches(&generated, &[0, 0, 1, 1], &map).unwrap();
        assert_eq!(label_accuracy(&seg, &gt).unwrap(), 1.0);
        let shapes = [Reconstructed { gt: &gt, generated: &generated, branch_ids: &[0, 0, 1, 1] }];
        assert_eq!(consistency_from_reconstructions(&shapes, &map).unwrap(), 1.0);
        assert!(consistency_from_reconstructions(&[], &map).is_err());
    }

    #[test]
    fn degenerate_branch_is_flagged() {
        let gt = PointCloud::with_labels(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0, 1]).unwrap();
        let generated = PointCloud::new(vec![[0.2; 3], [0.2; 3], [1.0, 0.0, 0.0], [0.9, 0.0, 0.0]]);
        let map = assign_from_reconstruction(&gt, &generated, &[0, 0, 1, 1], 2, None, "ref").unwrap();
        assert_eq!(map.degenerate_branches, vec![0]);
        assert_eq!(map.labels, vec![0, 1]);
    }

    #[test]
    fn compactness_of_separated_branches() {
        let c = PointCloud::new(vec![[-1.0, 0.0, 0.0], [-1.0, 0.2, 0.0], [1.0, 0.0, 0.0], [1.0, 0.2, 0.0]]);
        let (intra, whole) = branch_compactness(&c, &[0, 0, 1, 1], 2).unwrap();
        assert!((intra - 0.1).abs() < 1e-12);
        assert!(whole > 1.0);
    }
}
