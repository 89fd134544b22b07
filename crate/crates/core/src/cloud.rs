use alloc::vec::Vec;

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// An ordered list of 3D points with optional per-point part labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points, labels: None }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<u16>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(contract_err!("{} labels for {} points", labels.len(), points.len()));
        }
        Ok(PointCloud { points, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(contract_err!("{what}: point cloud is empty"))
        } else {
            Ok(())
        }
    }

    /// Points as a `[1, n, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::new([1, self.points.len(), 3], data).expect("point tensor shape")
    }

    /// Reads the points of a `[.., n, 3]` tensor (single batch item).
    pub fn from_tensor(t: &Tensor) -> Self {
        PointCloud::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Subset of points (and labels) by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Root-mean-square distance of the points from their centroid.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        let s: f64 = self.points.iter().map(|p| sq_dist(p, &c)).sum();
        libm::sqrt(s / self.points.len().max(1) as f64)
    }
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}
