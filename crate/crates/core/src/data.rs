//! Synthetic labeled shapes, normalization, and partial-cloud synthesis.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point, PointCloud};
use crate::error::{contract_err, Result};

/// Surface primitive in its local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box surface with the given half extents.
    Box { half: [f64; 3] },
    /// Closed cylinder along local z.
    Cylinder { radius: f64, half_height: f64 },
    Sphere { radius: f64 },
    /// Flat disc in the local xy plane.
    Disc { radius: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: [x, y, z] } => 8.0 * (x * y + y * z + x * z),
            Primitive::Cylinder { radius, half_height } => 4.0 * PI * radius * half_height + 2.0 * PI * radius * radius,
            Primitive::Sphere { radius } => 4.0 * PI * radius * radius,
            Primitive::Disc { radius } => PI * radius * radius,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        let mut u = || rng.random::<f64>();
        match *self {
            Primitive::Box { half } => {
                let [x, y, z] = half;
                let faces = [y * z, y * z, x * z, x * z, x * y, x * y];
                let total: f64 = faces.iter().sum();
                let t = u() * total;
                let mut acc = 0.0;
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    acc += a;
                    if t < acc {
                        face = i;
                        break;
                    }
                }
                let (a, b) = (2.0 * u() - 1.0, 2.0 * u() - 1.0);
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [sign * x, a * y, b * z],
                    1 => [a * x, sign * y, b * z],
                    _ => [a * x, b * y, sign * z],
                }
            }
            Primitive::Cylinder { radius, half_height } => {
                let lateral = 4.0 * PI * radius * half_height;
                let cap = PI * radius * radius;
                let t = u() * (lateral + 2.0 * cap);
                if t < lateral {
                    let th = 2.0 * PI * u();
                    [radius * libm::cos(th), radius * libm::sin(th), half_height * (2.0 * u() - 1.0)]
                } else {
                    let z = if t < lateral + cap { half_height } else { -half_height };
                    let (r, th) = (radius * libm::sqrt(u()), 2.0 * PI * u());
                    [r * libm::cos(th), r * libm::sin(th), z]
                }
            }
            Primitive::Sphere { radius } => {
                let z = 2.0 * u() - 1.0;
                let phi = 2.0 * PI * u();
                let s = libm::sqrt((1.0 - z * z).max(0.0));
                [radius * s * libm::cos(phi), radius * s * libm::sin(phi), radius * z]
            }
            Primitive::Disc { radius } => {
                let (r, th) = (radius * libm::sqrt(u()), 2.0 * PI * u());
                [r * libm::cos(th), r * libm::sin(th), 0.0]
            }
        }
    }
}

pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation mapping local z onto world x.
pub const Z_TO_X: Rotation = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];

/// Rotation mapping local z onto world y.
pub const Z_TO_Y: Rotation = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];

/// One labeled primitive placed in the world by rotation, uniform scale and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Part {
    pub primitive: Primitive,
    pub rotation: Rotation,
    pub scale: f64,
    pub translation: Point,
    pub label: u16,
}

impl Part {
    pub fn new(primitive: Primitive, rotation: Rotation, translation: Point, label: u16) -> Self {
        Part { primitive, rotation, scale: 1.0, translation, label }
    }

    pub fn area(&self) -> f64 {
        self.primitive.area() * self.scale * self.scale
    }

    fn place(&self, p: Point) -> Point {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Fuselage, wings and tail.
    MultiPartPlane,
    /// Top, legs and a lower shelf.
    Table,
    /// Sphere head, cylinder stem and disc base.
    CompositePrimitive,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::MultiPartPlane, Family::Table, Family::CompositePrimitive];

    pub fn name(self) -> &'static str {
        match self {
            Family::MultiPartPlane => "plane",
            Family::Table => "table",
            Family::CompositePrimitive => "composite",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn part_names(self) -> [&'static str; 3] {
        match self {
            Family::MultiPartPlane => ["body", "wing", "tail"],
            Family::Table => ["top", "legs", "shelf"],
            Family::CompositePrimitive => ["head", "stem", "base"],
        }
    }
}

/// A labeled synthetic shape description together with its sampling budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShapeSpec {
    pub family: Family,
    pub parts: Vec<Part>,
    pub sample_count: usize,
    pub seed: u64,
}

fn jitter<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl SyntheticShapeSpec {
    /// A randomized member of `family`, fully determined by `seed`.
    pub fn random(family: Family, seed: u64, sample_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a_9e);
        let r = &mut rng;
        let parts = match family {
            Family::MultiPartPlane => {
                let len = jitter(r, 0.42, 0.55);
                let radius = jitter(r, 0.06, 0.1);
                let chord = jitter(r, 0.07, 0.13);
                let span = jitter(r, 0.38, 0.55);
                let wing_x = jitter(r, -0.08, 0.08);
                let fin_h = jitter(r, 0.1, 0.18);
                let stab = jitter(r, 0.12, 0.2);
                vec![
                    Part::new(Primitive::Cylinder { radius, half_height: len }, Z_TO_X, [0.0, 0.0, 0.0], 0),
                    Part::new(Primitive::Box { half: [chord, span, 0.012] }, IDENTITY, [wing_x, 0.0, 0.0], 1),
                    Part::new(Primitive::Box { half: [0.06, 0.01, fin_h] }, IDENTITY, [-len + 0.06, 0.0, radius + fin_h], 2),
                    Part::new(Primitive::Box { half: [0.05, stab, 0.01] }, IDENTITY, [-len + 0.05, 0.0, radius * 0.5], 2),
                ]
            }
            Family::Table => {
                let hx = jitter(r, 0.38, 0.5);
                let hy = jitter(r, 0.25, 0.38);
                let height = jitter(r, 0.3, 0.42);
                let leg_r = jitter(r, 0.02, 0.035);
                let inset = jitter(r, 0.03, 0.08);
                let shelf_z = jitter(r, -height * 0.6, -height * 0.2);
                let mut parts = vec![Part::new(Primitive::Box { half: [hx, hy, 0.02] }, IDENTITY, [0.0, 0.0, height], 0)];
                for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    parts.push(Part::new(
                        Primitive::Cylinder { radius: leg_r, half_height: height },
                        IDENTITY,
                        [sx * (hx - inset), sy * (hy - inset), 0.0],
                        1,
                    ));
                }
                parts.push(Part::new(
                    Primitive::Box { half: [hx - inset, hy - inset, 0.012] },
                    IDENTITY,
                    [0.0, 0.0, shelf_z],
                    2,
                ));
                parts
            }
            Family::CompositePrimitive => {
                let head = jitter(r, 0.15, 0.24);
                let stem_r = jitter(r, 0.04, 0.07);
                let stem_h = jitter(r, 0.2, 0.3);
                let base = jitter(r, 0.2, 0.32);
                let lean = jitter(r, -0.05, 0.05);
                vec![
                    Part::new(Primitive::Sphere { radius: head }, IDENTITY, [lean, 0.0, stem_h + head * 0.8], 0),
                    Part::new(Primitive::Cylinder { radius: stem_r, half_height: stem_h }, IDENTITY, [0.0, 0.0, 0.0], 1),
                    Part::new(Primitive::Disc { radius: base }, IDENTITY, [0.0, 0.0, -stem_h], 2),
                ]
            }
        };
        SyntheticShapeSpec { family, parts, sample_count, seed }
    }
}

/// Area-weighted uniform surface sample over all parts, labeled by part.
pub fn sample_shape(spec: &SyntheticShapeSpec) -> Result<PointCloud> {
    if spec.parts.is_empty() {
        return Err(contract_err!("shape has no parts"));
    }
    let areas: Vec<f64> = spec.parts.iter().map(Part::area).collect();
    if let Some(i) = areas.iter().position(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(contract_err!("part {i} has degenerate surface area {}", areas[i]));
    }
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.sample_count);
    let mut labels = Vec::with_capacity(spec.sample_count);
    for _ in 0..spec.sample_count {
        let t = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = spec.parts.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            acc += a;
            if t < acc {
                chosen = i;
                break;
            }
        }
        let part = &spec.parts[chosen];
        points.push(part.place(part.primitive.sample(&mut rng)));
        labels.push(part.label);
    }
    PointCloud::with_labels(points, labels)
}

/// Center and uniform scale applied by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
}

/// Centers the bounding box at the origin and scales its largest extent to one.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    cloud.require_nonempty("normalize")?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let scale = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(contract_err!("cannot normalize a cloud with zero extent"));
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let points = cloud
        .points
        .iter()
        .map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale, (p[2] - center[2]) / scale])
        .collect();
    Ok((PointCloud { points, labels: cloud.labels.clone() }, Normalization { center, scale }))
}

pub fn denormalize(cloud: &PointCloud, record: &Normalization) -> PointCloud {
    let (c, s) = (record.center, record.scale);
    PointCloud {
        points: cloud.points.iter().map(|p| [p[0] * s + c[0], p[1] * s + c[1], p[2] * s + c[2]]).collect(),
        labels: cloud.labels.clone(),
    }
}

/// How [`make_partial`] removes points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartialMethod {
    /// Drops points with `<p - centroid, d> > offset`; `d` is drawn uniformly
    /// on the sphere unless given.
    HalfspaceCut { direction: Option<Point>, offset: f64 },
    /// Keeps points visible from a random camera: points are binned by view
    /// direction on a `resolution x resolution` angular grid and a point
    /// survives when its depth is within `shell` of the nearest depth in its bin.
    ViewpointOcclusion { resolution: usize, shell: f64 },
}

const MIN_KEEP_FRACTION: f64 = 0.1;

fn unit_vector<R: Rng>(rng: &mut R) -> Point {
    let z = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.random::<f64>();
    let s = libm::sqrt((1.0 - z * z).max(0.0));
    [s * libm::cos(phi), s * libm::sin(phi), z]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Point, b: &Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: Point) -> Point {
    let n = libm::sqrt(dot(&a, &a));
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Indices of the points kept by `method` (in input order).
pub fn partial_indices(cloud: &PointCloud, method: &PartialMethod, seed: u64) -> Result<Vec<usize>> {
    cloud.require_nonempty("make_partial")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cloud.centroid();
    let keep: Vec<usize> = match *method {
        PartialMethod::HalfspaceCut { direction, offset } => {
            let d = unit(direction.unwrap_or_else(|| unit_vector(&mut rng)));
            (0..cloud.len())
                .filter(|&i| {
                    let p = cloud.points[i];
                    dot(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]], &d) <= offset
                })
                .collect()
        }
        PartialMethod::ViewpointOcclusion { resolution, shell } => {
            if resolution == 0 {
                return Err(contract_err!("occlusion grid resolution must be positive"));
            }
            let radius = cloud.points.iter().map(|p| libm::sqrt(crate::cloud::sq_dist(p, &c))).fold(0.0, f64::max);
            let view = unit_vector(&mut rng);
            let dist = 2.0 * radius.max(1e-9);
            let cam = [c[0] + dist * view[0], c[1] + dist * view[1], c[2] + dist * view[2]];
            let fwd = [-view[0], -view[1], -view[2]];
            let helper = if fwd[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let right = unit(cross(&fwd, &helper));
            let up = cross(&right, &fwd);
            // Half field of view enclosing the bounding sphere.
            let half_fov = libm::asin((radius / dist).min(1.0)).max(1e-9);
            let mut bins = Vec::with_capacity(cloud.len());
            let mut nearest = vec![f64::INFINITY; resolution * resolution];
            for p in &cloud.points {
                let v = [p[0] - cam[0], p[1] - cam[1], p[2] - cam[2]];
                let depth = dot(&v, &fwd);
                let ax = libm::atan2(dot(&v, &right), depth);
                let ay = libm::atan2(dot(&v, &up), depth);
                let cell = |a: f64| -> usize {
                    let t = ((a / half_fov) * 0.5 + 0.5) * resolution as f64;
                    (libm::floor(t).max(0.0) as usize).min(resolution - 1)
                };
                let bin = cell(ay) * resolution + cell(ax);
                let range = libm::sqrt(dot(&v, &v));
                nearest[bin] = nearest[bin].min(range);
                bins.push((bin, range));
            }
            bins.iter()
                .enumerate()
                .filter(|(_, (bin, range))| *range <= nearest[*bin] + shell)
                .map(|(i, _)| i)
                .collect()
        }
    };
    let needed = libm::ceil(MIN_KEEP_FRACTION * cloud.len() as f64) as usize;
    if keep.len() < needed {
        return Err(contract_err!(
            "partial keeps {} of {} points, below the {} minimum; resample the cut",
            keep.len(),
            cloud.len(),
            needed
        ));
    }
    Ok(keep)
}

/// Partial observation of `cloud`: an exact subset of its points in input order.
pub fn make_partial(cloud: &PointCloud, method: &PartialMethod, seed: u64) -> Result<PointCloud> {
    Ok(cloud.select(&partial_indices(cloud, method, seed)?))
}
