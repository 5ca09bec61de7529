//! Procedural symmetric shapes, rotation augmentation and partial-view
//! synthesis.
//!
//! Every generated shape is built in a local frame where its symmetry planes
//! pass through the origin (`x = 0`, plus `z = 0` for the bi-symmetric
//! family); callers rotate and normalize, transforming the planes alongside.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reflect_point, Cloud, CloudKind, NormRecord, Plane, Rotation, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("no point is visible from the viewpoint")]
    EmptyResult,
    #[error("invalid viewpoint: {0}")]
    InvalidViewpoint(String),
    #[error("unknown shape family {0:?}")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MirroredBlob,
    BoxUnion,
    CylinderCluster,
    BiSymmetric,
    /// Car-like body in metres; used for the box refinement model.
    Vehicle,
}

impl Family {
    /// The procedural shape families (everything except vehicles).
    pub const ALL: [Family; 4] = [
        Family::MirroredBlob,
        Family::BoxUnion,
        Family::CylinderCluster,
        Family::BiSymmetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::MirroredBlob => "mirrored_blob",
            Family::BoxUnion => "box_union",
            Family::CylinderCluster => "cylinder_cluster",
            Family::BiSymmetric => "bi_symmetric",
            Family::Vehicle => "vehicle",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .chain([Family::Vehicle])
            .find(|f| f.name() == s)
            .ok_or_else(|| DataError::UnknownFamily(s.to_string()))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecipe {
    pub family: Family,
    pub point_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ShapeRecipe {
    pub fn new(family: Family, seed: u64) -> Self {
        ShapeRecipe {
            family,
            point_count: 2048,
            noise_sigma: 0.005,
            seed,
        }
    }
}

/// Closed surface patch that can be sampled uniformly-ish.
#[derive(Debug, Clone)]
enum Primitive {
    Ellipsoid { center: Vec3, radii: Vec3, rot: Rotation },
    Cuboid { center: Vec3, half: Vec3, rot: Rotation },
    /// Axis is the local `y` direction after `rot`.
    Cylinder { center: Vec3, radius: f64, half_len: f64, rot: Rotation },
}

impl Primitive {
    fn area(&self) -> f64 {
        match self {
            // Knud Thomsen's approximation is plenty for sampling weights.
            Primitive::Ellipsoid { radii, .. } => {
                let p = 1.6075;
                let (a, b, c) = (radii.x.powf(p), radii.y.powf(p), radii.z.powf(p));
                4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
            Primitive::Cuboid { half, .. } => 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z),
            Primitive::Cylinder { radius, half_len, .. } => {
                2.0 * PI * radius * (2.0 * half_len) + 2.0 * PI * radius * radius
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match self {
            Primitive::Ellipsoid { center, radii, rot } => {
                let d = unit_vector(rng);
                center + rot.apply(&d.component_mul(radii))
            }
            Primitive::Cuboid { center, half, rot } => {
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let mut local = Vec3::new(
                    rng.random_range(-half.x..=half.x),
                    rng.random_range(-half.y..=half.y),
                    rng.random_range(-half.z..=half.z),
                );
                local[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                center + rot.apply(&local)
            }
            Primitive::Cylinder { center, radius, half_len, rot } => {
                let side = 2.0 * half_len;
                let cap = radius;
                let theta = rng.random_range(0.0..2.0 * PI);
                let local = if rng.random_range(0.0..side + cap) < side {
                    Vec3::new(radius * theta.cos(), rng.random_range(-half_len..=*half_len), radius * theta.sin())
                } else {
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let y = if rng.random_bool(0.5) { *half_len } else { -half_len };
                    Vec3::new(r * theta.cos(), y, r * theta.sin())
                };
                center + rot.apply(&local)
            }
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: Rng>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return Rotation::from_quaternion(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    }
}

fn random_primitive(rng: &mut ChaCha8Rng, kind: u8, center: Vec3) -> Primitive {
    let rot = random_rotation_with(rng);
    match kind {
        0 => Primitive::Ellipsoid {
            center,
            radii: Vec3::new(
                rng.random_range(0.06..0.2),
                rng.random_range(0.06..0.2),
                rng.random_range(0.06..0.2),
            ),
            rot,
        },
        1 => Primitive::Cuboid {
            center,
            half: Vec3::new(
                rng.random_range(0.04..0.18),
                rng.random_range(0.04..0.18),
                rng.random_range(0.04..0.18),
            ),
            rot,
        },
        _ => Primitive::Cylinder {
            center,
            radius: rng.random_range(0.04..0.12),
            half_len: rng.random_range(0.08..0.22),
            rot,
        },
    }
}

fn sample_primitives(rng: &mut ChaCha8Rng, prims: &[Primitive], count: usize) -> Vec<Vec3> {
    let areas: Vec<f64> = prims.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut which = prims.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    which = i;
                    break;
                }
                pick -= a;
            }
            prims[which].sample(rng)
        })
        .collect()
}

/// Generate a cloud that is exactly mirror-symmetric about its ground-truth
/// planes before isotropic Gaussian noise is added. Point counts are rounded
/// down to a multiple of the number of mirror copies.
pub fn gen_shape(recipe: &ShapeRecipe) -> (Cloud, Vec<Plane>) {
    if recipe.family == Family::Vehicle {
        let (c, p) = gen_vehicle(recipe.seed, recipe.point_count, recipe.noise_sigma);
        return (c, vec![p]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let x_plane = Plane::new(Vec3::x(), 0.0).expect("unit normal");
    let z_plane = Plane::new(Vec3::z(), 0.0).expect("unit normal");
    let (planes, copies) = match recipe.family {
        Family::BiSymmetric => (vec![x_plane, z_plane], 4),
        _ => (vec![x_plane], 2),
    };
    let count = rng.random_range(2..=4);
    let prims: Vec<Primitive> = (0..count)
        .map(|_| {
            // Centres sit off the mirror planes so halves rarely coincide with
            // accidental extra symmetries.
            let center = Vec3::new(
                rng.random_range(0.02..0.28),
                rng.random_range(-0.25..0.25),
                match recipe.family {
                    Family::BiSymmetric => rng.random_range(0.02..0.28),
                    _ => rng.random_range(-0.25..0.25),
                },
            );
            let kind = match recipe.family {
                Family::MirroredBlob => 0,
                Family::BoxUnion => 1,
                Family::CylinderCluster => 2,
                Family::BiSymmetric | Family::Vehicle => rng.random_range(0..2),
            };
            random_primitive(&mut rng, kind, center)
        })
        .collect();
    let base = sample_primitives(&mut rng, &prims, recipe.point_count / copies);
    let mut points = base.clone();
    for p in &planes {
        let mirrored: Vec<Vec3> = points.iter().map(|q| reflect_point(q, p)).collect();
        points.extend(mirrored);
    }
    if recipe.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, recipe.noise_sigma).expect("finite sigma");
        for p in &mut points {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    (Cloud::new(points), planes)
}

/// Vehicle-like cloud in its own frame (metres): heading `+x`, up `+y`,
/// lateral `z`. Symmetric about `z = 0`.
pub fn gen_vehicle(seed: u64, point_count: usize, noise_sigma: f64) -> (Cloud, Plane) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = Rotation::identity();
    let length = rng.random_range(3.6..4.9);
    let width = rng.random_range(1.6..2.0);
    let body_h = rng.random_range(0.6..0.9);
    let clearance = rng.random_range(0.25..0.4);
    let cabin_h = rng.random_range(0.45..0.7);
    let cabin_len = length * rng.random_range(0.4..0.6);
    let cabin_shift = rng.random_range(-0.25..0.1) * length;
    let wheel_r = rng.random_range(0.3..0.38);
    let axle = length * rng.random_range(0.3..0.36);
    let lateral = Rotation::about_axis(&Vec3::x(), PI / 2.0);
    let mut prims = vec![
        Primitive::Cuboid {
            center: Vec3::new(0.0, clearance + body_h / 2.0, 0.0),
            half: Vec3::new(length / 2.0, body_h / 2.0, width / 2.0),
            rot: id,
        },
        Primitive::Cuboid {
            center: Vec3::new(cabin_shift, clearance + body_h + cabin_h / 2.0, 0.0),
            half: Vec3::new(cabin_len / 2.0, cabin_h / 2.0, width * 0.42),
            rot: id,
        },
    ];
    for x in [-axle, axle] {
        prims.push(Primitive::Cylinder {
            center: Vec3::new(x, wheel_r, width / 2.0 - 0.12),
            radius: wheel_r,
            half_len: 0.1,
            rot: lateral,
        });
    }
    // Keep the +z half of the surface; the mirror completes the body.
    let mut half = Vec::with_capacity(point_count / 2);
    while half.len() < point_count / 2 {
        let batch = sample_primitives(&mut rng, &prims, point_count);
        half.extend(batch.into_iter().filter(|p| p.z > 0.0));
    }
    half.truncate(point_count / 2);
    let plane = Plane::new(Vec3::z(), 0.0).expect("unit normal");
    let mut points = half.clone();
    points.extend(half.iter().map(|p| reflect_point(p, &plane)));
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for p in &mut points {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    (Cloud::new(points), plane)
}

/// Pinhole camera looking at `look_at` from `eye`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub image_size: usize,
    /// World-space radius each point occludes with in the depth buffer.
    /// `None` picks `3/√n` for an `n`-point normalized cloud.
    pub splat_radius: Option<f64>,
}

impl Viewpoint {
    /// Eye uniformly distributed on a sphere of `radius` around the origin.
    pub fn random(seed: u64, radius: f64, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Viewpoint {
            eye: unit_vector(&mut rng) * radius,
            look_at: Vec3::zeros(),
            image_size,
            splat_radius: None,
        }
    }
}

pub const DEFAULT_IMAGE_SIZE: usize = 128;
const DEPTH_TOLERANCE: f64 = 4.0;
const SPLAT_FACTOR: f64 = 3.0;

/// Points of `c` visible from `v`.
///
/// Points are projected into an `image_size²` depth buffer in which each point
/// occludes a disc of `splat_radius`. A point survives when it is the nearest
/// point projecting into its pixel and no splat in front of it is more than
/// `4·splat_radius` closer to the eye.
pub fn partial_view(c: &Cloud, v: &Viewpoint) -> Result<Cloud, DataError> {
    if v.image_size < 16 {
        return Err(DataError::InvalidViewpoint(format!("image size {} < 16", v.image_size)));
    }
    let radius = c
        .points
        .iter()
        .map(|p| (p - v.look_at).norm())
        .fold(0.0, f64::max);
    let dist = (v.eye - v.look_at).norm();
    if !(dist > radius) {
        return Err(DataError::InvalidViewpoint(format!(
            "eye at distance {dist} is inside the cloud radius {radius}"
        )));
    }
    let fwd = (v.look_at - v.eye) / dist;
    let up_hint = if fwd.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
    let right = fwd.cross(&up_hint).normalize();
    let up = right.cross(&fwd);
    let tan_half = radius / (dist * dist - radius * radius).sqrt();
    let size = v.image_size;
    let half_px = size as f64 / 2.0;
    let splat = v
        .splat_radius
        .unwrap_or_else(|| SPLAT_FACTOR / (c.points.len().max(1) as f64).sqrt());

    struct Proj {
        px: usize,
        py: usize,
        depth: f64,
        fx: f64,
        fy: f64,
    }
    let projected: Vec<Option<Proj>> = c
        .points
        .iter()
        .map(|p| {
            let rel = p - v.eye;
            let depth = rel.dot(&fwd);
            if depth <= 1e-9 {
                return None;
            }
            let fx = ((rel.dot(&right) / depth) / tan_half + 1.0) * half_px;
            let fy = ((rel.dot(&up) / depth) / tan_half + 1.0) * half_px;
            if fx < 0.0 || fy < 0.0 || fx >= size as f64 || fy >= size as f64 {
                return None;
            }
            Some(Proj {
                px: fx as usize,
                py: fy as usize,
                depth,
                fx,
                fy,
            })
        })
        .collect();

    let mut zbuf = vec![f64::INFINITY; size * size];
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; size * size];
    for (i, pr) in projected.iter().enumerate() {
        let Some(pr) = pr else { continue };
        let pix = pr.py * size + pr.px;
        match owner[pix] {
            Some((d, _)) if d <= pr.depth => {}
            _ => owner[pix] = Some((pr.depth, i)),
        }
        let r_px = (splat / pr.depth / tan_half * half_px).min(half_px);
        let (x0, x1) = ((pr.fx - r_px).floor().max(0.0) as usize, ((pr.fx + r_px).ceil() as usize).min(size));
        let (y0, y1) = ((pr.fy - r_px).floor().max(0.0) as usize, ((pr.fy + r_px).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - pr.fx, y as f64 + 0.5 - pr.fy);
                if dx * dx + dy * dy <= r_px * r_px || (x == pr.px && y == pr.py) {
                    let z = &mut zbuf[y * size + x];
                    if pr.depth < *z {
                        *z = pr.depth;
                    }
                }
            }
        }
    }
    let tol = DEPTH_TOLERANCE * splat;
    let mut kept: Vec<usize> = owner
        .iter()
        .enumerate()
        .filter_map(|(pix, o)| o.filter(|(d, _)| *d <= zbuf[pix] + tol).map(|(_, i)| i))
        .collect();
    if kept.is_empty() {
        return Err(DataError::EmptyResult);
    }
    kept.sort_unstable();
    Ok(Cloud {
        points: kept.iter().map(|&i| c.points[i]).collect(),
        kind: CloudKind::Partial,
        norm: c.norm,
    })
}

/// Apply `p ↦ r·p` to a cloud and its planes.
pub fn rotate_sample(c: &Cloud, planes: &[Plane], r: &Rotation) -> (Cloud, Vec<Plane>) {
    let cloud = Cloud {
        points: c.points.iter().map(|p| r.apply(p)).collect(),
        kind: c.kind,
        norm: NormRecord::default(),
    };
    let planes = planes
        .iter()
        .map(|s| crate::geometry::transform_plane(s, r, &Vec3::zeros(), 1.0))
        .collect();
    (cloud, planes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One dataset manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub family: Family,
    pub seed: u64,
    pub split: Split,
}

/// Deterministic manifest cycling through `families`.
pub fn make_manifest(families: &[Family], train: usize, val: usize, test: usize, seed: u64) -> Vec<ManifestRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(train + val + test);
    for (split, n) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
        for i in 0..n {
            rows.push(ManifestRow {
                id: format!("{split}_{i:05}"),
                family: families[i % families.len()],
                seed: rng.random(),
                split,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{sde, GroundTruth};

    #[test]
    fn noiseless_shapes_are_exact_mirrors() {
        for family in Family::ALL {
            let mut r = ShapeRecipe::new(family, 17);
            r.noise_sigma = 0.0;
            let (c, planes) = gen_shape(&r);
            assert_eq!(c.len(), 2048);
            let gt = GroundTruth::new(planes.clone(), c.points.clone());
            for p in &planes {
                assert!(sde(p, &gt, 1000, 1) < 1e-12, "{family}");
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let r = ShapeRecipe::new(Family::BoxUnion, 5);
        assert_eq!(gen_shape(&r).0, gen_shape(&r).0);
        let r2 = ShapeRecipe::new(Family::BoxUnion, 6);
        assert_ne!(gen_shape(&r).0, gen_shape(&r2).0);
    }

    #[test]
    fn rotations_are_proper_and_seeded() {
        for s in 0..100 {
            let r = random_rotation(s);
            let m = r.matrix();
            assert!((m.transpose() * m - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
            assert_eq!(r, random_rotation(s));
        }
    }

    #[test]
    fn nearer_of_two_collinear_points_wins() {
        let c = Cloud::new(vec![
            Vec3::new(-0.3, 0.0, 0.0),
            Vec3::new(0.2, 0.0, 0.0),
            Vec3::new(0.0, 0.4, 0.0),
        ]);
        let v = Viewpoint {
            eye: Vec3::new(2.0, 0.0, 0.0),
            look_at: Vec3::zeros(),
            image_size: 32,
            splat_radius: Some(0.01),
        };
        let out = partial_view(&c, &v).unwrap();
        assert_eq!(out.kind, CloudKind::Partial);
        assert!(out.points.contains(&Vec3::new(0.2, 0.0, 0.0)));
        assert!(!out.points.contains(&Vec3::new(-0.3, 0.0, 0.0)));
    }

    #[test]
    fn eye_inside_cloud_is_rejected() {
        let c = Cloud::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]);
        let v = Viewpoint {
            eye: Vec3::new(0.5, 0.0, 0.0),
            look_at: Vec3::zeros(),
            image_size: 32,
            splat_radius: None,
        };
        assert!(matches!(partial_view(&c, &v), Err(DataError::InvalidViewpoint(_))));
    }

    #[test]
    fn manifest_is_deterministic() {
        let a = make_manifest(&Family::ALL, 5, 2, 2, 3);
        assert_eq!(a, make_manifest(&Family::ALL, 5, 2, 2, 3));
        assert_eq!(a.len(), 9);
        assert_eq!(a[6].split, Split::Val);
        assert_eq!(a[1].family, Family::BoxUnion);
    }

    #[test]
    fn vehicle_is_mirror_symmetric() {
        let (c, plane) = gen_vehicle(3, 2048, 0.0);
        let gt = GroundTruth::new(vec![plane], c.points.clone());
        assert!(sde(&plane, &gt, 500, 0) < 1e-12);
        let ymin = c.points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        assert!(ymin > -0.2);
    }

    #[test]
    fn mean_rotation_angle_matches_haar_measure() {
        // Haar-uniform SO(3): density (1 − cos θ)/π, mean π/2 + 2/π.
        let expect = (PI / 2.0 + 2.0 / PI).to_degrees();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mean = (0..n).map(|_| random_rotation_with(&mut rng).angle()).sum::<f64>() / n as f64;
        assert!((mean.to_degrees() - expect).abs() < 1.0, "{} vs {expect}", mean.to_degrees());
        assert!((expect - 126.4756).abs() < 1e-3);
    }

    fn sphere(n: usize, seed: u64) -> Cloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Cloud::new((0..n).map(|_| unit_vector(&mut rng) * 0.5).collect())
    }

    #[test]
    fn sphere_back_face_is_occluded() {
        let c = sphere(20_000, 1);
        for size in [64, 128] {
            let v = Viewpoint {
                eye: Vec3::new(2.0, 0.0, 0.0),
                look_at: Vec3::zeros(),
                image_size: size,
                splat_radius: None,
            };
            let out = partial_view(&c, &v).unwrap();
            // Coordinates are for the unit sphere; this one has radius 0.5.
            let worst = out.points.iter().map(|p| p.x / 0.5).fold(f64::INFINITY, f64::min);
            assert!(worst >= -0.2, "size {size}: kept x = {worst}");
        }
    }

    #[test]
    fn distant_eye_sees_about_half_a_sphere() {
        let c = sphere(20_000, 2);
        let v = Viewpoint {
            eye: Vec3::new(0.0, 0.0, 200.0),
            look_at: Vec3::zeros(),
            image_size: 512,
            splat_radius: None,
        };
        let out = partial_view(&c, &v).unwrap();
        let frac = out.len() as f64 / c.len() as f64;
        assert!((frac - 0.5).abs() < 0.1, "kept fraction {frac}");
    }

    #[test]
    fn partial_view_is_a_sub_multiset() {
        let r = ShapeRecipe::new(Family::CylinderCluster, 9);
        let (mut c, _) = gen_shape(&r);
        // Duplicate some points so multiplicity matters.
        let dup: Vec<Vec3> = c.points[..100].to_vec();
        c.points.extend(dup);
        for s in 0..5 {
            let v = Viewpoint::random(s, 1.0, DEFAULT_IMAGE_SIZE);
            let out = partial_view(&c, &v).unwrap();
            let key = |p: &Vec3| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
            let mut pool: std::collections::HashMap<[u64; 3], usize> = Default::default();
            for p in &c.points {
                *pool.entry(key(p)).or_default() += 1;
            }
            for p in &out.points {
                let e = pool.get_mut(&key(p)).expect("kept point comes from the input");
                assert!(*e > 0);
                *e -= 1;
            }
        }
    }

    #[test]
    fn bi_symmetric_noise_floor() {
        // A reflected noisy point lands next to its noisy partner, so the
        // squared distance to it is a sum of six N(0, σ²) squares: 6σ².
        // A nearer third point can only lower the value.
        let sigma = 0.005;
        let floor = 6.0 * sigma * sigma;
        for seed in 0..4 {
            let mut r = ShapeRecipe::new(Family::BiSymmetric, seed);
            r.noise_sigma = sigma;
            let (c, planes) = gen_shape(&r);
            let gt = GroundTruth::new(planes.clone(), c.points.clone());
            for p in &planes {
                let e = sde(p, &gt, 2048, seed);
                assert!(e < 1.15 * floor && e > 0.25 * floor, "seed {seed}: {e:e} vs {floor:e}");
            }
        }
    }
}
