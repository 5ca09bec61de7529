//! Oriented box refinement from a detected symmetry plane, plus the
//! orientation-error bookkeeping used to evaluate it.
//!
//! World frame is `y`-up. A box with yaw `ψ` maps its local frame (heading
//! `+x`, up `+y`, lateral `z`) to the world by a rotation of `ψ` about `+y`,
//! so its heading is `(cos ψ, 0, −sin ψ)` and its lateral mid-plane has normal
//! `(sin ψ, 0, cos ψ)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::gen_vehicle;
use crate::geometry::{transform_plane, Cloud, GeometryError, Plane, Rotation, Vec3};
use crate::grid::{normalize_cloud, GridError};
use crate::network::{forward, ModelConfig, ModelParams, NetworkError};

/// Minimum length of the ground-projected plane normal.
pub const MIN_GROUND_NORMAL: f64 = 0.1;
pub const MIN_POINTS_IN_BOX: usize = 32;
pub const CROP_INFLATION: f64 = 1.1;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("plane normal is near vertical (ground projection {0:.3} ≤ {MIN_GROUND_NORMAL})")]
    DegenerateNormal(f64),
    #[error("only {0} points inside the box (need {MIN_POINTS_IN_BOX})")]
    TooFewPoints(usize),
    #[error("{0} predictions for {1} ground-truth boxes")]
    LengthMismatch(usize, usize),
    #[error("box size must be positive, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    /// `(length, width, height)` along heading, lateral and up.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, size: [f64; 3], yaw: f64) -> Result<Self, RefineError> {
        if !size.iter().all(|s| *s > 0.0) {
            return Err(RefineError::InvalidSize(size));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::about_axis(&Vec3::y(), self.yaw)
    }

    pub fn heading(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), 0.0, -self.yaw.sin())
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation().inverse().apply(&(p - self.center))
    }

    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        self.rotation().apply(q) + self.center
    }

    /// Whether `p` lies inside the box scaled by `inflate`.
    pub fn contains(&self, p: &Vec3, inflate: f64) -> bool {
        let q = self.to_local(p);
        let [l, w, h] = self.size;
        q.x.abs() <= 0.5 * l * inflate && q.y.abs() <= 0.5 * h * inflate && q.z.abs() <= 0.5 * w * inflate
    }

    /// The box's own lateral mid-plane in world coordinates.
    pub fn mid_plane(&self) -> Plane {
        Plane::through(&self.center, Vec3::new(self.yaw.sin(), 0.0, self.yaw.cos())).expect("unit normal")
    }
}

/// Seeded Gaussian noise on yaw and on every centre coordinate.
pub fn simulate_detections(gt: &[Box3D], yaw_sigma: f64, center_sigma: f64, seed: u64) -> Vec<Box3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = Normal::new(0.0, yaw_sigma).expect("finite sigma");
    let ctr = Normal::new(0.0, center_sigma).expect("finite sigma");
    gt.iter()
        .map(|b| {
            let dc = Vec3::new(ctr.sample(&mut rng), ctr.sample(&mut rng), ctr.sample(&mut rng));
            let dy = yaw.sample(&mut rng);
            Box3D {
                center: b.center + dc,
                size: b.size,
                yaw: wrap_angle(b.yaw + dy),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOptions {
    /// Also move the centre onto the plane.
    pub translate: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions { translate: true }
    }
}

/// Rotate (and optionally shift) `b` so that `s` becomes its lateral
/// mid-plane. Of the two headings parallel to the plane the one nearer the
/// current yaw is kept.
pub fn refine_box(b: &Box3D, s: &Plane, opts: &RefineOptions) -> Result<Box3D, RefineError> {
    let n = s.normal();
    let ground = Vec3::new(n.x, 0.0, n.z);
    let len = ground.norm();
    if !(len > MIN_GROUND_NORMAL) {
        return Err(RefineError::DegenerateNormal(len));
    }
    let base = ground.x.atan2(ground.z);
    let yaw = [base, base + PI]
        .into_iter()
        .map(wrap_angle)
        .min_by(|a, c| {
            let da = wrap_angle(a - b.yaw).abs();
            let dc = wrap_angle(c - b.yaw).abs();
            da.total_cmp(&dc)
        })
        .expect("two candidates");
    let center = if opts.translate {
        let t = (s.offset() - n.dot(&b.center)) / len;
        b.center + ground / len * t
    } else {
        b.center
    };
    Ok(Box3D {
        center,
        size: b.size,
        yaw,
    })
}

/// Anything that can propose a symmetry plane for a normalized cloud.
pub trait PlaneEstimator: Sync {
    fn estimate(&self, normalized: &Cloud) -> Result<Plane, RefineError>;
}

/// The network as a [`PlaneEstimator`].
pub struct ModelEstimator<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl PlaneEstimator for ModelEstimator<'_> {
    fn estimate(&self, normalized: &Cloud) -> Result<Plane, RefineError> {
        Ok(forward(normalized, self.params, self.config)?.plane)
    }
}

/// The points inside `b` (inflated) expressed in the box frame.
pub fn crop_to_box(points: &Cloud, b: &Box3D) -> Result<Cloud, RefineError> {
    let local: Vec<Vec3> = points
        .points
        .iter()
        .filter(|p| b.contains(p, CROP_INFLATION))
        .map(|p| b.to_local(p))
        .collect();
    if local.len() < MIN_POINTS_IN_BOX {
        return Err(RefineError::TooFewPoints(local.len()));
    }
    Ok(Cloud::new(local))
}

/// Estimate the world-frame symmetry plane of the object inside `b`.
pub fn estimate_plane_in_box(points: &Cloud, b: &Box3D, est: &dyn PlaneEstimator) -> Result<Plane, RefineError> {
    let local = crop_to_box(points, b)?;
    let (normed, rec) = normalize_cloud(&local)?;
    let s = est.estimate(&normed)?;
    let in_box = rec.invert_plane(&s);
    Ok(transform_plane(&in_box, &b.rotation(), &b.center, 1.0).canonical())
}

/// Per-box `min_k |wrap(pred − gt + k)|` over `k ∈ {0, π}` and their mean.
pub fn orientation_error(pred: &[Box3D], gt: &[Box3D]) -> Result<(Vec<f64>, f64), RefineError> {
    if pred.len() != gt.len() {
        return Err(RefineError::LengthMismatch(pred.len(), gt.len()));
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let e = wrap_angle(p.yaw - g.yaw).abs();
            e.min(PI - e)
        })
        .collect();
    let mean = if errs.is_empty() {
        0.0
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    };
    Ok((errs, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub yaw_before: f64,
    pub yaw_after: f64,
    pub yaw_gt: f64,
    pub error_before: f64,
    pub error_after: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub rows: Vec<ReportRow>,
    pub mean_before: f64,
    pub mean_after: f64,
}

impl RefinementReport {
    pub fn new(
        ids: &[String],
        before: &[Box3D],
        after: &[Box3D],
        gt: &[Box3D],
        status: &[String],
    ) -> Result<Self, RefineError> {
        if after.len() != before.len() {
            return Err(RefineError::LengthMismatch(after.len(), before.len()));
        }
        let (eb, mean_before) = orientation_error(before, gt)?;
        let (ea, mean_after) = orientation_error(after, gt)?;
        let rows = (0..gt.len())
            .map(|i| ReportRow {
                id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                yaw_before: before[i].yaw,
                yaw_after: after[i].yaw,
                yaw_gt: gt[i].yaw,
                error_before: eb[i],
                error_after: ea[i],
                status: status.get(i).cloned().unwrap_or_else(|| "ok".into()),
            })
            .collect();
        Ok(RefinementReport {
            rows,
            mean_before,
            mean_after,
        })
    }

    /// `1 − after/before`; zero when there was nothing to improve.
    pub fn relative_reduction(&self) -> f64 {
        if self.mean_before > 0.0 {
            1.0 - self.mean_after / self.mean_before
        } else {
            0.0
        }
    }
}

/// Outcome for one box: refined when the estimate passed every gate,
/// otherwise the input box and the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub boxed: Box3D,
    pub status: String,
}

/// Refine every box against its own cloud, in parallel, preserving order.
pub fn refine_all(
    clouds: &[Cloud],
    boxes: &[Box3D],
    est: &dyn PlaneEstimator,
    opts: &RefineOptions,
) -> Result<Vec<Refined>, RefineError> {
    if clouds.len() != boxes.len() {
        return Err(RefineError::LengthMismatch(clouds.len(), boxes.len()));
    }
    Ok(clouds
        .par_iter()
        .zip(boxes.par_iter())
        .map(|(c, b)| {
            match estimate_plane_in_box(c, b, est).and_then(|s| refine_box(b, &s, opts)) {
                Ok(r) => Refined {
                    boxed: r,
                    status: "ok".into(),
                },
                Err(e) => Refined {
                    boxed: *b,
                    status: format!("unchanged: {e}"),
                },
            }
        })
        .collect())
}

/// A vehicle placed in the world with its ground-truth box and plane.
#[derive(Debug, Clone)]
pub struct VehicleScene {
    pub cloud: Cloud,
    pub gt_box: Box3D,
    pub plane: Plane,
}

/// Vehicle-like cloud at a seeded random yaw and ground position.
pub fn vehicle_scene(seed: u64, point_count: usize, noise_sigma: f64) -> VehicleScene {
    use rand::Rng;
    let (local, _) = gen_vehicle(seed, point_count, noise_sigma);
    let (mut lo, mut hi) = (local.points[0], local.points[0]);
    for p in &local.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    // Symmetric about z = 0 by construction; centre the box there exactly.
    let half_w = hi.z.max(-lo.z);
    let mid = Vec3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea1);
    let gt_box = Box3D::new(
        Vec3::new(rng.random_range(-30.0..30.0), mid.y, rng.random_range(-30.0..30.0)),
        [hi.x - lo.x, 2.0 * half_w, hi.y - lo.y],
        rng.random_range(-PI..PI),
    )
    .expect("positive extents");
    let cloud = Cloud::new(local.points.iter().map(|p| gt_box.to_world(&(p - mid))).collect());
    VehicleScene {
        cloud,
        gt_box,
        plane: gt_box.mid_plane(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    id: String,
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RefineError + '_ {
    move |source| RefineError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_boxes(path: &Path) -> Result<Vec<(String, Box3D)>, RefineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: BoxRow = row.map_err(csv_err(path))?;
        out.push((r.id, Box3D::new(Vec3::new(r.cx, r.cy, r.cz), [r.l, r.w, r.h], r.yaw)?));
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[(String, Box3D)]) -> Result<(), RefineError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (id, b) in boxes {
        w.serialize(BoxRow {
            id: id.clone(),
            cx: b.center.x,
            cy: b.center.y,
            cz: b.center.z,
            l: b.size[0],
            w: b.size[1],
            h: b.size[2],
            yaw: b.yaw,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

pub fn write_report(path: &Path, report: &RefinementReport) -> Result<(), RefineError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in &report.rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(yaw: f64) -> Box3D {
        Box3D::new(Vec3::new(1.0, 0.8, -2.0), [4.2, 1.8, 1.5], yaw).unwrap()
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mid_plane_passes_through_centre_and_is_lateral() {
        let b = unit_box(0.7);
        let s = b.mid_plane();
        assert!((s.normal().dot(&b.center) - s.offset()).abs() < 1e-12);
        assert!(s.normal().dot(&b.heading()).abs() < 1e-12);
        assert!((b.to_world(&Vec3::x()) - b.center - b.heading()).norm() < 1e-12);
    }

    #[test]
    fn aligned_plane_changes_nothing() {
        let b = unit_box(0.4);
        let r = refine_box(&b, &b.mid_plane(), &RefineOptions::default()).unwrap();
        assert!((r.center - b.center).norm() < 1e-12);
        assert!(wrap_angle(r.yaw - b.yaw).abs() < 1e-12);
        assert_eq!(r.size, b.size);
    }

    #[test]
    fn yaw_snaps_to_plane() {
        let b = Box3D::new(Vec3::new(0.0, 0.5, 0.0), [4.0, 1.8, 1.5], 10f64.to_radians()).unwrap();
        // Vertical plane containing world x through the centre.
        let s = Plane::new(Vec3::z(), 0.0).unwrap();
        let r = refine_box(&b, &s, &RefineOptions::default()).unwrap();
        assert_eq!(r.yaw, 0.0);
        assert_eq!(r.center, b.center);
        let back = Box3D { yaw: 3.0, ..b };
        assert_eq!(refine_box(&back, &s, &RefineOptions::default()).unwrap().yaw, PI);
    }

    #[test]
    fn offset_plane_moves_centre_along_normal() {
        let b = unit_box(0.0);
        let n = Vec3::new(0.0, 0.0, 1.0);
        let s = Plane::new(n, n.dot(&b.center) + 0.2).unwrap();
        let r = refine_box(&b, &s, &RefineOptions::default()).unwrap();
        assert!((r.center - (b.center + 0.2 * n)).norm() < 1e-12);
        let still = refine_box(&b, &s, &RefineOptions { translate: false }).unwrap();
        assert_eq!(still.center, b.center);
    }

    #[test]
    fn tilted_plane_shift_is_horizontal_and_exact() {
        let b = unit_box(0.2);
        let s = Plane::new(Vec3::new(0.3, 0.5, 0.8), 1.7).unwrap();
        let r = refine_box(&b, &s, &RefineOptions::default()).unwrap();
        assert!((s.normal().dot(&r.center) - s.offset()).abs() < 1e-12);
        assert_eq!(r.center.y, b.center.y);
        let again = refine_box(&r, &s, &RefineOptions::default()).unwrap();
        assert!((again.center - r.center).norm() < 1e-12);
        assert!(wrap_angle(again.yaw - r.yaw).abs() < 1e-12);
    }

    #[test]
    fn horizontal_plane_is_rejected() {
        let s = Plane::new(Vec3::new(0.05, 1.0, 0.05), 0.0).unwrap();
        assert!(matches!(
            refine_box(&unit_box(0.0), &s, &RefineOptions::default()),
            Err(RefineError::DegenerateNormal(_))
        ));
    }

    #[test]
    fn orientation_error_folds_pi() {
        let g = [unit_box(0.0)];
        assert_eq!(orientation_error(&g, &g).unwrap().1, 0.0);
        let (e, _) = orientation_error(&[unit_box(PI)], &g).unwrap();
        assert!(e[0] < 1e-15);
        let (e, _) = orientation_error(&[unit_box(0.3)], &g).unwrap();
        assert!((e[0] - 0.3).abs() < 1e-15);
        assert!(matches!(
            orientation_error(&[], &g),
            Err(RefineError::LengthMismatch(0, 1))
        ));
    }

    #[test]
    fn detections_noise() {
        let gt: Vec<Box3D> = (0..10_000).map(|i| unit_box(i as f64 * 1e-3)).collect();
        assert_eq!(simulate_detections(&gt, 0.0, 0.0, 1), gt);
        let sigma = 0.087;
        let det = simulate_detections(&gt, sigma, 0.1, 2);
        assert_eq!(det, simulate_detections(&gt, sigma, 0.1, 2));
        let mean = det
            .iter()
            .zip(&gt)
            .map(|(d, g)| wrap_angle(d.yaw - g.yaw).abs())
            .sum::<f64>()
            / gt.len() as f64;
        // Half-normal mean.
        let expect = sigma * (2.0 / PI).sqrt();
        assert!((mean - expect).abs() < 0.1 * expect, "{mean} vs {expect}");
        assert!(det.iter().zip(&gt).all(|(d, g)| d.size == g.size));
    }

    struct Fixed(Plane);

    impl PlaneEstimator for Fixed {
        fn estimate(&self, _: &Cloud) -> Result<Plane, RefineError> {
            Ok(self.0)
        }
    }

    /// The crop frame's own `z = 0` plane, bypassing the network.
    struct Local;

    impl PlaneEstimator for Local {
        fn estimate(&self, normalized: &Cloud) -> Result<Plane, RefineError> {
            // The crop has an identity record, so `norm` is box → normalized.
            Ok(normalized.norm.apply_plane(&Plane::new(Vec3::z(), 0.0)?))
        }
    }

    #[test]
    fn crop_round_trip_is_identity() {
        let scene = vehicle_scene(4, 2048, 0.0);
        let s = estimate_plane_in_box(&scene.cloud, &scene.gt_box, &Local).unwrap();
        let want = scene.plane.canonical();
        assert!((s.normal() - want.normal()).norm() < 1e-10);
        assert!((s.offset() - want.offset()).abs() < 1e-10);
        // A detector box off by a yaw still maps its own frame back exactly.
        let det = Box3D { yaw: scene.gt_box.yaw + 0.1, ..scene.gt_box };
        let s = estimate_plane_in_box(&scene.cloud, &det, &Local).unwrap();
        let want = det.mid_plane().canonical();
        assert!((s.normal() - want.normal()).norm() < 1e-10);
        assert!((s.offset() - want.offset()).abs() < 1e-10);
    }

    #[test]
    fn too_few_points() {
        let c = Cloud::new(vec![Vec3::zeros(); 10]);
        let b = Box3D::new(Vec3::zeros(), [1.0, 1.0, 1.0], 0.0).unwrap();
        let est = Fixed(Plane::new(Vec3::z(), 0.0).unwrap());
        assert!(matches!(
            estimate_plane_in_box(&c, &b, &est),
            Err(RefineError::TooFewPoints(10))
        ));
    }

    #[test]
    fn oracle_planes_remove_all_error() {
        let scenes: Vec<VehicleScene> = (0..50).map(|s| vehicle_scene(s, 1024, 0.01)).collect();
        let gt: Vec<Box3D> = scenes.iter().map(|s| s.gt_box).collect();
        let det = simulate_detections(&gt, 0.087, 0.1, 3);
        let after: Vec<Box3D> = det
            .iter()
            .zip(&scenes)
            .map(|(d, s)| refine_box(d, &s.plane, &RefineOptions::default()).unwrap())
            .collect();
        let (_, before) = orientation_error(&det, &gt).unwrap();
        let (errs, mean) = orientation_error(&after, &gt).unwrap();
        assert!(before > 0.05);
        assert!(mean < 1e-12 && errs.iter().all(|e| *e < 1e-12));
        for (a, s) in after.iter().zip(&scenes) {
            let p = s.plane;
            assert!((p.normal().dot(&a.center) - p.offset()).abs() < 1e-9);
        }
    }

    #[test]
    fn box_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.csv");
        let boxes = vec![
            ("a".to_string(), unit_box(0.1)),
            ("b".to_string(), unit_box(-3.0)),
        ];
        write_boxes(&path, &boxes).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,cx,cy,cz,l,w,h,yaw\n"));
        assert_eq!(read_boxes(&path).unwrap(), boxes);
    }
}
