//! Training losses and evaluation metrics: offsets L1, ground-truth error
//! (GTE), symmetry distance error (SDE) and normal angular error.

use nalgebra::Vector4;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use symslice_autograd::{Graph, Result as AdResult, Var};

use crate::geometry::{reflect_point, GeometryError, Plane, Vec3, DEGENERATE_NORMAL};
use crate::kdtree::KdIndex;

pub const DEFAULT_SDE_SAMPLES: usize = 1000;

/// All symmetry planes of an object plus the point set used for SDE.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    planes: Vec<Plane>,
    object_points: Vec<Vec3>,
    index: KdIndex,
}

impl GroundTruth {
    /// Panics if `planes` or `object_points` is empty.
    pub fn new(planes: Vec<Plane>, object_points: Vec<Vec3>) -> Self {
        assert!(!planes.is_empty(), "ground truth needs at least one plane");
        assert!(!object_points.is_empty(), "ground truth needs object points");
        let index = KdIndex::build(&object_points);
        GroundTruth {
            planes: planes.iter().map(Plane::canonical).collect(),
            object_points,
            index,
        }
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn object_points(&self) -> &[Vec3] {
        &self.object_points
    }

    pub fn index(&self) -> &KdIndex {
        &self.index
    }
}

pub fn offsets_loss(g: &mut Graph, pred: Var, target: Var) -> AdResult<Var> {
    g.l1_mean(pred, target)
}

/// Unit GTE 4-vector `(n, d)/‖(n, d)‖` for a solver output `β = (a, b, c, d′)`
/// with `a·x + b·y + c·z + d′ = 0`.
pub fn beta_to_unit4(beta: &[f64; 4]) -> Result<Vector4<f64>, GeometryError> {
    let nn = (beta[0] * beta[0] + beta[1] * beta[1] + beta[2] * beta[2]).sqrt();
    if !(nn >= DEGENERATE_NORMAL) {
        return Err(GeometryError::Degenerate(nn));
    }
    let v = Vector4::new(beta[0], beta[1], beta[2], -beta[3]);
    Ok(v / v.norm())
}

/// Closest ground-truth match for a unit 4-vector: `(plane index, sign, GTE)`
/// where the GTE-minimizing plane and sign are chosen jointly.
pub fn closest_gt(q: &Vector4<f64>, gt: &GroundTruth) -> (usize, f64, f64) {
    let mut best = (0, 1.0, f64::INFINITY);
    for (i, p) in gt.planes.iter().enumerate() {
        let u = p.unit4();
        for sign in [1.0, -1.0] {
            let e = (q - sign * u).norm_squared();
            if e < best.2 {
                best = (i, sign, e);
            }
        }
    }
    best
}

pub fn gte(pred: &Plane, gt: &GroundTruth) -> f64 {
    closest_gt(&pred.unit4(), gt).2
}

pub fn gte_beta(beta: &[f64; 4], gt: &GroundTruth) -> Result<f64, GeometryError> {
    Ok(closest_gt(&beta_to_unit4(beta)?, gt).2)
}

/// Differentiable GTE on the solver output `beta` (shape `[4]`, unit norm).
/// The closest plane and sign are selected on the current value and held
/// fixed for the backward pass.
pub fn gte_loss(g: &mut Graph, beta: Var, gt: &GroundTruth) -> AdResult<(Var, usize)> {
    let b = g.value(beta).data();
    let bv = [b[0], b[1], b[2], b[3]];
    let q = Vector4::new(bv[0], bv[1], bv[2], -bv[3]);
    let (i, sign, _) = closest_gt(&(q / q.norm()), gt);
    let u = gt.planes[i].unit4() * sign;
    // β ↔ (n, d) differ in the sign of the last coordinate.
    let target = symslice_autograd::Tensor::new(&[4], vec![u[0], u[1], u[2], -u[3]])?;
    let t = g.constant(target);
    let diff = g.sub(beta, t)?;
    let sq = g.mul(diff, diff)?;
    Ok((g.sum(sq), i))
}

/// Mean squared distance between reflected samples of the object and their
/// nearest object points. Draws `samples` points without replacement when the
/// object has enough, otherwise with replacement.
pub fn sde(pred: &Plane, gt: &GroundTruth, samples: usize, seed: u64) -> f64 {
    let pts = &gt.object_points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if pts.len() >= samples {
        index::sample(&mut rng, pts.len(), samples).into_vec()
    } else {
        (0..samples).map(|_| rng.random_range(0..pts.len())).collect()
    };
    if picks.is_empty() {
        return 0.0;
    }
    let total: f64 = picks
        .iter()
        .map(|&i| {
            let r = reflect_point(&pts[i], pred);
            gt.index.nearest(&r).map(|(_, d2)| d2).unwrap_or(0.0)
        })
        .sum();
    total / picks.len() as f64
}

/// Smallest angle in degrees between the predicted normal and any
/// ground-truth normal, ignoring orientation; in `[0, 90]`.
pub fn angular_error(pred: &Plane, gt: &GroundTruth) -> f64 {
    gt.planes
        .iter()
        .map(|p| {
            let (a, b) = (pred.normal(), p.normal());
            a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees()
        })
        .fold(f64::INFINITY, f64::min)
}

/// One row of the per-object metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub object_id: String,
    pub offsets_loss: Option<f64>,
    pub gte: Option<f64>,
    pub sde: Option<f64>,
    /// SDE of the best ground-truth plane on the same samples.
    pub sde_floor: Option<f64>,
    pub angular_error_deg: Option<f64>,
    pub eigengap: Option<f64>,
    pub status: String,
}
