//! Two-phase training on procedural data, evaluation, and run configuration.
//!
//! Phase 1 fits the offsets loss on full clouds. Phase 2 adds the weighted
//! ground-truth error of the least-squares plane, on full or partial views.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use symslice_autograd::{AutogradError, Graph, Tensor};
use thiserror::Error;

use crate::data::{
    gen_shape, partial_view, random_rotation, rotate_sample, DataError, Family, ManifestRow, ShapeRecipe, Split,
    Viewpoint, DEFAULT_IMAGE_SIZE,
};
use crate::geometry::{plane_from_homogeneous, transform_plane, Cloud, GeometryError, Plane, Vec3};
use crate::grid::{normalize_cloud, voxelize, GridError, GridSpec, OccupancyGrid};
use crate::metrics::{
    angular_error, gte, gte_loss, offsets_loss, sde, GroundTruth, MetricRow, DEFAULT_SDE_SAMPLES,
};
use crate::network::{
    forward_offsets, init_params, occupancy_mask, offset_targets, plane_head, ModelConfig, ModelParams, NetworkError,
};
use crate::refine::{crop_to_box, simulate_detections, vehicle_scene, RefineError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("sample {id}: {source}")]
    Sample { id: String, source: Box<TrainError> },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub families: Vec<Family>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub point_count: usize,
    pub noise_sigma: f64,
    /// Random rotation per sample (fresh every epoch for training samples).
    pub rotate: bool,
    /// Viewpoint distance as a multiple of the normalized cloud radius.
    pub view_radius_factor: f64,
    pub image_size: usize,
    /// Simulated detector noise for vehicle crops (radians, metres).
    pub vehicle_yaw_sigma: f64,
    pub vehicle_center_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            families: Family::ALL.to_vec(),
            train: 500,
            val: 100,
            test: 100,
            point_count: 2048,
            noise_sigma: 0.005,
            rotate: true,
            view_radius_factor: 2.0,
            image_size: DEFAULT_IMAGE_SIZE,
            vehicle_yaw_sigma: 10f64.to_radians(),
            vehicle_center_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    /// Weight of the ground-truth error in phase 2.
    pub gte_weight: f64,
    /// Train phase 2 (and evaluate) on partial views.
    pub partial: bool,
    pub seed: u64,
    pub threads: usize,
    pub sde_samples: usize,
    /// Directory holding `manifest.csv`; generated in memory when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs_phase1: 30,
            epochs_phase2: 30,
            batch_size: 8,
            gte_weight: 1.0,
            partial: false,
            seed: 0,
            threads: 1,
            sde_samples: DEFAULT_SDE_SAMPLES,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("need learning_rate > 0 and betas in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.dataset.families.is_empty() {
            return bad("dataset needs at least one family");
        }
        if self.dataset.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        let d = &self.dataset;
        crate::data::make_manifest(&d.families, d.train, d.val, d.test, self.seed)
    }
}

/// Deterministic seed derivation for per-sample streams.
pub fn mix_seed(a: u64, b: u64, stream: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A network-ready example: normalized cloud, its grid, ground truth in the
/// same frame, and one offsets target per ground-truth plane.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub cloud: Cloud,
    pub grid: OccupancyGrid,
    pub gt: GroundTruth,
    pub targets: Vec<Tensor>,
}

/// Build the sample for `row`. `variant` selects the augmentation draw
/// (rotation, viewpoint, detector noise); held-out splits use 0.
pub fn build_sample(row: &ManifestRow, ds: &DatasetConfig, spec: &GridSpec, variant: u64, partial: bool) -> Result<Sample> {
    build_sample_inner(row, ds, spec, variant, partial).map_err(|e| TrainError::Sample {
        id: row.id.clone(),
        source: Box::new(e),
    })
}

fn build_sample_inner(
    row: &ManifestRow,
    ds: &DatasetConfig,
    spec: &GridSpec,
    variant: u64,
    partial: bool,
) -> Result<Sample> {
    let (cloud, planes) = if row.family == Family::Vehicle {
        vehicle_crop(row.seed, ds, variant)?
    } else {
        let recipe = ShapeRecipe {
            family: row.family,
            point_count: ds.point_count,
            noise_sigma: ds.noise_sigma,
            seed: row.seed,
        };
        let (c, planes) = gen_shape(&recipe);
        if ds.rotate {
            rotate_sample(&c, &planes, &random_rotation(mix_seed(row.seed, variant, 1)))
        } else {
            (c, planes)
        }
    };
    let (full, rec) = normalize_cloud(&cloud)?;
    let mut planes: Vec<Plane> = planes.iter().map(|p| rec.apply_plane(p)).collect();
    let (input, object) = if partial {
        let radius = full.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let mut vp = Viewpoint::random(mix_seed(row.seed, variant, 2), ds.view_radius_factor * radius, ds.image_size);
        vp.look_at = Vec3::zeros();
        let seen = partial_view(&full, &vp)?;
        let (seen_n, rec2) = normalize_cloud(&seen)?;
        planes = planes.iter().map(|p| rec2.apply_plane(p)).collect();
        let object = full.points.iter().map(|p| rec2.apply(p)).collect();
        (seen_n, object)
    } else {
        let object = full.points.clone();
        (full, object)
    };
    let grid = voxelize(&input, spec)?;
    let targets = planes.iter().map(|p| offset_targets(spec, p)).collect();
    Ok(Sample {
        id: row.id.clone(),
        cloud: input,
        grid,
        gt: GroundTruth::new(planes, object),
        targets,
    })
}

/// Vehicle points cropped by a simulated detection, in the detection's box
/// frame, with the true mid-plane in that frame.
fn vehicle_crop(seed: u64, ds: &DatasetConfig, variant: u64) -> Result<(Cloud, Vec<Plane>)> {
    let scene = vehicle_scene(seed, ds.point_count, ds.noise_sigma);
    let det = simulate_detections(
        &[scene.gt_box],
        ds.vehicle_yaw_sigma,
        ds.vehicle_center_sigma,
        mix_seed(seed, variant, 3),
    )[0];
    let local = crop_to_box(&scene.cloud, &det)?;
    let inv = det.rotation().inverse();
    let plane = transform_plane(&scene.plane, &inv, &(-inv.apply(&det.center)), 1.0);
    Ok((local, vec![plane]))
}

/// Index of the target closest (L1) to the current offsets.
fn closest_target(flat: &[f64], targets: &[Tensor]) -> usize {
    let l1 = |t: &Tensor| t.data().iter().zip(flat).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let mut best = (0, f64::INFINITY);
    for (i, t) in targets.iter().enumerate() {
        let e = l1(t);
        if e < best.1 {
            best = (i, e);
        }
    }
    best.0
}

/// Gradients and loss values of one training sample.
#[derive(Debug, Clone)]
pub struct SampleStep {
    pub grads: Vec<Tensor>,
    pub offsets_loss: f64,
    pub gte: Option<f64>,
    pub loss: f64,
}

pub fn sample_step(params: &ModelParams, cfg: &RunConfig, s: &Sample, phase2: bool) -> Result<SampleStep> {
    let mcfg = &cfg.model;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let (_, flat) = forward_offsets(&mut g, &bound, mcfg, &s.grid)?;
    let k = closest_target(g.value(flat).data(), &s.targets);
    let target = g.constant(s.targets[k].clone());
    let l1 = offsets_loss(&mut g, flat, target)?;
    let offsets_value = g.value(l1).data()[0];
    let mut loss = l1;
    let mut gte_value = None;
    if phase2 {
        let mask = mcfg.mask_empty_pixels.then(|| occupancy_mask(&s.grid));
        match plane_head(&mut g, &mcfg.grid, flat, mask.as_deref()) {
            Ok(head) => {
                let (e, _) = gte_loss(&mut g, head.beta, &s.gt)?;
                gte_value = Some(g.value(e).data()[0]);
                let w = g.scalar_mul(e, cfg.gte_weight);
                loss = g.add(l1, w)?;
            }
            Err(NetworkError::Autograd(AutogradError::EigengapTooSmall { gap })) => {
                log::warn!("{}: eigengap {gap:e} too small, GTE term skipped", s.id);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let loss_value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(SampleStep {
        grads,
        offsets_loss: offsets_value,
        gte: gte_value,
        loss: loss_value,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            b1,
            b2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.b1 * *mi + (1.0 - self.b1) * gi;
                *vi = self.b2 * *vi + (1.0 - self.b2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub offsets_loss: Option<f64>,
    pub gte: Option<f64>,
    pub sde: Option<f64>,
    pub angular_error: Option<f64>,
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

/// Optimizer state between epochs; lets runs that share a prefix of the
/// schedule share its computation.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Number of epochs already run.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&ModelConfig {
            seed: cfg.seed,
            ..cfg.model.clone()
        })?;
        let adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
        Ok(TrainState { params, adam, epoch: 0 })
    }
}

/// Train from scratch on the train split of `manifest`, validating on its
/// val split after every epoch. `on_row` sees each log row as it is produced.
pub fn train(cfg: &RunConfig, manifest: &[ManifestRow], on_row: impl FnMut(&LogRow)) -> Result<Trained> {
    let (state, log) = train_from(cfg, manifest, TrainState::new(cfg)?, on_row)?;
    Ok(Trained {
        params: state.params,
        log,
    })
}

/// Continue `state` up to the end of `cfg`'s schedule.
pub fn train_from(
    cfg: &RunConfig,
    manifest: &[ManifestRow],
    state: TrainState,
    mut on_row: impl FnMut(&LogRow),
) -> Result<(TrainState, Vec<LogRow>)> {
    cfg.validate()?;
    let mcfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    state.params.check(&mcfg)?;
    let TrainState {
        mut params,
        mut adam,
        epoch: start,
    } = state;
    let rows: Vec<&ManifestRow> = manifest.iter().filter(|r| r.split == Split::Train).collect();
    let val_rows: Vec<ManifestRow> = manifest.iter().filter(|r| r.split == Split::Val).cloned().collect();
    let pool = pool(cfg.threads);
    let mut val_cache: [Option<Vec<Sample>>; 2] = [None, None];
    let mut log = Vec::new();
    let total = cfg.epochs_phase1 + cfg.epochs_phase2;
    for epoch in start..total {
        let phase2 = epoch >= cfg.epochs_phase1;
        let partial = phase2 && cfg.partial;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 4)));
        let (mut off_sum, mut gte_sum, mut count, mut gte_count) = (0.0, 0.0, 0usize, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let steps: Vec<SampleStep> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let s = build_sample(rows[i], &cfg.dataset, &mcfg.grid, epoch as u64 + 1, partial)?;
                        sample_step(&params, cfg, &s, phase2)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            if steps.iter().any(|s| !s.loss.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            // Fixed-order reduction keeps results independent of thread count.
            let scale = 1.0 / steps.len() as f64;
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for s in &steps {
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                off_sum += s.offsets_loss;
                count += 1;
                if let Some(e) = s.gte {
                    gte_sum += e;
                    gte_count += 1;
                }
            }
            adam.step(&mut params, &grads);
            if !params.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
        }
        let row = LogRow {
            epoch: epoch + 1,
            split: Split::Train,
            offsets_loss: (count > 0).then(|| off_sum / count as f64),
            gte: (gte_count > 0).then(|| gte_sum / gte_count as f64),
            sde: None,
            angular_error: None,
        };
        on_row(&row);
        log.push(row);
        if !val_rows.is_empty() {
            let slot = &mut val_cache[partial as usize];
            if slot.is_none() {
                *slot = Some(build_samples(&val_rows, cfg, partial)?);
            }
            let samples = slot.as_ref().expect("filled above");
            let metrics = evaluate(&params, &mcfg, samples, cfg.sde_samples, cfg.threads);
            let s = Summary::from_rows(&metrics);
            let row = LogRow {
                epoch: epoch + 1,
                split: Split::Val,
                offsets_loss: s.offsets_loss.map(|m| m.mean),
                gte: s.gte.map(|m| m.mean),
                sde: s.sde.map(|m| m.mean),
                angular_error: s.angle.map(|m| m.mean),
            };
            on_row(&row);
            log.push(row);
        }
        log::info!("epoch {}/{total} done", epoch + 1);
    }
    let epoch = total.max(start);
    Ok((TrainState { params, adam, epoch }, log))
}

/// Held-out samples (augmentation draw 0) in manifest order.
pub fn build_samples(rows: &[ManifestRow], cfg: &RunConfig, partial: bool) -> Result<Vec<Sample>> {
    pool(cfg.threads).install(|| {
        rows.par_iter()
            .map(|r| build_sample(r, &cfg.dataset, &cfg.model.grid, 0, partial))
            .collect()
    })
}

/// Metrics of one sample; a failed plane solve yields a row with a status
/// message instead of metrics.
pub fn evaluate_sample(params: &ModelParams, cfg: &ModelConfig, s: &Sample, sde_samples: usize) -> MetricRow {
    let seed = mix_seed(s.id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)), 0, 5);
    let sde_floor = s
        .gt
        .planes()
        .iter()
        .map(|p| sde(p, &s.gt, sde_samples, seed))
        .fold(f64::INFINITY, f64::min);
    let mut row = MetricRow {
        object_id: s.id.clone(),
        offsets_loss: None,
        gte: None,
        sde: None,
        sde_floor: Some(sde_floor),
        angular_error_deg: None,
        eigengap: None,
        status: "ok".into(),
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let flat = match forward_offsets(&mut g, &bound, cfg, &s.grid) {
        Ok((_, flat)) => flat,
        Err(e) => {
            row.status = e.to_string();
            return row;
        }
    };
    let fv = g.value(flat).data();
    let k = closest_target(fv, &s.targets);
    let t = s.targets[k].data();
    row.offsets_loss = Some(fv.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64);
    let mask = cfg.mask_empty_pixels.then(|| occupancy_mask(&s.grid));
    let plane = plane_head(&mut g, &cfg.grid, flat, mask.as_deref()).and_then(|head| {
        let b = g.value(head.beta).data();
        let beta = [b[0], b[1], b[2], b[3]];
        Ok((plane_from_homogeneous(&beta)?, head.eigengap))
    });
    match plane {
        Ok((p, gap)) => {
            row.gte = Some(gte(&p, &s.gt));
            row.sde = Some(sde(&p, &s.gt, sde_samples, seed));
            row.angular_error_deg = Some(angular_error(&p, &s.gt));
            row.eigengap = Some(gap);
        }
        Err(e) => row.status = e.to_string(),
    }
    row
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample], sde_samples: usize, threads: usize) -> Vec<MetricRow> {
    pool(threads).install(|| {
        samples
            .par_iter()
            .map(|s| evaluate_sample(params, cfg, s, sde_samples))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Option<Stat> {
        Some(Stat {
            mean: mean(v.iter().copied())?,
            median: median(v)?,
        })
    }
}

/// Aggregates over the rows that produced a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub failed: usize,
    pub offsets_loss: Option<Stat>,
    pub gte: Option<Stat>,
    pub sde: Option<Stat>,
    pub sde_floor: Option<Stat>,
    pub angle: Option<Stat>,
}

impl Summary {
    pub fn from_rows(rows: &[MetricRow]) -> Summary {
        let col = |f: fn(&MetricRow) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(f).collect() };
        Summary {
            count: rows.len(),
            failed: rows.iter().filter(|r| r.status != "ok").count(),
            offsets_loss: Stat::of(&col(|r| r.offsets_loss)),
            gte: Stat::of(&col(|r| r.gte)),
            sde: Stat::of(&col(|r| r.sde)),
            sde_floor: Stat::of(&col(|r| r.sde_floor)),
            angle: Stat::of(&col(|r| r.angular_error_deg)),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.count == 0 {
            return write!(f, "count=0 no samples");
        }
        write!(f, "count={} failed={}", self.count, self.failed)?;
        for (name, s) in [
            ("gte", self.gte),
            ("sde", self.sde),
            ("sde_floor", self.sde_floor),
            ("angle_deg", self.angle),
        ] {
            match s {
                Some(s) => write!(f, " {name}_mean={} {name}_median={}", s.mean, s.median)?,
                None => write!(f, " {name}=none")?,
            }
        }
        Ok(())
    }
}
