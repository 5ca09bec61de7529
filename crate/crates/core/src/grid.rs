//! Unit-box normalization, binary BEV occupancy grids and height slicing.
//!
//! Axis convention: grid axis 0 is height (`H`, world `y`), axis 1 is depth
//! (`D`, world `z`), axis 2 is width (`W`, world `x`). Cell index along an
//! axis of `size` cells is `floor((coord + 0.5) · size)`, clamped.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Cloud, NormRecord, Vec3};

/// Fraction of the unit box a normalized cloud spans along its longest axis.
pub const NORMALIZE_MARGIN: f64 = 0.95;
const BOX_SLACK: f64 = 1e-9;
pub const GRID_MAGIC: &[u8; 4] = b"SYMG";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cloud has no points")]
    EmptyCloud,
    #[error("cloud has zero extent (all points identical)")]
    ZeroExtent,
    #[error("point {index} at {point:?} lies outside the unit box")]
    OutOfBox { index: usize, point: [f64; 3] },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid dump I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a grid dump (bad magic)")]
    BadMagic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Height channels.
    pub h: usize,
    /// Depth cells.
    pub d: usize,
    /// Width cells.
    pub w: usize,
    /// Number of slice anchors.
    pub n: usize,
    /// Context radius: each slice carries `2k + 1` channels.
    pub k: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            h: 32,
            d: 32,
            w: 32,
            n: 8,
            k: 2,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::InvalidSpec(m));
        if [self.h, self.d, self.w, self.n].contains(&0) {
            return bad(format!("{self:?}: sizes must be positive"));
        }
        if self.n > self.h {
            return bad(format!("{} anchors exceed {} height channels", self.n, self.h));
        }
        if 2 * self.k + 1 > self.h {
            return bad(format!("slice width {} exceeds height {}", 2 * self.k + 1, self.h));
        }
        if self.h % 4 != 0 || self.d % 4 != 0 || self.w % 4 != 0 {
            return bad(format!("{self:?}: H, D, W must be divisible by 4"));
        }
        Ok(())
    }

    pub fn slice_channels(&self) -> usize {
        2 * self.k + 1
    }

    pub fn cells(&self) -> usize {
        self.h * self.d * self.w
    }

    /// Anchor channels `round((i + 0.5)·H/N)`, ascending.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let a = ((i as f64 + 0.5) * self.h as f64 / self.n as f64).round() as usize;
                a.min(self.h - 1)
            })
            .collect()
    }
}

/// Map a cloud into `[−0.475, 0.475]³`: bounding-box center to the origin,
/// longest extent to 0.95.
///
/// The returned cloud's `norm` composes any normalization already recorded on
/// the input; the returned record is this step alone.
pub fn normalize_cloud(c: &Cloud) -> Result<(Cloud, NormRecord), GridError> {
    let first = c.points.first().ok_or(GridError::EmptyCloud)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in &c.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(GridError::ZeroExtent);
    }
    let rec = NormRecord {
        center: (lo + hi) * 0.5,
        scale: extent / NORMALIZE_MARGIN,
    };
    let composed = NormRecord {
        center: c.norm.center + c.norm.scale * rec.center,
        scale: c.norm.scale * rec.scale,
    };
    let out = Cloud {
        points: c.points.iter().map(|p| rec.apply(p)).collect(),
        kind: c.kind,
        norm: composed,
    };
    Ok((out, rec))
}

pub fn denormalize_cloud(c: &Cloud, rec: &NormRecord) -> Cloud {
    Cloud {
        points: c.points.iter().map(|p| rec.invert(p)).collect(),
        kind: c.kind,
        norm: NormRecord::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    /// `H × D × W` entries in {0, 1}, row-major.
    values: Vec<u8>,
    spec: GridSpec,
}

fn cell_index(coord: f64, size: usize) -> usize {
    let i = ((coord + 0.5) * size as f64).floor();
    i.clamp(0.0, (size - 1) as f64) as usize
}

/// Grid cell `(h, d, w)` containing a normalized point.
pub fn cell_of(p: &Vec3, spec: &GridSpec) -> (usize, usize, usize) {
    (
        cell_index(p.y, spec.h),
        cell_index(p.z, spec.d),
        cell_index(p.x, spec.w),
    )
}

pub fn voxelize(c: &Cloud, spec: &GridSpec) -> Result<OccupancyGrid, GridError> {
    spec.validate()?;
    let mut values = vec![0u8; spec.cells()];
    for (index, p) in c.points.iter().enumerate() {
        if p.iter().any(|v| !(v.abs() <= 0.5 + BOX_SLACK)) {
            return Err(GridError::OutOfBox {
                index,
                point: [p.x, p.y, p.z],
            });
        }
        let (h, d, w) = cell_of(p, spec);
        values[(h * spec.d + d) * spec.w + w] = 1;
    }
    Ok(OccupancyGrid {
        values,
        spec: *spec,
    })
}

impl OccupancyGrid {
    pub fn from_values(spec: GridSpec, values: Vec<u8>) -> Result<Self, GridError> {
        spec.validate()?;
        if values.len() != spec.cells() || values.iter().any(|v| *v > 1) {
            return Err(GridError::InvalidSpec(format!(
                "expected {} binary cells, got {} values",
                spec.cells(),
                values.len()
            )));
        }
        Ok(OccupancyGrid { values, spec })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, h: usize, d: usize, w: usize) -> u8 {
        self.values[(h * self.spec.d + d) * self.spec.w + w]
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// One height channel as a `D × W` plane.
    pub fn channel(&self, h: usize) -> &[u8] {
        let plane = self.spec.d * self.spec.w;
        &self.values[h * plane..(h + 1) * plane]
    }

    /// All `H` channels as doubles, for the global encoder.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }

    /// Debug dump: `"SYMG"`, u32 H, D, W (little-endian), then the cells.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        w.write_all(GRID_MAGIC)?;
        for v in [self.spec.h, self.spec.d, self.spec.w] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.values)?;
        Ok(())
    }

    /// Read a dump. The file carries no slicing parameters, so `n` and `k`
    /// come from the caller.
    pub fn read_dump<R: Read>(mut r: R, n: usize, k: usize) -> Result<Self, GridError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| GridError::BadMagic)?;
        if &header[..4] != GRID_MAGIC {
            return Err(GridError::BadMagic);
        }
        let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let spec = GridSpec {
            h: dim(4),
            d: dim(8),
            w: dim(12),
            n,
            k,
        };
        spec.validate()?;
        let mut values = vec![0u8; spec.cells()];
        r.read_exact(&mut values)?;
        Self::from_values(spec, values)
    }
}

/// A `(2K+1) × D × W` slab of height channels centred on `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub channels: Vec<f64>,
    pub anchor: usize,
    pub depth: usize,
    pub width: usize,
}

impl Slice {
    pub fn channel_count(&self) -> usize {
        self.channels.len() / (self.depth * self.width)
    }
}

/// Slices for every anchor, bottom to top, with zero rows outside `[0, H)`.
pub fn make_slices(g: &OccupancyGrid) -> Vec<Slice> {
    let spec = g.spec;
    let plane = spec.d * spec.w;
    spec.anchors()
        .into_iter()
        .map(|anchor| {
            let mut channels = vec![0.0; spec.slice_channels() * plane];
            for (row, dst) in channels.chunks_mut(plane).enumerate() {
                let h = anchor as isize + row as isize - spec.k as isize;
                if h >= 0 && (h as usize) < spec.h {
                    for (o, v) in dst.iter_mut().zip(g.channel(h as usize)) {
                        *o = *v as f64;
                    }
                }
            }
            Slice {
                channels,
                anchor,
                depth: spec.d,
                width: spec.w,
            }
        })
        .collect()
}

/// Normalized-space centres of the `stride × stride` cell blocks at the
/// anchor channel's mid-height, `(D/stride) × (W/stride)` entries row-major.
pub fn anchor_world_coords(spec: &GridSpec, anchor: usize, stride: usize) -> Vec<Vec3> {
    assert!(
        stride > 0 && spec.d % stride == 0 && spec.w % stride == 0,
        "stride {stride} must divide {}×{}",
        spec.d,
        spec.w
    );
    let (rows, cols) = (spec.d / stride, spec.w / stride);
    let y = (anchor as f64 + 0.5) / spec.h as f64 - 0.5;
    let mut out = Vec::with_capacity(rows * cols);
    for u in 0..rows {
        let z = (u as f64 + 0.5) * stride as f64 / spec.d as f64 - 0.5;
        for v in 0..cols {
            let x = (v as f64 + 0.5) * stride as f64 / spec.w as f64 - 0.5;
            out.push(Vec3::new(x, y, z));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reflect_point, Plane};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(h: usize, d: usize, w: usize, n: usize, k: usize) -> GridSpec {
        GridSpec { h, d, w, n, k }
    }

    #[test]
    fn normalize_two_points() {
        let c = Cloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        let (out, rec) = normalize_cloud(&c).unwrap();
        assert!((out.points[0] - Vec3::new(-0.475, 0.0, 0.0)).norm() < 1e-15);
        assert!((out.points[1] - Vec3::new(0.475, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(rec.center, Vec3::new(0.5, 0.0, 0.0));
        assert!((rec.scale - 1.0 / 0.95).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let c = Cloud::new(vec![
            Vec3::new(-0.475, 0.1, 0.0),
            Vec3::new(0.475, -0.2, 0.3),
            Vec3::new(0.0, 0.2, -0.3),
        ]);
        let (out, _) = normalize_cloud(&c).unwrap();
        for (a, b) in out.points.iter().zip(&c.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn normalize_errors() {
        assert!(matches!(
            normalize_cloud(&Cloud::new(vec![])),
            Err(GridError::EmptyCloud)
        ));
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert!(matches!(
            normalize_cloud(&Cloud::new(vec![p, p, p])),
            Err(GridError::ZeroExtent)
        ));
    }

    #[test]
    fn voxelize_cell_rules() {
        let s = spec(4, 4, 4, 1, 0);
        let g = voxelize(&Cloud::new(vec![Vec3::zeros()]), &s).unwrap();
        assert_eq!(g.get(2, 2, 2), 1);
        assert_eq!(g.occupied(), 1);
        let e = 0.5 - 1e-12;
        let g = voxelize(&Cloud::new(vec![Vec3::new(e, e, e)]), &s).unwrap();
        assert_eq!(g.get(3, 3, 3), 1);
        let g = voxelize(&Cloud::new(vec![Vec3::new(0.5, -0.5, 0.5)]), &s).unwrap();
        assert_eq!(g.get(0, 3, 3), 1);
    }

    #[test]
    fn voxelize_rejects_points_outside_box() {
        let s = GridSpec::default();
        let c = Cloud::new(vec![Vec3::new(0.0, 0.6, 0.0)]);
        assert!(matches!(
            voxelize(&c, &s),
            Err(GridError::OutOfBox { index: 0, .. })
        ));
    }

    #[test]
    fn voxelize_matches_unique_cell_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let s = spec(32, 32, 32, 8, 2);
        let g = voxelize(&Cloud::new(pts.clone()), &s).unwrap();
        let unique: std::collections::BTreeSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                let f = |c: f64| (((c + 0.5) * 32.0).floor() as i64).clamp(0, 31);
                (f(p.y), f(p.z), f(p.x))
            })
            .collect();
        assert_eq!(g.occupied(), unique.len());
    }

    #[test]
    fn voxelize_commutes_with_axis_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Keep points away from cell boundaries so the float mirror is exact
        // at the cell level.
        let pts: Vec<Vec3> = (0..2_000)
            .map(|_| {
                let c = |r: &mut ChaCha8Rng| (r.random_range(0..16) as f64 + 0.5) / 16.0 - 0.5;
                Vec3::new(c(&mut rng), c(&mut rng), c(&mut rng))
            })
            .collect();
        let s = spec(16, 16, 16, 4, 1);
        let g = voxelize(&Cloud::new(pts.clone()), &s).unwrap();
        for (axis, n) in [(0usize, Vec3::x()), (1, Vec3::y()), (2, Vec3::z())] {
            let plane = Plane::new(n, 0.0).unwrap();
            let mirrored: Vec<Vec3> = pts.iter().map(|p| reflect_point(p, &plane)).collect();
            let gm = voxelize(&Cloud::new(mirrored), &s).unwrap();
            for h in 0..16 {
                for d in 0..16 {
                    for w in 0..16 {
                        let (hh, dd, ww) = match axis {
                            0 => (h, d, 15 - w),
                            1 => (15 - h, d, w),
                            _ => (h, 15 - d, w),
                        };
                        assert_eq!(g.get(h, d, w), gm.get(hh, dd, ww));
                    }
                }
            }
        }
    }

    #[test]
    fn anchors_and_slices() {
        let s = spec(32, 8, 8, 8, 2);
        assert_eq!(s.anchors(), vec![2, 6, 10, 14, 18, 22, 26, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<u8> = (0..s.cells()).map(|_| rng.random_range(0..2)).collect();
        let g = OccupancyGrid::from_values(s, values).unwrap();
        let slices = make_slices(&g);
        assert_eq!(slices.len(), 8);
        for sl in &slices {
            assert_eq!(sl.channel_count(), 5);
            // Centre row reproduces the anchor channel bit-exactly.
            let centre = &sl.channels[2 * 64..3 * 64];
            for (a, b) in centre.iter().zip(g.channel(sl.anchor)) {
                assert_eq!(*a, *b as f64);
            }
        }
    }

    #[test]
    fn zero_context_slices_are_single_channels() {
        let s = spec(8, 4, 4, 4, 0);
        let values: Vec<u8> = (0..s.cells()).map(|i| (i % 3 == 0) as u8).collect();
        let g = OccupancyGrid::from_values(s, values).unwrap();
        for sl in make_slices(&g) {
            assert_eq!(sl.channel_count(), 1);
            let expect: Vec<f64> = g.channel(sl.anchor).iter().map(|v| *v as f64).collect();
            assert_eq!(sl.channels, expect);
        }
    }

    #[test]
    fn context_rows_below_zero_are_padding() {
        // N = 8 over H = 32 puts the first anchor at 2; K = 4 reaches −2.
        let s = spec(32, 4, 4, 8, 4);
        let g = OccupancyGrid::from_values(s, vec![1; s.cells()]).unwrap();
        let first = &make_slices(&g)[0];
        assert_eq!(first.anchor, 2);
        assert_eq!(first.channel_count(), 9);
        assert!(first.channels[..32].iter().all(|v| *v == 0.0));
        assert!(first.channels[32..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn anchor_coords() {
        let s = spec(4, 4, 4, 1, 0);
        let c = anchor_world_coords(&s, 2, 1);
        assert_eq!(c[2 * 4 + 2], Vec3::new(0.125, 0.125, 0.125));

        // Odd block count: the middle block is centred on the axis.
        let s = spec(12, 12, 12, 3, 1);
        let c = anchor_world_coords(&s, 5, 4);
        assert_eq!(c.len(), 9);
        assert!(c[4].x.abs() < 1e-15 && c[4].z.abs() < 1e-15);

        let s = spec(32, 32, 32, 8, 2);
        let fine = anchor_world_coords(&s, 10, 1);
        let coarse = anchor_world_coords(&s, 10, 4);
        assert_eq!(coarse.len(), 64);
        for u in 0..8 {
            for v in 0..8 {
                let mut mean = Vec3::zeros();
                for a in 0..4 {
                    for b in 0..4 {
                        mean += fine[(u * 4 + a) * 32 + v * 4 + b];
                    }
                }
                assert!((mean / 16.0 - coarse[u * 8 + v]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::default().validate().is_ok());
        assert!(spec(30, 32, 32, 8, 2).validate().is_err());
        assert!(spec(8, 8, 8, 9, 1).validate().is_err());
        assert!(spec(8, 8, 8, 2, 4).validate().is_err());
        assert!(spec(8, 8, 8, 0, 1).validate().is_err());
    }

    #[test]
    fn dump_round_trip() {
        let s = spec(8, 4, 12, 2, 1);
        let values: Vec<u8> = (0..s.cells()).map(|i| (i % 5 == 1) as u8).collect();
        let g = OccupancyGrid::from_values(s, values).unwrap();
        let mut buf = Vec::new();
        g.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + s.cells());
        assert_eq!(&buf[..4], b"SYMG");
        assert_eq!(&buf[4..8], &8u32.to_le_bytes());
        let back = OccupancyGrid::read_dump(&buf[..], 2, 1).unwrap();
        assert_eq!(back, g);
        assert!(matches!(
            OccupancyGrid::read_dump(&b"XXXX"[..], 2, 1),
            Err(GridError::BadMagic)
        ));
    }
}
