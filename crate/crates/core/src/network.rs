//! The symmetry regressor: global and slice encoders, a stacked ConvGRU run
//! bottom-to-top over height slices, a shared offset decoder, and a
//! homogeneous least-squares plane head.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use symslice_autograd::checkpoint::{read_checkpoint, write_checkpoint};
use symslice_autograd::{AutogradError, Graph, Tensor, Var};
use thiserror::Error;

use crate::geometry::{offset_target, plane_from_homogeneous, Cloud, GeometryError, Plane, Vec3};
use crate::grid::{anchor_world_coords, make_slices, voxelize, GridError, GridSpec, OccupancyGrid, Slice};

/// Spatial reduction of both encoders.
pub const ENCODER_STRIDE: usize = 4;
pub const DECODER_LAYERS: usize = 5;
const ENCODER_LAYERS: usize = 4;
const UPDATE_GATE_BIAS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// Widths of the four encoder convolutions (shared layout for the global
    /// and slice encoders); the last entry is the feature width.
    pub enc_channels: Vec<usize>,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub gru_kernel: usize,
    /// Five decoder widths; the last must be 3.
    pub decoder_channels: Vec<usize>,
    pub gn_groups: usize,
    /// Zero the least-squares rows of pixels whose slice block is empty.
    pub mask_empty_pixels: bool,
    /// Append two constant channels holding each pixel's x and z coordinate
    /// to the encoder and decoder inputs.
    pub coord_channels: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec::default(),
            enc_channels: vec![16, 16, 16, 16],
            gru_layers: 3,
            gru_hidden: 32,
            gru_kernel: 3,
            decoder_channels: vec![32, 32, 16, 16, 3],
            gn_groups: 4,
            mask_empty_pixels: false,
            coord_channels: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks and smoke tests.
    pub fn micro() -> Self {
        ModelConfig {
            grid: GridSpec {
                h: 8,
                d: 8,
                w: 8,
                n: 2,
                k: 1,
            },
            enc_channels: vec![4, 4, 4, 4],
            gru_layers: 2,
            gru_hidden: 4,
            gru_kernel: 3,
            decoder_channels: vec![4, 4, 4, 4, 3],
            gn_groups: 2,
            mask_empty_pixels: false,
            coord_channels: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.enc_channels.len() != ENCODER_LAYERS {
            return bad(format!("encoder needs {ENCODER_LAYERS} widths, got {:?}", self.enc_channels));
        }
        if self.decoder_channels.len() != DECODER_LAYERS || self.decoder_channels[4] != 3 {
            return bad(format!(
                "decoder needs {DECODER_LAYERS} widths ending in 3, got {:?}",
                self.decoder_channels
            ));
        }
        if self.gru_layers == 0 || self.gru_hidden == 0 {
            return bad("GRU needs at least one layer and a positive width".into());
        }
        if self.gru_kernel % 2 == 0 {
            return bad(format!("GRU kernel {} must be odd", self.gru_kernel));
        }
        let normed = self
            .enc_channels
            .iter()
            .chain(&self.decoder_channels[..4])
            .chain(std::iter::once(&self.gru_hidden));
        for c in normed {
            if self.gn_groups == 0 || c % self.gn_groups != 0 {
                return bad(format!("{} groups do not divide width {c}", self.gn_groups));
            }
        }
        Ok(())
    }

    fn coord_count(&self) -> usize {
        if self.coord_channels {
            2
        } else {
            0
        }
    }

    pub fn feature_width(&self) -> usize {
        self.enc_channels[ENCODER_LAYERS - 1]
    }

    /// Output resolution `(D/4, W/4)`.
    pub fn out_dims(&self) -> (usize, usize) {
        (self.grid.d / ENCODER_STRIDE, self.grid.w / ENCODER_STRIDE)
    }

    pub fn point_count(&self) -> usize {
        let (a, b) = self.out_dims();
        self.grid.n * a * b
    }

    /// Every parameter's name and shape, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let k = 3;
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let gn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            out.push((format!("{name}.gamma"), vec![c]));
            out.push((format!("{name}.beta"), vec![c]));
        };
        let extra = self.coord_count();
        for (enc, cin) in [("global", self.grid.h), ("slice", self.grid.slice_channels())] {
            let mut c = cin + extra;
            for (i, &w) in self.enc_channels.iter().enumerate() {
                conv(&mut out, format!("{enc}.conv{i}"), c, w, k);
                gn(&mut out, format!("{enc}.gn{i}"), w);
                c = w;
            }
        }
        let hid = self.gru_hidden;
        for l in 0..self.gru_layers {
            conv(&mut out, format!("hinit{l}.conv"), self.feature_width(), hid, k);
            gn(&mut out, format!("hinit{l}.gn"), hid);
        }
        for l in 0..self.gru_layers {
            let xin = if l == 0 { 2 * self.feature_width() } else { hid };
            for gate in ["z", "r", "h"] {
                conv(&mut out, format!("gru{l}.{gate}"), xin + hid, hid, self.gru_kernel);
            }
        }
        let mut c = hid + extra;
        for (i, &w) in self.decoder_channels.iter().enumerate() {
            conv(&mut out, format!("dec.conv{i}"), c, w, k);
            if i + 1 < DECODER_LAYERS {
                gn(&mut out, format!("dec.gn{i}"), w);
            }
            c = w;
        }
        out
    }
}

/// Named model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let lookup = named
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        let (names, tensors) = named.into_iter().unzip();
        ModelParams {
            names,
            tensors,
            lookup,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Check names and shapes against a config.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.names.len() {
            return Err(NetworkError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.names.len()
            )));
        }
        for (name, shape) in expected {
            match self.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(NetworkError::ShapeMismatch(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(NetworkError::ShapeMismatch(format!("missing {name}"))),
            }
        }
        Ok(())
    }

    /// Register every tensor in `g`, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        self.with_vars(vars)
    }

    /// Name lookup over caller-supplied handles, one per tensor in order.
    pub fn with_vars(&self, vars: Vec<Var>) -> BoundParams {
        assert_eq!(vars.len(), self.tensors.len(), "one handle per tensor");
        BoundParams {
            vars,
            lookup: self.lookup.clone(),
        }
    }
}

/// Graph handles for a [`ModelParams`] set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    lookup: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.lookup.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform(±√(1/fan_in)) weights, zero biases, unit GN scale, zero GN shift,
/// update-gate biases at +1. Deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let named = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".z.b") {
                Tensor::full(&shape, UPDATE_GATE_BIAS)
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect();
    Ok(ModelParams::from_named(named))
}

fn conv_gn_relu(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    conv: &str,
    norm: &str,
    stride: usize,
) -> Result<Var> {
    let y = g.conv2d(x, p.var(&format!("{conv}.w")), p.var(&format!("{conv}.b")), stride, 1)?;
    let y = g.group_norm(
        y,
        cfg.gn_groups,
        p.var(&format!("{norm}.gamma")),
        p.var(&format!("{norm}.beta")),
    )?;
    Ok(g.relu(y))
}

/// `[2, d, w]` map of pixel-centre x (along `w`) and z (along `d`) in the
/// unit box.
fn coord_map(d: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[2, d, w], |i| {
        let (c, r, col) = (i / (d * w), (i / w) % d, i % w);
        if c == 0 {
            (col as f64 + 0.5) / w as f64 - 0.5
        } else {
            (r as f64 + 0.5) / d as f64 - 0.5
        }
    })
}

fn with_coords(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    if !cfg.coord_channels {
        return Ok(x);
    }
    let (d, w) = (g.shape(x)[1], g.shape(x)[2]);
    let c = g.constant(coord_map(d, w));
    Ok(g.concat(&[x, c], 0)?)
}

fn encode(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, x: Var, prefix: &str) -> Result<Var> {
    let mut h = with_coords(g, cfg, x)?;
    for i in 0..ENCODER_LAYERS {
        // Layers 1 and 3 halve the resolution.
        let stride = if i % 2 == 1 { 2 } else { 1 };
        h = conv_gn_relu(
            g,
            p,
            cfg,
            h,
            &format!("{prefix}.conv{i}"),
            &format!("{prefix}.gn{i}"),
            stride,
        )?;
    }
    Ok(h)
}

/// All `H` channels at once → `C_g × D/4 × W/4`.
pub fn global_encode(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, grid: &OccupancyGrid) -> Result<Var> {
    let s = grid.spec();
    if *s != cfg.grid {
        return Err(NetworkError::ShapeMismatch(format!("grid {s:?} vs config {:?}", cfg.grid)));
    }
    let x = g.constant(Tensor::new(&[s.h, s.d, s.w], grid.to_f64())?);
    encode(g, p, cfg, x, "global")
}

/// One `(2K+1)`-channel slice → `C_s × D/4 × W/4`; weights shared by all slices.
pub fn slice_encode(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, s: &Slice) -> Result<Var> {
    let x = g.constant(Tensor::new(
        &[s.channel_count(), s.depth, s.width],
        s.channels.clone(),
    )?);
    encode(g, p, cfg, x, "slice")
}

/// Initial hidden state per GRU layer: conv → GN → ReLU on the global features.
pub fn init_hidden(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, global: Var) -> Result<Vec<Var>> {
    (0..cfg.gru_layers)
        .map(|l| conv_gn_relu(g, p, cfg, global, &format!("hinit{l}.conv"), &format!("hinit{l}.gn"), 1))
        .collect()
}

/// One time step of the stacked ConvGRU:
/// `z = σ(W_z*[x,h])`, `r = σ(W_r*[x,h])`, `h̃ = tanh(W_h*[x, r⊙h])`,
/// `h′ = (1−z)⊙h + z⊙h̃`; layer `l > 0` reads layer `l−1`'s new state.
pub fn gru_step(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, x: Var, hidden: &[Var]) -> Result<Vec<Var>> {
    if hidden.len() != cfg.gru_layers {
        return Err(NetworkError::ShapeMismatch(format!(
            "{} hidden states for {} layers",
            hidden.len(),
            cfg.gru_layers
        )));
    }
    let pad = cfg.gru_kernel / 2;
    let mut input = x;
    let mut next = Vec::with_capacity(hidden.len());
    for (l, &h) in hidden.iter().enumerate() {
        let gate = |g: &mut Graph, name: &str, inp: Var| -> Result<Var> {
            Ok(g.conv2d(
                inp,
                p.var(&format!("gru{l}.{name}.w")),
                p.var(&format!("gru{l}.{name}.b")),
                1,
                pad,
            )?)
        };
        let xh = g.concat(&[input, h], 0)?;
        let z = gate(g, "z", xh)?;
        let z = g.sigmoid(z);
        let r = gate(g, "r", xh)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[input, rh], 0)?;
        let cand = gate(g, "h", xrh)?;
        let cand = g.tanh(cand);
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        let h_new = g.add(h, step)?;
        next.push(h_new);
        input = h_new;
    }
    Ok(next)
}

/// Five 3×3 convolutions, GN + ReLU after the first four → `3 × D/4 × W/4`.
pub fn decode(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, h_top: Var) -> Result<Var> {
    let mut h = with_coords(g, cfg, h_top)?;
    for i in 0..DECODER_LAYERS - 1 {
        h = conv_gn_relu(g, p, cfg, h, &format!("dec.conv{i}"), &format!("dec.gn{i}"), 1)?;
    }
    let last = DECODER_LAYERS - 1;
    Ok(g.conv2d(
        h,
        p.var(&format!("dec.conv{last}.w")),
        p.var(&format!("dec.conv{last}.b")),
        1,
        1,
    )?)
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// Per-slice offsets, each `3 × D/4 × W/4`, bottom to top.
    pub offsets: Vec<Var>,
    /// The same offsets as one `3 × |P|` matrix in point order.
    pub flat_offsets: Var,
    /// World points `3 × |P|` (columns ordered slice, row, column).
    pub points: Var,
    /// Unit homogeneous plane vector, shape `[4]`.
    pub beta: Var,
    pub eigengap: f64,
}

/// Anchor pixel centres for every slice as `3 × (N·D/4·W/4)` (channel-major).
pub fn anchor_grid(spec: &GridSpec) -> Vec<Vec<Vec3>> {
    spec.anchors()
        .into_iter()
        .map(|a| anchor_world_coords(spec, a, ENCODER_STRIDE))
        .collect()
}

/// Pixel keep-mask for the least-squares rows: a pixel counts as occupied
/// when any voxel of its `4 × 4` block within the slice is set.
pub fn occupancy_mask(grid: &OccupancyGrid) -> Vec<Vec<bool>> {
    let spec = grid.spec();
    let (rows, cols) = (spec.d / ENCODER_STRIDE, spec.w / ENCODER_STRIDE);
    make_slices(grid)
        .iter()
        .map(|s| {
            let plane = s.depth * s.width;
            let mut m = vec![false; rows * cols];
            for ch in s.channels.chunks(plane) {
                for (i, v) in ch.iter().enumerate() {
                    if *v > 0.0 {
                        let (d, w) = (i / s.width, i % s.width);
                        m[(d / ENCODER_STRIDE) * cols + w / ENCODER_STRIDE] = true;
                    }
                }
            }
            m
        })
        .collect()
}

/// Per-slice `3 × D/4 × W/4` offset maps stacked into one `3 × |P|` matrix
/// (columns ordered slice, row, column).
pub fn flatten_offsets(g: &mut Graph, spec: &GridSpec, offsets: &[Var]) -> Result<Var> {
    if offsets.len() != spec.n {
        return Err(NetworkError::ShapeMismatch(format!(
            "{} offset maps for {} slices",
            offsets.len(),
            spec.n
        )));
    }
    let per = (spec.d / ENCODER_STRIDE) * (spec.w / ENCODER_STRIDE);
    let mut cols = Vec::with_capacity(offsets.len());
    for &o in offsets {
        cols.push(g.reshape(o, &[3, per])?);
    }
    Ok(g.concat(&cols, 1)?)
}

/// Least-squares plane head: anchor centres plus offsets give points `P`;
/// `A` stacks `(x, y, z, 1)` rows; `β` is the smallest eigenvector of `AᵀA`.
pub fn plane_head(g: &mut Graph, spec: &GridSpec, flat: Var, mask: Option<&[Vec<bool>]>) -> Result<PlaneHead> {
    let anchors = anchor_grid(spec);
    let total: usize = anchors.iter().map(Vec::len).sum();
    if g.shape(flat) != [3, total] {
        return Err(NetworkError::ShapeMismatch(format!(
            "offsets {:?} for {total} anchors",
            g.shape(flat)
        )));
    }
    let mut base = vec![0.0; 3 * total];
    for (j, p) in anchors.iter().flatten().enumerate() {
        for c in 0..3 {
            base[c * total + j] = p[c];
        }
    }
    let base = g.constant(Tensor::new(&[3, total], base)?);
    let points = g.add(base, flat)?;
    let ones = g.constant(Tensor::full(&[1, total], 1.0));
    let mut at = g.concat(&[points, ones], 0)?;
    if let Some(mask) = mask {
        let keep: Vec<f64> = mask.iter().flatten().map(|k| if *k { 1.0 } else { 0.0 }).collect();
        let w = g.constant(Tensor::from_fn(&[4, total], |i| keep[i % total]));
        at = g.mul(at, w)?;
    }
    let a = g.transpose(at)?;
    let m = g.matmul(at, a)?;
    let gap = g.eigen_of(m)?.eigengap();
    let beta = g.smallest_eigenvector(m)?;
    Ok(PlaneHead {
        points,
        beta,
        eigengap: gap,
    })
}

/// Handles produced by [`plane_head`].
#[derive(Debug, Clone, Copy)]
pub struct PlaneHead {
    pub points: Var,
    pub beta: Var,
    pub eigengap: f64,
}

/// Offsets carrying every anchor centre onto `s`, as `3 × |P|` in the order
/// used by [`plane_head`].
pub fn offset_targets(spec: &GridSpec, s: &Plane) -> Tensor {
    let anchors: Vec<Vec3> = anchor_grid(spec).into_iter().flatten().collect();
    let total = anchors.len();
    let t: Vec<Vec3> = anchors.iter().map(|p| offset_target(p, s)).collect();
    Tensor::from_fn(&[3, total], |i| t[i % total][i / total])
}

/// Full differentiable pass over an already-normalized cloud.
pub fn forward_graph(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, c: &Cloud) -> Result<GraphOutput> {
    let grid = voxelize(c, &cfg.grid)?;
    forward_grid(g, p, cfg, &grid)
}

/// Encoders, recurrent sweep and decoder: per-slice offsets and their
/// flattened `3 × |P|` form.
pub fn forward_offsets(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    grid: &OccupancyGrid,
) -> Result<(Vec<Var>, Var)> {
    let global = global_encode(g, p, cfg, grid)?;
    let mut hidden = init_hidden(g, p, cfg, global)?;
    let mut offsets = Vec::with_capacity(cfg.grid.n);
    for s in make_slices(grid) {
        let feat = slice_encode(g, p, cfg, &s)?;
        let x = g.concat(&[feat, global], 0)?;
        hidden = gru_step(g, p, cfg, x, &hidden)?;
        let top = *hidden.last().expect("at least one GRU layer");
        offsets.push(decode(g, p, cfg, top)?);
    }
    let flat = flatten_offsets(g, &cfg.grid, &offsets)?;
    Ok((offsets, flat))
}

pub fn forward_grid(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, grid: &OccupancyGrid) -> Result<GraphOutput> {
    let (offsets, flat) = forward_offsets(g, p, cfg, grid)?;
    let mask = cfg.mask_empty_pixels.then(|| occupancy_mask(grid));
    let head = plane_head(g, &cfg.grid, flat, mask.as_deref())?;
    Ok(GraphOutput {
        offsets,
        flat_offsets: flat,
        points: head.points,
        beta: head.beta,
        eigengap: head.eigengap,
    })
}

/// Values of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N × 3 × D/4 × W/4`.
    pub offsets: Tensor,
    pub points: Vec<Vec3>,
    pub plane: Plane,
    pub beta: [f64; 4],
    pub eigengap: f64,
}

pub fn forward(c: &Cloud, p: &ModelParams, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let out = forward_graph(&mut g, &bound, cfg, c)?;
    collect_output(&g, cfg, &out)
}

pub fn collect_output(g: &Graph, cfg: &ModelConfig, out: &GraphOutput) -> Result<ForwardOutput> {
    let (r, c) = cfg.out_dims();
    let mut offs = Vec::with_capacity(cfg.grid.n * 3 * r * c);
    for &o in &out.offsets {
        offs.extend_from_slice(g.value(o).data());
    }
    let offsets = Tensor::new(&[cfg.grid.n, 3, r, c], offs)?;
    let pv = g.value(out.points).data();
    let total = pv.len() / 3;
    let points = (0..total)
        .map(|j| Vec3::new(pv[j], pv[total + j], pv[2 * total + j]))
        .collect();
    let b = g.value(out.beta).data();
    let beta = [b[0], b[1], b[2], b[3]];
    Ok(ForwardOutput {
        offsets,
        points,
        plane: plane_from_homogeneous(&beta)?,
        beta,
        eigengap: out.eigengap,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the checkpoint and a `<path>.json` config sidecar.
pub fn save_params(path: &Path, p: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let io = |source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = File::create(path).map_err(io)?;
    let named: Vec<(&str, &Tensor)> = p.names.iter().map(String::as_str).zip(&p.tensors).collect();
    write_checkpoint(BufWriter::new(f), &named)?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(cfg)?).map_err(|source| NetworkError::Io {
        path: side.clone(),
        source,
    })?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| NetworkError::Io {
        path: side.clone(),
        source,
    })?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    let f = File::open(path).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let params = ModelParams::from_named(read_checkpoint(BufReader::new(f))?);
    params.check(&cfg)?;
    Ok((params, cfg))
}
