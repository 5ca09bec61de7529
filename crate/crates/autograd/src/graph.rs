//! Tape-based reverse-mode graph. A [`Graph`] owns every intermediate value;
//! [`Var`] is a cheap handle into it. Graphs are single-use: build, call
//! [`Graph::backward`] once, read leaf gradients.

use crate::eigen::{self, SymEigen4};
use crate::error::{shape_err, AutogradError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Sum(Var),
    L1Mean(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SmallestEigenvector { m: Var, eig: SymEigen4 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into `v` by [`Graph::backward`]; `None` when the
    /// node does not depend on any parameter or backward has not run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient matches node shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.needs(&[a, b]);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect())
            .expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err("transpose", format!("expected rank 2, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn l1_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_mean", pred, target)?;
        let n = self.value(pred).len().max(1) as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Mean(pred, target), rg))
    }

    /// 2-D cross-correlation of `x` (C_in×H×W) with `w` (C_out×C_in×k×k) plus
    /// per-channel bias `b` (C_out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if sw[1] != sx[0] || sw[3] != k || sb[0] != c_out || k % 2 == 0 {
            return shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}"));
        }
        let Some(geom) = ConvGeom::new(sx[0], sx[1], sx[2], k, stride, pad) else {
            return shape_err("conv2d", format!("kernel {k} does not fit input {sx:?}"));
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let npix = geom.out_pixels();
        let mut out = Vec::with_capacity(c_out * npix);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat_n(bias, npix));
        }
        kernels::gemm(
            c_out,
            geom.patch_len(),
            npix,
            self.value(w).data(),
            (geom.patch_len() as isize, 1),
            &cols,
            (npix as isize, 1),
            1.0,
            &mut out,
        );
        let t = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Group normalization over a C×H×W tensor followed by a per-channel
    /// affine transform.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = sx.first().copied().unwrap_or(0);
        if sx.len() != 3 || groups == 0 || c % groups != 0 {
            return shape_err("group_norm", format!("x {sx:?} with {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            );
        }
        let (xhat, inv_std) = kernels::group_norm_stats(self.value(x).data(), c, groups);
        let hw = sx[1] * sx[2];
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| g[i / hw] * v + bt[i / hw])
            .collect();
        let t = Tensor::new(&sx, out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Unit eigenvector of a symmetric 4×4 matrix for its smallest eigenvalue,
    /// sign-canonicalized (largest-magnitude entry positive).
    pub fn smallest_eigenvector(&mut self, m: Var) -> Result<Var> {
        let eig = self.eigen_of(m)?;
        let gap = eig.eigengap();
        if gap < eigen::MIN_EIGENGAP {
            return Err(AutogradError::EigengapTooSmall { gap });
        }
        let t = Tensor::new(&[4], eig.smallest().to_vec())?;
        let rg = self.needs(&[m]);
        Ok(self.push(t, Op::SmallestEigenvector { m, eig }, rg))
    }

    /// Eigen-decomposition of a 4×4 node value, without recording anything.
    pub fn eigen_of(&self, m: Var) -> Result<SymEigen4> {
        let sm = self.shape(m);
        if sm != [4, 4] {
            return shape_err("smallest_eigenvector", format!("expected [4, 4], got {sm:?}"));
        }
        let d = self.value(m).data();
        let mut mat = [[0.0; 4]; 4];
        for (i, row) in mat.iter_mut().enumerate() {
            row.copy_from_slice(&d[i * 4..i * 4 + 4]);
        }
        eigen::sym_eigen4(&mat)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutogradError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                acc(*b, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, x)| *o += k * x)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &|s| {
                    for ((o, x), v) in s.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(y) {
                        *o += x * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(y) {
                        *o += x * (1.0 - y * y);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    let start = offset;
                    acc(*v, &|s| {
                        for o in 0..outer {
                            let src = &g[o * row + start..o * row + start + chunk];
                            add_into(&mut s[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &|s| {
                    kernels::gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), 1.0, s)
                });
                acc(*b, &|s| {
                    kernels::gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), 1.0, s)
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::L1Mean(p, t) => {
                let (vp, vt) = (self.value(*p).data(), self.value(*t).data());
                let scale = g[0] / vp.len().max(1) as f64;
                let sign = |a: f64, b: f64| {
                    let d = a - b;
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*p, &|s| {
                    for ((o, a), b) in s.iter_mut().zip(vp).zip(vt) {
                        *o += scale * sign(*a, *b);
                    }
                });
                acc(*t, &|s| {
                    for ((o, a), b) in s.iter_mut().zip(vp).zip(vt) {
                        *o -= scale * sign(*a, *b);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = self.shape(*w)[0];
                let npix = geom.out_pixels();
                let plen = geom.patch_len();
                acc(*b, &|s| {
                    for (co, o) in s.iter_mut().enumerate() {
                        *o += g[co * npix..(co + 1) * npix].iter().sum::<f64>();
                    }
                });
                // dW = G · colsᵀ
                acc(*w, &|s| {
                    kernels::gemm(
                        c_out,
                        npix,
                        plen,
                        g,
                        (npix as isize, 1),
                        cols,
                        (1, npix as isize),
                        1.0,
                        s,
                    )
                });
                let vw = self.value(*w).data();
                acc(*x, &|s| {
                    // dcols = Wᵀ · G, then fold back.
                    let mut dcols = vec![0.0; plen * npix];
                    kernels::gemm(
                        plen,
                        c_out,
                        npix,
                        vw,
                        (1, plen as isize),
                        g,
                        (npix as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    kernels::col2im_add(&dcols, geom, s);
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let hw = shape[1] * shape[2];
                let vg = self.value(*gamma).data();
                acc(*beta, &|s| {
                    for (c, o) in s.iter_mut().enumerate() {
                        *o += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                });
                acc(*gamma, &|s| {
                    for (c, o) in s.iter_mut().enumerate() {
                        let r = c * hw..(c + 1) * hw;
                        *o += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*x, &|s| {
                    let per = xhat.len() / groups;
                    let m = per as f64;
                    for gi in 0..*groups {
                        let r = gi * per..(gi + 1) * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in r.clone() {
                            let d = g[i] * vg[i / hw];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        for i in r {
                            let d = g[i] * vg[i / hw];
                            s[i] += inv_std[gi] / m * (m * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                });
            }
            Op::SmallestEigenvector { m, eig } => {
                let up = [g[0], g[1], g[2], g[3]];
                let dm = eigen::smallest_eigenvector_vjp(eig, &up);
                acc(*m, &|s| {
                    for r in 0..4 {
                        for c in 0..4 {
                            s[r * 4 + c] += dm[r][c];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}
