//! Raw numeric kernels behind the differentiable operators. Everything here
//! works on flat row-major slices; shape checking happens in the graph layer.

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with explicit row/column strides
/// so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices covering every index reachable with the
    // given dimensions and strides; `c` is row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold `x` (C×H×W) into a (C·k·k) × (H_out·W_out) patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * npix];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const GN_EPS: f64 = 1e-5;

/// Group-normalize `x` (C×HW). Returns (normalized values, per-group 1/σ).
pub(crate) fn group_norm_stats(x: &[f64], channels: usize, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let per_group = x.len() / groups;
    debug_assert_eq!(per_group * groups, x.len());
    debug_assert_eq!(channels % groups, 0);
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * per_group..(gi + 1) * per_group];
        let mean = xs.iter().sum::<f64>() / per_group as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let is = 1.0 / (var + GN_EPS).sqrt();
        for (o, v) in xhat[gi * per_group..(gi + 1) * per_group].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
