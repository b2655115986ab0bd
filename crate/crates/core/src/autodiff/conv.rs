//! Direct 2D/3D convolution kernels (cross-correlation, no kernel flip).
//!
//! Layout is channels-first without a batch axis: `[C, D, H, W]` for 3D and
//! `[C, H, W]` for 2D, the latter handled as a depth-1 volume. Weights are
//! `[out, in, kd, kh, kw]`. A transposed convolution reuses the input
//! gradient kernel of the matching forward convolution.

use super::graph::{axpy, Graph, Op, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Geometry of one forward convolution `in -> out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.in_c * self.in_dims.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_dims.iter().product::<usize>()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Range of output indices `o` along one axis whose source `o*s + k - p`
/// lands inside `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let top = n_in as isize - 1 + p as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / s + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Dot product with eight fixed partial sums; deterministic and
/// vectorizable.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Visits every (output row, input row, x-range) triple for one weight tap.
#[inline]
fn for_each_row(
    g: &ConvGeom,
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [od, oh, ow] = g.out_dims;
    let [id, ih, iw] = g.in_dims;
    let [kz, ky, kx] = tap;
    let (z0, z1) = valid_range(od, id, kz, g.stride[0], g.pad[0]);
    let (y0, y1) = valid_range(oh, ih, ky, g.stride[1], g.pad[1]);
    let (x0, x1) = valid_range(ow, iw, kx, g.stride[2], g.pad[2]);
    if x0 >= x1 {
        return;
    }
    for oz in z0..z1 {
        let iz = oz * g.stride[0] + kz - g.pad[0];
        for oy in y0..y1 {
            let iy = oy * g.stride[1] + ky - g.pad[1];
            let orow = (oz * oh + oy) * ow;
            let irow = (iz * ih + iy) * iw;
            // first input column touched by output column x0
            let ix0 = x0 * g.stride[2] + kx - g.pad[2];
            f(orow, irow, x0, x1, ix0);
        }
    }
}

fn taps(g: &ConvGeom) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
    let [kd, kh, kw] = g.kernel;
    (0..kd).flat_map(move |z| {
        (0..kh).flat_map(move |y| (0..kw).map(move |x| ((z * kh + y) * kw + x, [z, y, x])))
    })
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.out_len()];
    let (ins, outs) = (g.in_dims.iter().product::<usize>(), g.out_dims.iter().product::<usize>());
    let sx = g.stride[2];
    for o in 0..g.out_c {
        let yo = &mut y[o * outs..(o + 1) * outs];
        for c in 0..g.in_c {
            let xc = &x[c * ins..(c + 1) * ins];
            let wbase = (o * g.in_c + c) * g.taps();
            for (t, tap) in taps(g) {
                let wv = w[wbase + t];
                for_each_row(g, tap, |orow, irow, x0, x1, ix0| {
                    let out = &mut yo[orow + x0..orow + x1];
                    if sx == 1 {
                        axpy(out, wv, &xc[irow + ix0..irow + ix0 + (x1 - x0)]);
                    } else {
                        for (j, v) in out.iter_mut().enumerate() {
                            *v += wv * xc[irow + ix0 + j * sx];
                        }
                    }
                });
            }
        }
    }
    y
}

pub(crate) fn backward_input<T: Real>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.in_len()];
    let (ins, outs) = (g.in_dims.iter().product::<usize>(), g.out_dims.iter().product::<usize>());
    let sx = g.stride[2];
    for c in 0..g.in_c {
        let dxc = &mut dx[c * ins..(c + 1) * ins];
        for o in 0..g.out_c {
            let dyo = &dy[o * outs..(o + 1) * outs];
            let wbase = (o * g.in_c + c) * g.taps();
            for (t, tap) in taps(g) {
                let wv = w[wbase + t];
                for_each_row(g, tap, |orow, irow, x0, x1, ix0| {
                    let src = &dyo[orow + x0..orow + x1];
                    if sx == 1 {
                        axpy(&mut dxc[irow + ix0..irow + ix0 + (x1 - x0)], wv, src);
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dxc[irow + ix0 + j * sx] += wv * v;
                        }
                    }
                });
            }
        }
    }
    dx
}

pub(crate) fn backward_weight<T: Real>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dw = vec![T::zero(); g.out_c * g.in_c * g.taps()];
    let (ins, outs) = (g.in_dims.iter().product::<usize>(), g.out_dims.iter().product::<usize>());
    let sx = g.stride[2];
    for o in 0..g.out_c {
        let dyo = &dy[o * outs..(o + 1) * outs];
        for c in 0..g.in_c {
            let xc = &x[c * ins..(c + 1) * ins];
            let wbase = (o * g.in_c + c) * g.taps();
            for (t, tap) in taps(g) {
                let mut acc = T::zero();
                for_each_row(g, tap, |orow, irow, x0, x1, ix0| {
                    let src = &dyo[orow + x0..orow + x1];
                    if sx == 1 {
                        acc += dot(src, &xc[irow + ix0..irow + ix0 + (x1 - x0)]);
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            acc += v * xc[irow + ix0 + j * sx];
                        }
                    }
                });
                dw[wbase + t] = acc;
            }
        }
    }
    dw
}

pub(crate) fn channel_sums<T: Real>(g: &[T], channels: usize) -> Vec<T> {
    let n = g.len() / channels;
    (0..channels)
        .map(|c| g[c * n..(c + 1) * n].iter().copied().sum())
        .collect()
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    let n = y.len() / b.len();
    for (c, &bv) in b.iter().enumerate() {
        y[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += bv);
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// Lifts `[C, H, W]` / `[O, C, kh, kw]` shapes to the depth-1 3D form.
fn lift(shape: &[usize], spatial: usize) -> Option<(usize, [usize; 3])> {
    match (spatial, shape.len()) {
        (2, 3) => Some((shape[0], [1, shape[1], shape[2]])),
        (3, 4) => Some((shape[0], [shape[1], shape[2], shape[3]])),
        _ => None,
    }
}

fn lift_weight(shape: &[usize], spatial: usize) -> Option<(usize, usize, [usize; 3])> {
    match (spatial, shape.len()) {
        (2, 4) => Some((shape[0], shape[1], [1, shape[2], shape[3]])),
        (3, 5) => Some((shape[0], shape[1], [shape[2], shape[3], shape[4]])),
        _ => None,
    }
}

fn lower(c: usize, dims: [usize; 3], spatial: usize) -> Vec<usize> {
    if spatial == 2 {
        vec![c, dims[1], dims[2]]
    } else {
        vec![c, dims[0], dims[1], dims[2]]
    }
}

fn expand(v: usize, spatial: usize) -> [usize; 3] {
    if spatial == 2 {
        [1, v, v]
    } else {
        [v, v, v]
    }
}

fn pad_of(v: usize, spatial: usize) -> [usize; 3] {
    if spatial == 2 {
        [0, v, v]
    } else {
        [v, v, v]
    }
}

impl<T: Real> Graph<'_, T> {
    fn conv_nd(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, spatial: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        let (in_c, in_dims) = lift(&xs, spatial).ok_or_else(mismatch)?;
        let (out_c, w_in, kernel) = lift_weight(&ws, spatial).ok_or_else(mismatch)?;
        if w_in != in_c {
            return Err(Error::invalid(format!(
                "conv channel mismatch: input has {in_c}, weight expects {w_in}"
            )));
        }
        let (stride, pad) = (expand(stride, spatial), pad_of(pad, spatial));
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = conv_out(in_dims[a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
                Error::invalid(format!("kernel {kernel:?} does not fit padded input {in_dims:?}"))
            })?;
        }
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(Error::ShapeMismatch {
                    op: "conv bias",
                    lhs: vec![out_c],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            in_c,
            out_c,
            in_dims,
            out_dims,
            kernel,
            stride,
            pad,
        };
        let mut y = forward(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            add_bias(&mut y, self.value(b));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(lower(out_c, out_dims, spatial), y, Op::Conv { x, w, b, geom }, &inputs))
    }

    fn conv_transpose_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        spatial: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv_transpose",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        // x: [Cin_t, ...], w: [Cin_t, Cout_t, k...]. The adjoint forward conv
        // maps Cout_t -> Cin_t.
        let (cin_t, in_dims_t) = lift(&xs, spatial).ok_or_else(mismatch)?;
        let (w_in, cout_t, kernel) = lift_weight(&ws, spatial).ok_or_else(mismatch)?;
        if w_in != cin_t {
            return Err(Error::invalid(format!(
                "conv_transpose channel mismatch: input has {cin_t}, weight expects {w_in}"
            )));
        }
        let (stride, pad) = (expand(stride, spatial), pad_of(pad, spatial));
        let mut out_dims_t = [0; 3];
        for a in 0..3 {
            let full = (in_dims_t[a] - 1) * stride[a] + kernel[a];
            out_dims_t[a] = full
                .checked_sub(2 * pad[a])
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::invalid("conv_transpose padding exceeds output"))?;
        }
        let geom = ConvGeom {
            in_c: cout_t,
            out_c: cin_t,
            in_dims: out_dims_t,
            out_dims: in_dims_t,
            kernel,
            stride,
            pad,
        };
        if let Some(b) = b {
            if self.shape(b) != [cout_t] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose bias",
                    lhs: vec![cout_t],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let mut y = backward_input(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            add_bias(&mut y, self.value(b));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            lower(cout_t, out_dims_t, spatial),
            y,
            Op::ConvTranspose { x, w, b, geom },
            &inputs,
        ))
    }

    /// `x: [C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_nd(x, w, b, stride, pad, 2)
    }

    /// `x: [C, D, H, W]`, `w: [O, C, kd, kh, kw]`, `b: [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_nd(x, w, b, stride, pad, 3)
    }

    /// `x: [Cin, H, W]`, `w: [Cin, Cout, kh, kw]`, `b: [Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_transpose_nd(x, w, b, stride, pad, 2)
    }

    /// `x: [Cin, D, H, W]`, `w: [Cin, Cout, kd, kh, kw]`, `b: [Cout]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_transpose_nd(x, w, b, stride, pad, 3)
    }
}
