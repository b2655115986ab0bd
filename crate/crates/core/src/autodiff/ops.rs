//! Forward constructors for the differentiable operations. Each method
//! computes its output eagerly and records what `backward` needs.

use std::rc::Rc;

use rand::Rng;

use super::graph::{axpy, Graph, Op, ScatterPlan, Var};
use super::tensor::{numel, Real};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn swish<T: Real>(x: T, beta: T) -> T {
    x * sigmoid(beta * x)
}

pub(crate) fn transpose_data<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-major `[m,k] · [k,n]`, accumulated in i-k-j order so every output
/// element sees its terms in a fixed sequence.
pub(crate) fn matmul_data<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// (product of extents before `axis`, product after it)
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub(crate) fn slice_data<T: Real>(
    x: &[T],
    outer: usize,
    total: usize,
    inner: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * total + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, inner) = axis_split(shape, axis);
    let n = shape[axis];
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let dot: T = (0..n).map(|a| y[at(a)] * g[at(a)]).sum();
            for a in 0..n {
                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    dx
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// Mean and reciprocal standard deviation normalization of one group.
fn normalize<T: Real>(x: &[T], out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::of(NORM_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}

impl<T: Real> Graph<'_, T> {
    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        check_same(op, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, d, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let d = self.value(a).iter().map(|&v| v * c).collect();
        let s = self.shape(a).to_vec();
        self.push(s, d, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let d = self.value(a).iter().map(|&v| v + c).collect();
        let s = self.shape(a).to_vec();
        self.push(s, d, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = matmul_data(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b), &[a, b]))
    }

    /// `y = x · wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (m, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let wt = transpose_data(self.value(w), fout, fin);
        let xv = self.value(x);
        let mut y = vec![T::zero(); m * fout];
        for r in 0..m {
            let row = &mut y[r * fout..(r + 1) * fout];
            if let Some(b) = b {
                row.copy_from_slice(self.value(b));
            }
            for k in 0..fin {
                axpy(row, xv[r * fin + k], &wt[k * fout..(k + 1) * fout]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![m, fout], y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn swish(&mut self, x: Var, beta: T) -> Var {
        let d = self.value(x).iter().map(|&v| swish(v, beta)).collect();
        let s = self.shape(x).to_vec();
        self.push(s, d, Op::Swish(x, beta), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let d = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let s = self.shape(x).to_vec();
        self.push(s, d, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, inner) = axis_split(&shape, axis);
        let n = shape[axis];
        let xv = self.value(x);
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..n {
                    mx = mx.max(xv[at(a)]);
                }
                let mut z = T::zero();
                for a in 0..n {
                    let e = (xv[at(a)] - mx).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    y[at(a)] /= z;
                }
            }
        }
        Ok(self.push(shape, y, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        check_same("layer_norm gain", &[n], self.shape(gain))?;
        check_same("layer_norm bias", &[n], self.shape(bias))?;
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            rstd.push(normalize(&xv[r * n..(r + 1) * n], &mut xhat[r * n..(r + 1) * n]));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % n] + bv[i % n])
            .collect();
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Per-channel normalization over all spatial positions of `[C, ...]`.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!("instance_norm needs [C, ...], got {shape:?}")));
        }
        let c = shape[0];
        let xv = self.value(x);
        let n = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let rstd = (0..c)
            .map(|ch| normalize(&xv[ch * n..(ch + 1) * n], &mut xhat[ch * n..(ch + 1) * n]))
            .collect();
        let y = xhat.clone();
        Ok(self.push(shape, y, Op::InstanceNorm { x, xhat, rstd }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut shape = self.shape(*first).to_vec();
        check_axis("concat", &shape, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = axis_split(&shape, axis);
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) outside extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, inner) = axis_split(&shape, axis);
        let out = slice_data(self.value(x), outer, shape[axis], inner, start, len);
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lens: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for &len in lens {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::invalid("split lengths do not cover the axis"));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let d = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), d, Op::Reshape(x), &[x]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {s:?}")));
        }
        let d = transpose_data(self.value(x), s[0], s[1]);
        Ok(self.push(vec![s[1], s[0]], d, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![m], Op::Mean(x), &[x])
    }

    /// Maximum along `axis` (the axis is removed). Gradient flows to the
    /// first index attaining the maximum.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max_reduce", &shape, axis)?;
        let (outer, inner) = axis_split(&shape, axis);
        let n = shape[axis];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for a in 1..n {
                    let at = (o * n + a) * inner + i;
                    if xv[at] > xv[best] {
                        best = at;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(oshape, out, Op::MaxReduce { x, argmax }, &[x]))
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-p)`. Identity when
    /// `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..numel(self.shape(x)))
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let d = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let s = self.shape(x).to_vec();
        Ok(self.push(s, d, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup `out[r] = table[idx[r]]` for a `[rows, F]` table.
    pub fn gather_rows(&mut self, table: Var, idx: Rc<[u32]>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid(format!("gather_rows needs a rank-2 table, got {ts:?}")));
        }
        let (rows, f) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::invalid(format!("row index {bad} outside table of {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx.iter() {
            let i = i as usize;
            out.extend_from_slice(&tv[i * f..(i + 1) * f]);
        }
        Ok(self.push(vec![idx.len(), f], out, Op::GatherRows { table, idx }, &[table]))
    }

    /// Mean-aggregates the elements of `x` into the slots named by `plan`.
    pub fn scatter_mean(&mut self, x: Var, plan: Rc<ScatterPlan>) -> Result<Var> {
        if numel(self.shape(x)) != plan.targets.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_mean",
                lhs: self.shape(x).to_vec(),
                rhs: vec![plan.targets.len()],
            });
        }
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        for (&v, t) in self.value(x).iter().zip(&plan.targets) {
            if let Some(t) = t {
                out[*t as usize] += v;
            }
        }
        for (o, &c) in out.iter_mut().zip(&plan.counts) {
            if c > 0 {
                *o /= T::of(c as f64);
            }
        }
        let shape = plan.out_shape.clone();
        Ok(self.push(shape, out, Op::ScatterMean { x, plan }, &[x]))
    }
}
