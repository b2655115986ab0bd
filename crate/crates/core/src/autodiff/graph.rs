use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::tensor::{numel, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Many-to-one mean aggregation: element `i` of the input contributes to
/// output slot `targets[i]` (or nowhere), each slot stores the mean of its
/// contributors and untouched slots are zero.
#[derive(Clone, Debug)]
pub struct ScatterPlan {
    pub(crate) targets: Vec<Option<u32>>,
    pub(crate) counts: Vec<u32>,
    pub(crate) out_shape: Vec<usize>,
}

impl ScatterPlan {
    pub fn new(targets: Vec<Option<u32>>, out_shape: Vec<usize>) -> Result<Self> {
        let n = numel(&out_shape);
        let mut counts = vec![0u32; n];
        for t in targets.iter().flatten() {
            let t = *t as usize;
            if t >= n {
                return Err(Error::invalid(format!("scatter target {t} outside {n} slots")));
            }
            counts[t] += 1;
        }
        Ok(ScatterPlan {
            targets,
            counts,
            out_shape,
        })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn targets(&self) -> &[Option<u32>] {
        &self.targets
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Swish(Var, T),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MaxReduce {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GatherRows {
        table: Var,
        idx: Rc<[u32]>,
    },
    ScatterMean {
        x: Var,
        plan: Rc<ScatterPlan>,
    },
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    tracks: bool,
    leaf_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(i, _)| *i == v.0)
            .map(|(_, g)| g.as_slice())
    }

    /// Ids of every parameter that received a gradient.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Tape of tensor operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; `backward` walks it in exact reverse.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Value::Owned(t.into_data()), false)
    }

    /// Leaf whose gradient is reported by `backward` (via [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Value::Owned(t.into_data()), true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        let tracks = store.get(id).requires_grad();
        self.push_leaf(shape, Value::Param(id), tracks)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Value<T>, tracks: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            tracks,
            leaf_grad: tracks,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            tracks,
            leaf_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if numel(self.shape(output)) != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n_params = self.params.map_or(0, |p| p.len());
        let mut out = Gradients {
            params: vec![None; n_params],
            leaves: Vec::new(),
        };
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.leaf_grad {
                    match node.value {
                        Value::Param(id) => match &mut out.params[id.0] {
                            Some(acc) => add_into(acc, &g),
                            slot @ None => *slot = Some(g),
                        },
                        Value::Owned(_) => out.leaves.push((i, g)),
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        out.leaves.sort_by_key(|(i, _)| *i);
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].tracks {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => unreachable!("parameter nodes are leaves"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.tracks(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.tracks(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracks(*a) {
                    // dA = dC · Bᵀ
                    let bt = super::ops::transpose_data(self.value(*b), k, n);
                    self.accumulate(grads, *a, super::ops::matmul_data(g, &bt, m, n, k));
                }
                if self.tracks(*b) {
                    // dB = Aᵀ · dC
                    let at = super::ops::transpose_data(self.value(*a), m, k);
                    self.accumulate(grads, *b, super::ops::matmul_data(&at, g, k, m, n));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (m, fin, fout) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.tracks(*x) {
                    let mut dx = vec![T::zero(); m * fin];
                    for r in 0..m {
                        let dxr = &mut dx[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            axpy(dxr, go, &wv[o * fin..(o + 1) * fin]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.tracks(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    for r in 0..m {
                        let xr = &xv[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            axpy(&mut dw[o * fin..(o + 1) * fin], go, xr);
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.tracks(*b) {
                        let mut db = vec![T::zero(); fout];
                        for r in 0..m {
                            add_into(&mut db, &g[r * fout..(r + 1) * fout]);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Swish(x, beta) => {
                let xv = self.value(*x);
                let beta = *beta;
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| {
                        let s = super::ops::sigmoid(beta * x);
                        g * (s + beta * x * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let dx = super::ops::softmax_backward(y, g, &node.shape, *axis);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = self.value(*gain);
                if self.tracks(*x) {
                    let rows = xhat.len() / n;
                    let mut dx = vec![T::zero(); xhat.len()];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let sl = r * n..(r + 1) * n;
                        for (j, d) in dxhat.iter_mut().enumerate() {
                            *d = g[r * n + j] * gv[j];
                        }
                        norm_backward(&dxhat, &xhat[sl.clone()], rstd[r], &mut dx[sl]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.tracks(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for (i, (&gi, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                        dg[i % n] += gi * xh;
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.tracks(*bias) {
                    let mut db = vec![T::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let c = node.shape[0];
                let n = xhat.len() / c;
                let mut dx = vec![T::zero(); xhat.len()];
                for ch in 0..c {
                    let sl = ch * n..(ch + 1) * n;
                    norm_backward(&g[sl.clone()], &xhat[sl.clone()], rstd[ch], &mut dx[sl]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = super::ops::axis_split(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.tracks(*v) {
                        let part = super::ops::slice_data(g, outer, total, inner, offset, len);
                        self.accumulate(grads, *v, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, inner) = super::ops::axis_split(xs, *axis);
                let total = xs[*axis];
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    for a in 0..len {
                        let src = (o * len + a) * inner;
                        let dst = (o * total + start + a) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                self.accumulate(grads, *x, super::ops::transpose_data(g, r, c));
            }
            Op::Sum(x) => {
                let n = numel(self.shape(*x));
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = numel(self.shape(*x));
                let v = g[0] / T::of(n as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::MaxReduce { x, argmax } => {
                let mut dx = vec![T::zero(); numel(self.shape(*x))];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv { x, w, b, geom } => {
                if self.tracks(*x) {
                    let dx = conv::backward_input(g, self.value(*w), geom);
                    self.accumulate(grads, *x, dx);
                }
                if self.tracks(*w) {
                    let dw = conv::backward_weight(g, self.value(*x), geom);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.tracks(*b) {
                        self.accumulate(grads, *b, conv::channel_sums(g, geom.out_c));
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // `geom` describes the forward convolution whose adjoint this is:
                // its input is our output and its output is our input.
                if self.tracks(*x) {
                    let dx = conv::forward(g, self.value(*w), geom);
                    self.accumulate(grads, *x, dx);
                }
                if self.tracks(*w) {
                    let dw = conv::backward_weight(self.value(*x), g, geom);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.tracks(*b) {
                        self.accumulate(grads, *b, conv::channel_sums(g, geom.in_c));
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, idx } => {
                let ts = self.shape(*table);
                let f = ts[1];
                let mut dt = vec![T::zero(); numel(ts)];
                for (r, &row) in idx.iter().enumerate() {
                    let dst = row as usize * f;
                    add_into(&mut dt[dst..dst + f], &g[r * f..(r + 1) * f]);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ScatterMean { x, plan } => {
                let dx = plan
                    .targets
                    .iter()
                    .map(|t| match t {
                        Some(t) => g[*t as usize] / T::of(plan.counts[*t as usize] as f64),
                        None => T::zero(),
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub(crate) fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

/// Backward of `xhat = (x - mean) * rstd` for one normalized group.
fn norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<T>() / n;
    for ((o, &d), &x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd * (d - mean_d - x * mean_dx);
    }
}
