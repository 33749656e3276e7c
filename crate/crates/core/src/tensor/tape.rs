use crate::error::{Error, Result};

use super::kernels::{self, ConvDims, DepthwiseDims, PoolDims};
use super::{ParamId, ParamStore, Real, Shape4, Tensor4};

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// Floor applied inside the cross-entropy logarithm so confident wrong
/// predictions cannot produce -inf.
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<R: Real> {
    Conv2d {
        x: TensorId,
        k: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Depthwise {
        x: TensorId,
        k: TensorId,
        stride: (usize, usize),
    },
    Relu {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
    },
    CrossEntropy {
        probs: TensorId,
        onehot: TensorId,
    },
    AvgPool {
        x: TensorId,
        window: (usize, usize),
        stride: (usize, usize),
    },
    Pad {
        x: TensorId,
        pad: [usize; 4], // top, bottom, left, right
    },
    Binary {
        a: TensorId,
        b: TensorId,
        kind: BinKind,
    },
    AddScalar {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        s: R,
    },
    Sqrt {
        x: TensorId,
    },
    Softplus {
        x: TensorId,
    },
    MeanNhw {
        x: TensorId,
    },
    MeanC {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
}

struct Record<R: Real> {
    out: TensorId,
    op: Op<R>,
}

/// Recording tape for reverse-mode differentiation. Operations append records
/// in creation order, so every record follows all of its inputs; `backward`
/// replays the records once, in reverse.
///
/// The tape is transient: [`Tape::reset`] drops all tensors, records, and
/// parameter bindings, after which the next forward pass starts fresh.
pub struct Tape<R: Real> {
    tensors: Vec<Tensor4<R>>,
    records: Vec<Record<R>>,
    bindings: Vec<(u64, ParamId, TensorId)>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), records: Vec::new(), bindings: Vec::new() }
    }

    /// Drop all recorded state. Parameter values live in the [`ParamStore`]
    /// and survive; everything on the tape does not.
    pub fn reset(&mut self) {
        self.tensors.clear();
        self.records.clear();
        self.bindings.clear();
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> Shape4 {
        self.tensors[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[R] {
        &self.tensors[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[R]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].grad.is_some()
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, shape: Shape4, values: Vec<R>, requires_grad: bool) -> TensorId {
        self.push_tensor(Tensor4::new(shape, values, requires_grad))
    }

    /// Register a non-differentiable tensor.
    pub fn constant(&mut self, shape: Shape4, values: Vec<R>) -> TensorId {
        self.leaf(shape, values, false)
    }

    /// Bind a stored parameter onto the tape as a differentiable leaf. Binding
    /// the same parameter twice in one pass returns the existing leaf, so its
    /// gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> TensorId {
        let token = store.token();
        if let Some(&(_, _, tid)) =
            self.bindings.iter().find(|&&(t, pid, _)| t == token && pid == id)
        {
            return tid;
        }
        let tid = self.leaf(store.shape(id), store.value(id).to_vec(), true);
        self.bindings.push((token, id, tid));
        tid
    }

    /// Parameters bound during the current pass, as (param, leaf) pairs.
    pub fn bindings(&self) -> Vec<(ParamId, TensorId)> {
        self.bindings.iter().map(|&(_, pid, tid)| (pid, tid)).collect()
    }

    fn push_tensor(&mut self, t: Tensor4<R>) -> TensorId {
        self.tensors.push(t);
        TensorId(self.tensors.len() - 1)
    }

    fn push_op(&mut self, shape: Shape4, values: Vec<R>, requires_grad: bool, op: Op<R>) -> TensorId {
        let out = self.push_tensor(Tensor4::new(shape, values, requires_grad));
        if requires_grad {
            self.records.push(Record { out, op });
        }
        out
    }

    // ── convolution and pooling ──────────────────────────────────────────

    /// Cross-correlation (no kernel flip). `k` has shape (c_out, c_in, k_h,
    /// k_w); the optional bias has shape (1, c_out, 1, 1).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        if xs.c != ks.c {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape4::new(1, ks.n, 1, 1) {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: ks, rhs: bs });
            }
        }
        let out_shape = kernels::conv2d_out_shape(xs, ks, stride, padding).ok_or(
            Error::EmptyConvOutput { op: "conv2d", input: xs, kernel: (ks.h, ks.w), stride, padding },
        )?;
        let dims = ConvDims { x: xs, k: ks, out: out_shape, stride, padding };
        let values = kernels::conv2d_forward(
            &dims,
            self.values(x),
            self.values(k),
            b.map(|b| self.values(b)),
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(k)
            || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push_op(out_shape, values, rg, Op::Conv2d { x, k, b, stride, padding }))
    }

    /// Per-channel convolution. `k` has shape (c, 1, k_h, k_w) and channel i
    /// of the input is convolved only with kernel i.
    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        stride: (usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        if ks.n != xs.c || ks.c != 1 {
            return Err(Error::ChannelMismatch {
                op: "depthwise_conv2d",
                expected: xs.c,
                got: ks.n,
            });
        }
        let out_shape = kernels::depthwise_out_shape(xs, ks, stride).ok_or(
            Error::EmptyConvOutput {
                op: "depthwise_conv2d",
                input: xs,
                kernel: (ks.h, ks.w),
                stride,
                padding: (0, 0),
            },
        )?;
        let dims = DepthwiseDims { x: xs, k: ks, out: out_shape, stride };
        let values = kernels::depthwise_forward(&dims, self.values(x), self.values(k));
        let rg = self.requires_grad(x) || self.requires_grad(k);
        Ok(self.push_op(out_shape, values, rg, Op::Depthwise { x, k, stride }))
    }

    /// Mean over each (window, stride) tile.
    pub fn avg_pool(
        &mut self,
        x: TensorId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let out_shape = kernels::pool_out_shape(xs, window, stride)
            .ok_or(Error::WindowTooLarge { input: xs, window })?;
        let dims = PoolDims { x: xs, out: out_shape, window, stride };
        let values = kernels::avg_pool_forward(&dims, self.values(x));
        let rg = self.requires_grad(x);
        Ok(self.push_op(out_shape, values, rg, Op::AvgPool { x, window, stride }))
    }

    /// Mean over the full spatial extent, yielding shape (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        self.avg_pool(x, (xs.h, xs.w), (xs.h, xs.w))
    }

    /// Zero padding; `pad` is [top, bottom, left, right].
    pub fn pad2d(&mut self, x: TensorId, pad: [usize; 4]) -> Result<TensorId> {
        let xs = self.shape(x);
        let [t, b, l, r] = pad;
        if t + b + l + r == 0 {
            return Ok(x);
        }
        let os = Shape4::new(xs.n, xs.c, xs.h + t + b, xs.w + l + r);
        let mut values = vec![R::zero(); os.count()];
        let xv = self.values(x);
        for n in 0..xs.n {
            for c in 0..xs.c {
                for y in 0..xs.h {
                    let src = xs.idx(n, c, y, 0);
                    let dst = os.idx(n, c, y + t, l);
                    values[dst..dst + xs.w].copy_from_slice(&xv[src..src + xs.w]);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push_op(os, values, rg, Op::Pad { x, pad }))
    }

    // ── activations and loss ─────────────────────────────────────────────

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let values = self.values(x).iter().map(|&v| v.max(R::zero())).collect();
        let rg = self.requires_grad(x);
        self.push_op(xs, values, rg, Op::Relu { x })
    }

    /// Row-wise softmax over the channel axis of a (n, c, 1, 1) tensor,
    /// computed with per-row max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: xs,
                rhs: Shape4::new(xs.n, xs.c, 1, 1),
            });
        }
        let xv = self.values(x);
        let mut values = vec![R::zero(); xs.count()];
        for n in 0..xs.n {
            let row = &xv[n * xs.c..(n + 1) * xs.c];
            let mut max = row[0];
            for (i, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        op: "softmax input".to_string(),
                        index: n * xs.c + i,
                    });
                }
                if v > max {
                    max = v;
                }
            }
            let mut sum = R::zero();
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                values[n * xs.c + i] = e;
                sum += e;
            }
            for v in &mut values[n * xs.c..(n + 1) * xs.c] {
                *v /= sum;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push_op(xs, values, rg, Op::Softmax { x }))
    }

    /// Categorical cross-entropy averaged over the batch:
    /// -(1/n) sum_i sum_c y_ic ln(max(p_ic, floor)).
    pub fn cross_entropy(&mut self, probs: TensorId, onehot: TensorId) -> Result<TensorId> {
        let ps = self.shape(probs);
        let ys = self.shape(onehot);
        if ps != ys || ps.h != 1 || ps.w != 1 {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: ps, rhs: ys });
        }
        let yv = self.values(onehot);
        for n in 0..ps.n {
            let sum: R = yv[n * ps.c..(n + 1) * ps.c].iter().copied().sum();
            if (sum - R::one()).abs() > R::from_f64(1e-6) {
                return Err(Error::BadOneHot { row: n, sum: sum.to_f64() });
            }
        }
        let pv = self.values(probs);
        let floor = R::from_f64(CROSS_ENTROPY_FLOOR);
        let mut acc = R::zero();
        for i in 0..ps.count() {
            if yv[i] != R::zero() {
                acc -= yv[i] * pv[i].max(floor).ln();
            }
        }
        let loss = acc / R::from_f64(ps.n as f64);
        let rg = self.requires_grad(probs) || self.requires_grad(onehot);
        Ok(self.push_op(Shape4::scalar(), vec![loss], rg, Op::CrossEntropy { probs, onehot }))
    }

    // ── elementwise and broadcast arithmetic ─────────────────────────────

    /// `a + b`; `b` may be a per-channel statistic of shape (1, c, 1, 1) or
    /// (n, c, 1, 1), broadcast across the spatial extent.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinKind::Div)
    }

    fn binary(&mut self, a: TensorId, b: TensorId, kind: BinKind) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !(sa == sb || (sb.c == sa.c && sb.h == 1 && sb.w == 1 && (sb.n == 1 || sb.n == sa.n))) {
            return Err(Error::ShapeMismatch { op: "binary op", lhs: sa, rhs: sb });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut values = vec![R::zero(); sa.count()];
        let hw = sa.h * sa.w;
        for i in 0..sa.count() {
            let bi = broadcast_index(i, sa, sb, hw);
            values[i] = match kind {
                BinKind::Add => av[i] + bv[bi],
                BinKind::Sub => av[i] - bv[bi],
                BinKind::Mul => av[i] * bv[bi],
                BinKind::Div => av[i] / bv[bi],
            };
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push_op(sa, values, rg, Op::Binary { a, b, kind }))
    }

    pub fn add_scalar(&mut self, x: TensorId, s: R) -> TensorId {
        let xs = self.shape(x);
        let values = self.values(x).iter().map(|&v| v + s).collect();
        let rg = self.requires_grad(x);
        self.push_op(xs, values, rg, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: TensorId, s: R) -> TensorId {
        let xs = self.shape(x);
        let values = self.values(x).iter().map(|&v| v * s).collect();
        let rg = self.requires_grad(x);
        self.push_op(xs, values, rg, Op::Scale { x, s })
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let values = self.values(x).iter().map(|&v| v.sqrt()).collect();
        let rg = self.requires_grad(x);
        self.push_op(xs, values, rg, Op::Sqrt { x })
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let values = self.values(x).iter().map(|&v| softplus_stable(v)).collect();
        let rg = self.requires_grad(x);
        self.push_op(xs, values, rg, Op::Softplus { x })
    }

    // ── reductions and shape changes ─────────────────────────────────────

    /// Per-channel mean over batch, height, and width: (n, c, h, w) -> (1, c, 1, 1).
    pub fn mean_nhw(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let xv = self.values(x);
        let inv = R::from_f64(1.0 / (xs.n * xs.h * xs.w) as f64);
        let mut values = vec![R::zero(); xs.c];
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.idx(n, c, 0, 0);
                let mut acc = R::zero();
                for i in 0..xs.h * xs.w {
                    acc += xv[base + i];
                }
                values[c] += acc;
            }
        }
        for v in &mut values {
            *v *= inv;
        }
        let rg = self.requires_grad(x);
        self.push_op(Shape4::new(1, xs.c, 1, 1), values, rg, Op::MeanNhw { x })
    }

    /// Mean over the channel axis: (n, c, h, w) -> (n, 1, h, w).
    pub fn mean_c(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let xv = self.values(x);
        let os = Shape4::new(xs.n, 1, xs.h, xs.w);
        let inv = R::from_f64(1.0 / xs.c as f64);
        let mut values = vec![R::zero(); os.count()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for i in 0..xs.h * xs.w {
                    values[n * xs.h * xs.w + i] += xv[xs.idx(n, c, 0, 0) + i];
                }
            }
        }
        for v in &mut values {
            *v *= inv;
        }
        let rg = self.requires_grad(x);
        self.push_op(os, values, rg, Op::MeanC { x })
    }

    /// Reinterpret the flat value buffer under a new shape with the same
    /// element count.
    pub fn reshape(&mut self, x: TensorId, shape: Shape4) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.count() != shape.count() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: xs, rhs: shape });
        }
        let values = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push_op(shape, values, rg, Op::Reshape { x }))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: R = self.values(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push_op(Shape4::scalar(), vec![total], rg, Op::SumAll { x })
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Populate the gradient of every differentiable ancestor of `loss`.
    /// Each recorded operation is visited at most once; call [`Tape::reset`]
    /// before building the next pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss { shape: ls });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut reached = vec![false; self.tensors.len()];
        reached[loss.0] = true;
        self.tensors[loss.0].grad.as_mut().unwrap()[0] = R::one();

        for i in (0..self.records.len()).rev() {
            let out = self.records[i].out;
            if !reached[out.0] {
                continue;
            }
            for p in record_parents(&self.records[i].op) {
                if self.requires_grad(p) {
                    reached[p.0] = true;
                }
            }
            self.apply_backward(i)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: Vec<R>) {
        if let Some(g) = self.tensors[id.0].grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn apply_backward(&mut self, rec: usize) -> Result<()> {
        let out = self.records[rec].out;
        let g = self.tensors[out.0].grad.clone().expect("recorded output has grad");
        // Ops are matched by value-free copies of their fields to keep the
        // borrow on `records` short.
        match self.records[rec].op {
            Op::Conv2d { x, k, b, stride, padding } => {
                let dims = ConvDims {
                    x: self.shape(x),
                    k: self.shape(k),
                    out: self.shape(out),
                    stride,
                    padding,
                };
                if self.requires_grad(x) {
                    let dx = kernels::conv2d_backward_x(&dims, self.values(k), &g);
                    self.accumulate(x, dx);
                }
                if self.requires_grad(k) {
                    let dk = kernels::conv2d_backward_k(&dims, self.values(x), &g);
                    self.accumulate(k, dk);
                }
                if let Some(b) = b {
                    if self.requires_grad(b) {
                        let db = kernels::conv2d_backward_b(&dims, &g);
                        self.accumulate(b, db);
                    }
                }
            }
            Op::Depthwise { x, k, stride } => {
                let dims = DepthwiseDims {
                    x: self.shape(x),
                    k: self.shape(k),
                    out: self.shape(out),
                    stride,
                };
                if self.requires_grad(x) {
                    let dx = kernels::depthwise_backward_x(&dims, self.values(k), &g);
                    self.accumulate(x, dx);
                }
                if self.requires_grad(k) {
                    let dk = kernels::depthwise_backward_k(&dims, self.values(x), &g);
                    self.accumulate(k, dk);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<R> = self
                    .values(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v > R::zero() { gi } else { R::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softmax { x } => {
                let xs = self.shape(out);
                let p = self.values(out);
                let mut dx = vec![R::zero(); xs.count()];
                for n in 0..xs.n {
                    let base = n * xs.c;
                    let mut dot = R::zero();
                    for c in 0..xs.c {
                        dot += g[base + c] * p[base + c];
                    }
                    for c in 0..xs.c {
                        dx[base + c] = p[base + c] * (g[base + c] - dot);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::CrossEntropy { probs, onehot } => {
                let ps = self.shape(probs);
                let floor = R::from_f64(CROSS_ENTROPY_FLOOR);
                let gs = g[0] / R::from_f64(ps.n as f64);
                if self.requires_grad(probs) {
                    let dp: Vec<R> = self
                        .values(probs)
                        .iter()
                        .zip(self.values(onehot))
                        .map(|(&p, &y)| {
                            if y != R::zero() && p >= floor {
                                -gs * y / p
                            } else {
                                R::zero()
                            }
                        })
                        .collect();
                    self.accumulate(probs, dp);
                }
                if self.requires_grad(onehot) {
                    let dy: Vec<R> = self
                        .values(probs)
                        .iter()
                        .map(|&p| -gs * p.max(floor).ln())
                        .collect();
                    self.accumulate(onehot, dy);
                }
            }
            Op::AvgPool { x, window, stride } => {
                let dims = PoolDims {
                    x: self.shape(x),
                    out: self.shape(out),
                    window,
                    stride,
                };
                let dx = kernels::avg_pool_backward(&dims, &g);
                self.accumulate(x, dx);
            }
            Op::Pad { x, pad } => {
                let xs = self.shape(x);
                let os = self.shape(out);
                let [t, _, l, _] = pad;
                let mut dx = vec![R::zero(); xs.count()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for y in 0..xs.h {
                            let src = os.idx(n, c, y + t, l);
                            let dst = xs.idx(n, c, y, 0);
                            dx[dst..dst + xs.w].copy_from_slice(&g[src..src + xs.w]);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Binary { a, b, kind } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let hw = sa.h * sa.w;
                if self.requires_grad(a) {
                    let bv = self.values(b);
                    let da: Vec<R> = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| gi * bv[broadcast_index(i, sa, sb, hw)])
                            .collect(),
                        BinKind::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| gi / bv[broadcast_index(i, sa, sb, hw)])
                            .collect(),
                    };
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let av = self.values(a);
                    let bv = self.values(b);
                    let mut db = vec![R::zero(); sb.count()];
                    for i in 0..sa.count() {
                        let bi = broadcast_index(i, sa, sb, hw);
                        db[bi] += match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * av[i],
                            BinKind::Div => -g[i] * av[i] / (bv[bi] * bv[bi]),
                        };
                    }
                    self.accumulate(b, db);
                }
            }
            Op::AddScalar { x, .. } => {
                self.accumulate(x, g);
            }
            Op::Scale { x, s } => {
                let dx = g.iter().map(|&gi| gi * s).collect();
                self.accumulate(x, dx);
            }
            Op::Sqrt { x } => {
                let half = R::from_f64(0.5);
                let dx: Vec<R> = self
                    .values(out)
                    .iter()
                    .zip(&g)
                    .map(|(&o, &gi)| gi * half / o)
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softplus { x } => {
                let dx: Vec<R> = self
                    .values(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| gi / (R::one() + (-v).exp()))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::MeanNhw { x } => {
                let xs = self.shape(x);
                let inv = R::from_f64(1.0 / (xs.n * xs.h * xs.w) as f64);
                let mut dx = vec![R::zero(); xs.count()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = xs.idx(n, c, 0, 0);
                        let gc = g[c] * inv;
                        for i in 0..xs.h * xs.w {
                            dx[base + i] = gc;
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::MeanC { x } => {
                let xs = self.shape(x);
                let inv = R::from_f64(1.0 / xs.c as f64);
                let mut dx = vec![R::zero(); xs.count()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = xs.idx(n, c, 0, 0);
                        for i in 0..xs.h * xs.w {
                            dx[base + i] = g[n * xs.h * xs.w + i] * inv;
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, g);
            }
            Op::SumAll { x } => {
                let count = self.shape(x).count();
                self.accumulate(x, vec![g[0]; count]);
            }
        }
        Ok(())
    }
}

/// Index into the (possibly broadcast) right-hand operand.
#[inline(always)]
fn broadcast_index(i: usize, sa: Shape4, sb: Shape4, hw: usize) -> usize {
    if sa == sb {
        i
    } else {
        let plane = i / hw; // n * c + c index within lhs
        let n = plane / sa.c;
        let c = plane % sa.c;
        if sb.n == 1 {
            c
        } else {
            n * sb.c + c
        }
    }
}

fn record_parents<R: Real>(op: &Op<R>) -> Vec<TensorId> {
    match *op {
        Op::Conv2d { x, k, b, .. } => {
            let mut v = vec![x, k];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
        Op::Depthwise { x, k, .. } => vec![x, k],
        Op::CrossEntropy { probs, onehot } => vec![probs, onehot],
        Op::Binary { a, b, .. } => vec![a, b],
        Op::Relu { x }
        | Op::Softmax { x }
        | Op::AvgPool { x, .. }
        | Op::Pad { x, .. }
        | Op::AddScalar { x, .. }
        | Op::Scale { x, .. }
        | Op::Sqrt { x }
        | Op::Softplus { x }
        | Op::MeanNhw { x }
        | Op::MeanC { x }
        | Op::Reshape { x }
        | Op::SumAll { x } => vec![x],
    }
}

fn softplus_stable<R: Real>(v: R) -> R {
    if v > R::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
