use std::sync::Arc;

use super::kernels::{matmul_a_bt, matmul_at_b, matmul_into};
use super::{Precision, Result, Tensor, TensorError};

/// Maps the output gradient to one gradient per parent. The `needs` slice
/// flags which parents actually want one; the rest may be returned as `None`.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended in evaluation order, so
/// parents always precede children and the record is acyclic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub enum BatchNormMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with fixed running statistics.
    Infer { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel batch moments (biased variance) seen in a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::from_parts(
            self.shapes[var.0].clone(),
            Arc::new(g.clone()),
            Precision::Double,
        ))
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }
}

#[derive(Clone, Copy)]
enum Index {
    Full,
    Repeat(usize),
}

impl Index {
    #[inline]
    fn at(self, i: usize) -> usize {
        match self {
            Index::Full => i,
            Index::Repeat(n) => i % n,
        }
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Index, Index)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((a.to_vec(), Index::Full, Index::Full))
    } else if nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Ok((a.to_vec(), Index::Full, Index::Repeat(nb)))
    } else if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        Ok((b.to_vec(), Index::Repeat(na), Index::Full))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn reduce_into(g: &[f64], idx: Index, len: usize, local: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (i, &gv) in g.iter().enumerate() {
        out[idx.at(i)] += gv * local(i);
    }
    out
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last, last)
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Output steps `lo..hi` for which tap `kk` reads inside `0..t` under
/// "same" padding with left pad `pad`.
#[inline]
fn tap_range(kk: usize, pad: usize, t: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (t + pad).saturating_sub(kk).min(t);
    (lo, hi.max(lo))
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, e, t, c] => Ok((n, e, t, c)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a rank-4 (batch, electrode, time, channel) input, got {shape:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Places a tensor on the tape; it tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// Records an op whose value was computed outside the tape. Used by the
    /// fused layers; `backward` receives the output gradient.
    pub fn custom(
        &mut self,
        op: &'static str,
        parents: &[Var],
        shape: Vec<usize>,
        mut data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                expected: shape.iter().product(),
                got: data.len(),
                shape,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let precision = parents
            .iter()
            .fold(Precision::Double, |p, v| p.join(self.nodes[v.0].value.precision()));
        precision.apply(&mut data);
        let requires_grad = parents.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, Arc::new(data), precision),
            parents: parents.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: fn(f64, f64) -> f64,
        local: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        let (shape, ia, ib) = broadcast(op, self.shape(a), self.shape(b))?;
        let ad = self.value(a).shared();
        let bd = self.value(b).shared();
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| fwd(ad[ia.at(i)], bd[ib.at(i)])).collect();
        let (la, lb) = (ad.len(), bd.len());
        self.custom(
            op,
            &[a, b],
            shape,
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| reduce_into(g, ia, la, |i| local(ad[ia.at(i)], bd[ib.at(i)]).0));
                let gb = needs[1].then(|| reduce_into(g, ib, lb, |i| local(ad[ia.at(i)], bd[ib.at(i)]).1));
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(TensorError::Domain { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    /// Elementwise map whose derivative is expressed through the input `x`
    /// and the output `y`.
    fn unary<F, D>(&mut self, op: &'static str, a: Var, fwd: F, deriv: D) -> Result<Var>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let ad = self.value(a).shared();
        let out: Vec<f64> = ad.iter().map(|&x| fwd(x)).collect();
        let yd = Arc::new(out.clone());
        let shape = self.shape(a).to_vec();
        self.custom(
            op,
            &[a],
            shape,
            out,
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(ad.iter().zip(yd.iter()))
                        .map(|(gv, (&x, &y))| gv * deriv(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, move |x| c * x, move |_, _| c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.unary("log", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `x` for positive inputs, `α(eˣ − 1)` otherwise.
    pub fn elu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(
            "elu",
            a,
            move |x| elu(x, alpha),
            move |x, y| if x > 0.0 { 1.0 } else { y + alpha },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => return Err(mismatch("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let ad = self.value(a).shared();
        let bd = self.value(b).shared();
        let mut out = vec![0.0; m * n];
        matmul_into(&ad, &bd, &mut out, m, k, n);
        self.custom(
            "matmul",
            &[a, b],
            vec![m, n],
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt(g, &bd, &mut ga, m, k, n);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b(&ad, g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.data(a).iter().sum();
        self.custom(
            "sum",
            &[a],
            vec![],
            vec![s],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.custom(
            "mean",
            &[a],
            vec![],
            vec![s],
            Box::new(move |g, _| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let ad = self.value(a).shared();
        let s = ad.iter().map(|v| v * v).sum();
        self.custom(
            "sum_squares",
            &[a],
            vec![],
            vec![s],
            Box::new(move |g, _| vec![Some(ad.iter().map(|v| 2.0 * v * g[0]).collect())]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let requires_grad = self.nodes[a.0].requires_grad;
        self.nodes.push(Node {
            value: value.with_grad(false),
            parents: vec![a.0],
            backward: requires_grad.then(|| Box::new(|g: &[f64], _: &[bool]| vec![Some(g.to_vec())]) as BackwardFn),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, width) = split_last(&shape);
        if len == 0 || start + len > width {
            return Err(TensorError::Invalid {
                op: "slice_last",
                msg: format!("range {start}..{} outside last extent {width}", start + len),
            });
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ad[r * width + start..r * width + start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        self.custom(
            "slice_last",
            &[a],
            oshape,
            out,
            Box::new(move |g, _| {
                let mut ga = vec![0.0; rows * width];
                for r in 0..rows {
                    ga[r * width + start..r * width + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Joins along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_last",
            msg: "no inputs".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_last", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ws = widths.clone();
        self.custom(
            "concat_last",
            parts,
            shape,
            out,
            Box::new(move |g, needs| {
                let mut offset = 0;
                ws.iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + start..r * total + start + w]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("index {index} on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * extent + index) * inner;
            out.extend_from_slice(&ad[base..base + inner]);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.custom(
            "select",
            &[a],
            oshape,
            out,
            Box::new(move |g, _| {
                let mut ga = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + index) * inner;
                    ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Inverse of [`Tape::select`]: inserts a new axis at `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        let base_shape = self.shape(first).to_vec();
        if axis > base_shape.len() {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: format!("axis {axis} beyond rank {}", base_shape.len()),
            });
        }
        for &p in parts {
            if self.shape(p) != base_shape.as_slice() {
                return Err(mismatch("stack", &base_shape, self.shape(p)));
            }
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis..].iter().product();
        let k = parts.len();
        let mut out = vec![0.0; outer * k * inner];
        for (j, &p) in parts.iter().enumerate() {
            let pd = self.data(p);
            for o in 0..outer {
                out[(o * k + j) * inner..(o * k + j + 1) * inner].copy_from_slice(&pd[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base_shape;
        shape.insert(axis, k);
        self.custom(
            "stack",
            parts,
            shape,
            out,
            Box::new(move |g, needs| {
                (0..k)
                    .map(|j| {
                        needs[j].then(|| {
                            let mut gp = Vec::with_capacity(outer * inner);
                            for o in 0..outer {
                                gp.extend_from_slice(&g[(o * k + j) * inner..(o * k + j + 1) * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Convolution along the time axis of an `(N, E, T, Cin)` input with a
    /// `(K, Cin, Cout)` kernel, "same" padding (left pad `(K−1)/2`), no
    /// flipping. `bias`, when given, has shape `(Cout)`.
    pub fn conv_time(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (n, e, t, cin) = rank4("conv_time", self.shape(x))?;
        let (k, cout) = match *self.shape(w) {
            [k, ci, co] if ci == cin => (k, co),
            _ => return Err(mismatch("conv_time", self.shape(x), self.shape(w))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv_time", self.shape(w), self.shape(b)));
            }
        }
        let rows = n * e;
        let pad = (k - 1) / 2;
        let xd = self.value(x).shared();
        let wd = self.value(w).shared();
        let mut out = vec![0.0; rows * t * cout];
        if let Some(b) = bias {
            let bd = self.data(b);
            for o in out.chunks_mut(cout) {
                o.copy_from_slice(bd);
            }
        }
        for r in 0..rows {
            let xr = &xd[r * t * cin..(r + 1) * t * cin];
            for ti in 0..t {
                let orow = &mut out[(r * t + ti) * cout..(r * t + ti + 1) * cout];
                for kk in 0..k {
                    let src = ti + kk;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let xs = &xr[(src - pad) * cin..(src - pad + 1) * cin];
                    for (ci, &xv) in xs.iter().enumerate() {
                        let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.custom(
            "conv_time",
            &parents,
            vec![n, e, t, cout],
            out,
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; rows * t * cin]);
                let mut gw = needs[1].then(|| vec![0.0; k * cin * cout]);
                for r in 0..rows {
                    let xr = &xd[r * t * cin..(r + 1) * t * cin];
                    for ti in 0..t {
                        let grow = &g[(r * t + ti) * cout..(r * t + ti + 1) * cout];
                        for kk in 0..k {
                            let src = ti + kk;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ci in 0..cin {
                                let widx = (kk * cin + ci) * cout;
                                if let Some(gx) = gx.as_mut() {
                                    let wrow = &wd[widx..widx + cout];
                                    gx[(r * t + s) * cin + ci] +=
                                        grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xv = xr[s * cin + ci];
                                    for (o, &gv) in gw[widx..widx + cout].iter_mut().zip(grow) {
                                        *o += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![0.0; cout];
                        for row in g.chunks(cout) {
                            for (b, v) in gb.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }

    /// Per-channel time convolution: `(N, E, T, C)` with a `(K, C, D)` kernel
    /// gives `(N, E, T, C·D)`, output channel `c·D + d` reading only input
    /// channel `c`. Same padding as [`Tape::conv_time`].
    pub fn depthwise_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, e, t, c) = rank4("depthwise_time", self.shape(x))?;
        let (k, d) = match *self.shape(w) {
            [k, wc, d] if wc == c => (k, d),
            _ => return Err(mismatch("depthwise_time", self.shape(x), self.shape(w))),
        };
        let rows = n * e;
        let pad = (k - 1) / 2;
        let cd = c * d;
        // Each input channel repeated D times, so every tap is an elementwise
        // multiply-add over contiguous C·D-wide rows.
        let xd = self.data(x);
        let mut xe = vec![0.0; rows * t * cd];
        for (dst, src) in xe.chunks_mut(d).zip(xd.iter()) {
            dst.fill(*src);
        }
        let wd = self.value(w).shared();
        let mut out = vec![0.0; rows * t * cd];
        for r in 0..rows {
            for kk in 0..k {
                let ws = &wd[kk * cd..(kk + 1) * cd];
                let (lo, hi) = tap_range(kk, pad, t);
                for ti in lo..hi {
                    let src = (r * t + ti + kk - pad) * cd;
                    let dst = (r * t + ti) * cd;
                    let xs = &xe[src..src + cd];
                    for ((o, xv), wv) in out[dst..dst + cd].iter_mut().zip(xs).zip(ws) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let xe = Arc::new(xe);
        self.custom(
            "depthwise_time",
            &[x, w],
            vec![n, e, t, cd],
            out,
            Box::new(move |g, needs| {
                let mut gxe = needs[0].then(|| vec![0.0; rows * t * cd]);
                let mut gw = needs[1].then(|| vec![0.0; k * cd]);
                for r in 0..rows {
                    for kk in 0..k {
                        let ws = &wd[kk * cd..(kk + 1) * cd];
                        let (lo, hi) = tap_range(kk, pad, t);
                        for ti in lo..hi {
                            let src = (r * t + ti + kk - pad) * cd;
                            let grow = &g[(r * t + ti) * cd..(r * t + ti + 1) * cd];
                            if let Some(gxe) = gxe.as_mut() {
                                for ((o, gv), wv) in gxe[src..src + cd].iter_mut().zip(grow).zip(ws) {
                                    *o += gv * wv;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xs = &xe[src..src + cd];
                                for ((o, gv), xv) in gw[kk * cd..(kk + 1) * cd].iter_mut().zip(grow).zip(xs) {
                                    *o += gv * xv;
                                }
                            }
                        }
                    }
                }
                let gx = gxe.map(|gxe| gxe.chunks(d).map(|ch| ch.iter().sum()).collect());
                vec![gx, gw]
            }),
        )
    }

    /// Non-overlapping mean over `window` time steps of an `(N, E, T, C)`
    /// input; a trailing remainder shorter than the window is dropped.
    pub fn avg_pool_time(&mut self, x: Var, window: usize) -> Result<Var> {
        let (n, e, t, c) = rank4("avg_pool_time", self.shape(x))?;
        if window == 0 || window > t {
            return Err(TensorError::Invalid {
                op: "avg_pool_time",
                msg: format!("window {window} for time extent {t}"),
            });
        }
        let tp = t / window;
        let rows = n * e;
        let inv = 1.0 / window as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * tp * c];
        for r in 0..rows {
            for p in 0..tp {
                let orow = &mut out[(r * tp + p) * c..(r * tp + p + 1) * c];
                for j in 0..window {
                    let xs = &xd[(r * t + p * window + j) * c..(r * t + p * window + j + 1) * c];
                    for (o, v) in orow.iter_mut().zip(xs) {
                        *o += v;
                    }
                }
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        self.custom(
            "avg_pool_time",
            &[x],
            vec![n, e, tp, c],
            out,
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * t * c];
                for r in 0..rows {
                    for p in 0..tp {
                        let grow = &g[(r * tp + p) * c..(r * tp + p + 1) * c];
                        for j in 0..window {
                            let base = (r * t + p * window + j) * c;
                            for (o, v) in gx[base..base + c].iter_mut().zip(grow) {
                                *o = v * inv;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Batch normalization over every axis but the last (channel) one:
    /// `γ·(x − μ)/√(σ² + ε) + β`. Train mode also returns the batch moments.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = split_last(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm", &shape, self.shape(gamma)));
        }
        let xd = self.value(x).shared();
        let gd = self.value(gamma).shared();
        let bd = self.data(beta).to_vec();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if rows < 2 {
                    return Err(TensorError::Invalid {
                        op: "batch_norm",
                        msg: "train mode needs at least 2 values per channel".into(),
                    });
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", &shape, &[mean.len()]));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let v = self.custom(
            "batch_norm",
            &[x, gamma, beta],
            shape,
            out,
            Box::new(move |g, needs| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gh[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * c];
                    let m = rows as f64;
                    for r in 0..rows {
                        for j in 0..c {
                            let i = r * c + j;
                            gx[i] = if train {
                                gd[j] * inv_std[j] * (g[i] - sum_g[j] / m - xhat[i] * sum_gh[j] / m)
                            } else {
                                gd[j] * inv_std[j] * g[i]
                            };
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then(|| sum_gh.clone()), needs[2].then(|| sum_g.clone())]
            }),
        )?;
        Ok((v, stats))
    }

    /// Row-wise softmax of an `(N, C)` logit matrix.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("expected (batch, classes), got {shape:?}"),
            });
        }
        let c = shape[1];
        let mut out = Vec::with_capacity(self.value(z).numel());
        for row in self.data(z).chunks(c) {
            out.extend(softmax(row));
        }
        let yd = Arc::new(out.clone());
        self.custom(
            "softmax",
            &[z],
            shape,
            out,
            Box::new(move |g, _| {
                let mut gz = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(yd.chunks(c)).zip(gz.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                vec![Some(gz)]
            }),
        )
    }

    /// Mean negative log-probability of the true class; the log argument is
    /// clamped at `1e-12`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.shape(probs) {
            [n, c] if n == labels.len() => (n, c),
            _ => return Err(mismatch("cross_entropy", self.shape(probs), &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} outside 0..{c}"),
            });
        }
        let pd = self.value(probs).shared();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pd[i * c + l].max(LOG_CLAMP).ln())
            .sum::<f64>()
            / n as f64;
        let labels = labels.to_vec();
        self.custom(
            "cross_entropy",
            &[probs],
            vec![],
            vec![loss],
            Box::new(move |g, _| {
                let mut gp = vec![0.0; n * c];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pd[i * c + l];
                    if p > LOG_CLAMP {
                        gp[i * c + l] = -g[0] / (n as f64 * p);
                    }
                }
                vec![Some(gp)]
            }),
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let (Some(backward), Some(g)) = (node.backward.as_ref(), grads[i].as_ref()) else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match grads[p].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

pub(crate) const LOG_CLAMP: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

/// Max-shifted softmax of one row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
