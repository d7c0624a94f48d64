//! Append-only autodiff tape.
//!
//! Every op records a node holding its output value plus enough metadata to
//! run the backward rule. Handles are plain indices, so the graph is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep. After `backward` the tape is closed: recording further ops or
//! running a second backward is a programmer error.
//!
//! Masking is fused into the softmax op rather than expressed with -inf
//! score tensors, which keeps the debug-build finiteness assertion valid for
//! every value on the tape.

use super::kernels::{matmul_2d, transpose_2d};
use super::{broadcast_shapes, broadcast_strides, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Matmul(MatmulMeta),
    Softmax { a: TensorId },
    RmsNorm { x: TensorId, gain: TensorId },
    Silu { a: TensorId },
    Gelu { a: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    Rotary { a: TensorId, cos: Vec<S>, sin: Vec<S> },
    Reshape { a: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Narrow { a: TensorId, axis: usize, start: usize },
    Concat { parts: Vec<TensorId>, axis: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
}

struct MatmulMeta {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
    /// Per output batch cell: (a batch cell, b batch cell), broadcast resolved.
    cells: Vec<(usize, usize)>,
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    closed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            closed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
    }

    /// Gradient buffer, if backward reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient with unreached nodes reading as all zeros.
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<S> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![S::ZERO; self.nodes[id.0].value.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, needs_grad: bool, op: Op<S>) -> TensorId {
        assert!(!self.closed, "tape is closed after backward");
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape (node {})",
            self.nodes.len()
        );
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> TensorId {
        self.leaf(t, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binop(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binop(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binop(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn binop(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shapes(sa, sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let value = map_broadcast(
            sa,
            &self.nodes[a.0].value,
            sb,
            &self.nodes[b.0].value,
            &out_shape,
            f,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, value, ng, op))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        let value = self.nodes[a.0].value.iter().map(|&x| x * cs).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.needs(a));
        self.push(shape, value, ng, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        let value = self.nodes[a.0].value.iter().map(|&x| x + cs).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.needs(a));
        self.push(shape, value, ng, Op::AddScalar { a })
    }

    /// Batched matrix product: `[..., m, k] x [..., k, n] -> [..., m, n]`,
    /// batch dims broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(mismatch)?;
        let cells = batch_cells(batch_a, batch_b, &batch);

        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut value = vec![S::ZERO; out_shape.iter().product()];
        for (ci, &(ca, cb)) in cells.iter().enumerate() {
            matmul_2d(
                &self.nodes[a.0].value[ca * m * ka..(ca + 1) * m * ka],
                &self.nodes[b.0].value[cb * ka * n..(cb + 1) * ka * n],
                m,
                ka,
                n,
                &mut value[ci * m * n..(ci + 1) * m * n],
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            out_shape,
            value,
            ng,
            Op::Matmul(MatmulMeta {
                a,
                b,
                m,
                k: ka,
                n,
                cells,
            }),
        ))
    }

    /// Softmax over the last axis. An optional key mask (true = keep) zeroes
    /// masked entries; a fully masked row comes out all zero.
    pub fn softmax_masked(
        &mut self,
        a: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let l = *shape.last().expect("softmax input must have at least 1 axis");
        if let Some(m) = mask {
            if m.len() != l {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_masked",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let x = &self.nodes[a.0].value;
        let mut value = vec![S::ZERO; x.len()];
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        for r in 0..x.len() / l {
            let row = &x[r * l..(r + 1) * l];
            let out = &mut value[r * l..(r + 1) * l];
            let mut max: Option<S> = None;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    max = Some(max.map_or(v, |m| m.maximum(v)));
                }
            }
            let Some(max) = max else { continue }; // fully masked row stays zero
            let mut denom = S::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[j] = e;
                    denom += e;
                }
            }
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            shape,
            value,
            ng,
            Op::Softmax { a },
        ))
    }

    /// RMS normalization over the last axis with a learned gain vector.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("rms_norm input must have at least 1 axis");
        if self.nodes[gain.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let eps = S::from_f64(RMS_EPS);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let mut value = vec![S::ZERO; xv.len()];
        let inv_d = S::from_f64(1.0 / d as f64);
        for r in 0..xv.len() / d {
            let row = &xv[r * d..(r + 1) * d];
            let mut ms = S::ZERO;
            for &v in row {
                ms = v.mul_add(v, ms);
            }
            let inv = S::ONE / (ms * inv_d + eps).sqrt();
            for j in 0..d {
                value[r * d + j] = row[j] * inv * g[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(shape, value, ng, Op::RmsNorm { x, gain }))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.needs(a));
        self.push(shape, value, ng, Op::Silu { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let half = S::from_f64(0.5);
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| half * x * (S::ONE + gelu_inner(x).tanh()))
            .collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.needs(a));
        self.push(shape, value, ng, Op::Gelu { a })
    }

    /// Row gather: `table[V, d]` indexed by `ids` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (ts[0], ts[1]);
        assert!(
            ids.iter().all(|&i| i < v),
            "embedding id out of range (vocab {v})"
        );
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotate adjacent channel pairs of `[T, H, d]` by per-(position, pair)
    /// angles given as `cos`/`sin` tables of shape `[T, d/2]`.
    pub fn rotary(
        &mut self,
        a: TensorId,
        cos: &[S],
        sin: &[S],
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || !shape[2].is_multiple_of(2) || cos.len() != shape[0] * shape[2] / 2 {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: shape,
                rhs: vec![cos.len()],
            });
        }
        assert_eq!(cos.len(), sin.len());
        let (t, h, d) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[a.0].value;
        let mut value = vec![S::ZERO; x.len()];
        for ti in 0..t {
            for hi in 0..h {
                let base = (ti * h + hi) * d;
                for j in 0..d / 2 {
                    let (c, s) = (cos[ti * d / 2 + j], sin[ti * d / 2 + j]);
                    let (x1, x2) = (x[base + 2 * j], x[base + 2 * j + 1]);
                    value[base + 2 * j] = c * x1 - s * x2;
                    value[base + 2 * j + 1] = s * x1 + c * x2;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            shape,
            value,
            ng,
            Op::Rotary {
                a,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId, TensorError> {
        let old = self.nodes[a.0].shape.clone();
        if old.iter().product::<usize>() != new_shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: new_shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let ng = self.needs(a);
        Ok(self.push(new_shape.to_vec(), value, ng, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| {
                if p >= shape.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = permute_data(&self.nodes[a.0].value, &shape, perm);
        let ng = self.needs(a);
        Ok(self.push(
            out_shape,
            value,
            ng,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn narrow(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = o * shape[axis] * inner + start * inner;
            value.extend_from_slice(&x[row..row + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(out_shape, value, ng, Op::Narrow { a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let first = self.nodes[parts[0].0].shape.clone();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == first.len()
                && axis < s.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut value = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let s_axis = self.nodes[p.0].shape[axis];
                let x = &self.nodes[p.0].value;
                value.extend_from_slice(&x[o * s_axis * inner..(o + 1) * s_axis * inner]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out_shape,
            value,
            ng,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::ZERO;
        for &v in &self.nodes[a.0].value {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(vec![1], vec![acc], ng, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len();
        let mut acc = S::ZERO;
        for &v in &self.nodes[a.0].value {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(
            vec![1],
            vec![acc * S::from_f64(1.0 / n as f64)],
            ng,
            Op::MeanAll { a },
        )
    }

    /// Reverse sweep from a scalar loss. Closes the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        assert!(!self.closed, "tape already ran backward");
        self.closed = true;
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Matmul(_)) {
                let meta = meta_clone(&self.nodes[i].op);
                self.backward_matmul(i, meta);
            } else {
                self.step_backward(i);
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let (left, right) = self.nodes.split_at_mut(i);
        let node = &right[0];
        let g = node.grad.as_ref().expect("checked by caller");
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &(id, _sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if left[id.0].needs_grad {
                        let da = reduce_to_shape(g, &node.shape, &left[id.0].shape);
                        accumulate(&mut left[id.0], &da);
                    }
                }
            }
            Op::Sub { a, b } => {
                if left[a.0].needs_grad {
                    let da = reduce_to_shape(g, &node.shape, &left[a.0].shape);
                    accumulate(&mut left[a.0], &da);
                }
                if left[b.0].needs_grad {
                    let mut db = reduce_to_shape(g, &node.shape, &left[b.0].shape);
                    for v in &mut db {
                        *v = -*v;
                    }
                    accumulate(&mut left[b.0], &db);
                }
            }
            Op::Mul { a, b } => {
                if left[a.0].needs_grad {
                    let full = map_broadcast(
                        &node.shape,
                        g,
                        &left[b.0].shape,
                        &left[b.0].value,
                        &node.shape,
                        |gv, bv| gv * bv,
                    );
                    let da = reduce_to_shape(&full, &node.shape, &left[a.0].shape);
                    accumulate(&mut left[a.0], &da);
                }
                if left[b.0].needs_grad {
                    let full = map_broadcast(
                        &node.shape,
                        g,
                        &left[a.0].shape,
                        &left[a.0].value,
                        &node.shape,
                        |gv, av| gv * av,
                    );
                    let db = reduce_to_shape(&full, &node.shape, &left[b.0].shape);
                    accumulate(&mut left[b.0], &db);
                }
            }
            Op::Scale { a, c } => {
                if left[a.0].needs_grad {
                    let cs = S::from_f64(*c);
                    let da: Vec<S> = g.iter().map(|&gv| gv * cs).collect();
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::AddScalar { a } => {
                if left[a.0].needs_grad {
                    accumulate(&mut left[a.0], g);
                }
            }
            Op::Matmul(_) => unreachable!("matmul grads are dispatched by backward()"),
            Op::Softmax { a } => {
                if left[a.0].needs_grad {
                    let l = *node.shape.last().unwrap();
                    let y = &node.value;
                    let mut da = vec![S::ZERO; y.len()];
                    for r in 0..y.len() / l {
                        let yr = &y[r * l..(r + 1) * l];
                        let gr = &g[r * l..(r + 1) * l];
                        let mut dot = S::ZERO;
                        for j in 0..l {
                            dot = yr[j].mul_add(gr[j], dot);
                        }
                        for j in 0..l {
                            da[r * l + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::RmsNorm { x, gain } => {
                let d = *node.shape.last().unwrap();
                let xv = &left[x.0].value;
                let gv = &left[gain.0].value;
                let eps = S::from_f64(RMS_EPS);
                let inv_d = S::from_f64(1.0 / d as f64);
                let rows = xv.len() / d;
                let mut dx = vec![S::ZERO; xv.len()];
                let mut dg = vec![S::ZERO; d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut ms = S::ZERO;
                    for &v in xr {
                        ms = v.mul_add(v, ms);
                    }
                    let inv = S::ONE / (ms * inv_d + eps).sqrt();
                    let inv3 = inv * inv * inv;
                    let mut proj = S::ZERO;
                    for j in 0..d {
                        proj = (gr[j] * gv[j]).mul_add(xr[j], proj);
                    }
                    for j in 0..d {
                        dx[r * d + j] =
                            gr[j] * gv[j] * inv - xr[j] * proj * inv3 * inv_d;
                        dg[j] = gr[j].mul_add(xr[j] * inv, dg[j]);
                    }
                }
                if left[x.0].needs_grad {
                    accumulate(&mut left[x.0], &dx);
                }
                if left[gain.0].needs_grad {
                    accumulate(&mut left[gain.0], &dg);
                }
            }
            Op::Silu { a } => {
                if left[a.0].needs_grad {
                    let da: Vec<S> = left[a.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let s = sigmoid(x);
                            gv * s * (S::ONE + x * (S::ONE - s))
                        })
                        .collect();
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::Gelu { a } => {
                if left[a.0].needs_grad {
                    let half = S::from_f64(0.5);
                    let c = S::from_f64(GELU_C);
                    let k3 = S::from_f64(3.0 * GELU_K);
                    let da: Vec<S> = left[a.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let th = gelu_inner(x).tanh();
                            let sech2 = S::ONE - th * th;
                            let du = c * (S::ONE + k3 * x * x);
                            gv * (half * (S::ONE + th) + half * x * sech2 * du)
                        })
                        .collect();
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::Embedding { table, ids } => {
                if left[table.0].needs_grad {
                    let d = node.shape[1];
                    let mut dt = vec![S::ZERO; left[table.0].value.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    accumulate(&mut left[table.0], &dt);
                }
            }
            Op::Rotary { a, cos, sin } => {
                if left[a.0].needs_grad {
                    let (t, h, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let mut da = vec![S::ZERO; g.len()];
                    for ti in 0..t {
                        for hi in 0..h {
                            let base = (ti * h + hi) * d;
                            for j in 0..d / 2 {
                                let (c, s) = (cos[ti * d / 2 + j], sin[ti * d / 2 + j]);
                                let (g1, g2) = (g[base + 2 * j], g[base + 2 * j + 1]);
                                da[base + 2 * j] = c * g1 + s * g2;
                                da[base + 2 * j + 1] = -s * g1 + c * g2;
                            }
                        }
                    }
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::Reshape { a } => {
                if left[a.0].needs_grad {
                    accumulate(&mut left[a.0], g);
                }
            }
            Op::Permute { a, perm } => {
                if left[a.0].needs_grad {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let da = permute_data(g, &node.shape, &inv);
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::Narrow { a, axis, start } => {
                if left[a.0].needs_grad {
                    let src_shape = &left[a.0].shape;
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let outer: usize = src_shape[..*axis].iter().product();
                    let len = node.shape[*axis];
                    let mut da = vec![S::ZERO; left[a.0].value.len()];
                    for o in 0..outer {
                        let dst = o * src_shape[*axis] * inner + start * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::Concat { parts, axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let total_axis = node.shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let p_axis = left[p.0].shape[*axis];
                    if left[p.0].needs_grad {
                        let mut dp = vec![S::ZERO; left[p.0].value.len()];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * p_axis * inner;
                            dp[dst..dst + p_axis * inner]
                                .copy_from_slice(&g[src..src + p_axis * inner]);
                        }
                        accumulate(&mut left[p.0], &dp);
                    }
                    offset += p_axis;
                }
            }
            Op::SumAll { a } => {
                if left[a.0].needs_grad {
                    let da = vec![g[0]; left[a.0].value.len()];
                    accumulate(&mut left[a.0], &da);
                }
            }
            Op::MeanAll { a } => {
                if left[a.0].needs_grad {
                    let n = left[a.0].value.len();
                    let da = vec![g[0] * S::from_f64(1.0 / n as f64); n];
                    accumulate(&mut left[a.0], &da);
                }
            }
        }
    }

    fn backward_matmul(&mut self, i: usize, meta: MatmulMeta) {
        let (m, k, n) = (meta.m, meta.k, meta.n);
        let g = self.nodes[i].grad.clone().expect("checked by caller");
        if self.nodes[meta.a.0].needs_grad {
            // dA[cell a] += dC[cell] * B[cell b]^T
            let mut da = vec![S::ZERO; self.nodes[meta.a.0].value.len()];
            let mut bt = vec![S::ZERO; k * n];
            for (ci, &(ca, cb)) in meta.cells.iter().enumerate() {
                let b = &self.nodes[meta.b.0].value[cb * k * n..(cb + 1) * k * n];
                transpose_2d(b, k, n, &mut bt);
                matmul_2d(
                    &g[ci * m * n..(ci + 1) * m * n],
                    &bt,
                    m,
                    n,
                    k,
                    &mut da[ca * m * k..(ca + 1) * m * k],
                );
            }
            accumulate(&mut self.nodes[meta.a.0], &da);
        }
        if self.nodes[meta.b.0].needs_grad {
            // dB[cell b] += A[cell a]^T * dC[cell]
            let mut db = vec![S::ZERO; self.nodes[meta.b.0].value.len()];
            let mut at = vec![S::ZERO; m * k];
            for (ci, &(ca, cb)) in meta.cells.iter().enumerate() {
                let a = &self.nodes[meta.a.0].value[ca * m * k..(ca + 1) * m * k];
                transpose_2d(a, m, k, &mut at);
                matmul_2d(
                    &at,
                    &g[ci * m * n..(ci + 1) * m * n],
                    k,
                    m,
                    n,
                    &mut db[cb * k * n..(cb + 1) * k * n],
                );
            }
            accumulate(&mut self.nodes[meta.b.0], &db);
        }
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

fn gelu_inner<S: Scalar>(x: S) -> S {
    S::from_f64(GELU_C) * (x + S::from_f64(GELU_K) * x * x * x)
}

fn meta_clone<S>(op: &Op<S>) -> MatmulMeta {
    match op {
        Op::Matmul(m) => MatmulMeta {
            a: m.a,
            b: m.b,
            m: m.m,
            k: m.k,
            n: m.n,
            cells: m.cells.clone(),
        },
        _ => unreachable!("meta_clone on non-matmul op"),
    }
}

fn accumulate<S: Scalar>(node: &mut Node<S>, contrib: &[S]) {
    let g = node
        .grad
        .get_or_insert_with(|| vec![S::ZERO; node.value.len()]);
    debug_assert_eq!(g.len(), contrib.len());
    for (gv, &c) in g.iter_mut().zip(contrib) {
        *gv += c;
    }
}

/// Elementwise map over two broadcast operands, producing `out_shape`.
fn map_broadcast<S: Scalar>(
    a_shape: &[usize],
    a: &[S],
    b_shape: &[usize],
    b: &[S],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ai], b[bi]));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ai += sa[ax];
            bi += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ai -= sa[ax] * out_shape[ax];
            bi -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `g` (shaped `g_shape`) down to `target_shape` by collapsing broadcast axes.
fn reduce_to_shape<S: Scalar>(g: &[S], g_shape: &[usize], target_shape: &[usize]) -> Vec<S> {
    if g_shape == target_shape {
        return g.to_vec();
    }
    let st = broadcast_strides(target_shape, g_shape);
    let n: usize = g_shape.iter().product();
    let nd = g_shape.len();
    let mut out = vec![S::ZERO; target_shape.iter().product()];
    let mut idx = vec![0usize; nd];
    let mut ti = 0usize;
    for &gv in g.iter().take(n) {
        out[ti] += gv;
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ti += st[ax];
            if idx[ax] < g_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ti -= st[ax] * g_shape[ax];
        }
    }
    out
}

fn permute_data<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Stride in the input for each output axis.
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= out_strides[ax] * out_shape[ax];
        }
    }
    out
}

/// Resolve broadcast batch indices for batched matmul: for every cell of the
/// broadcast batch shape, the flat cell index into each operand's batch.
fn batch_cells(batch_a: &[usize], batch_b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let n: usize = out.iter().product();
    if out.is_empty() {
        return vec![(0, 0)];
    }
    let sa = broadcast_strides(batch_a, out);
    let sb = broadcast_strides(batch_b, out);
    let nd = out.len();
    let mut cells = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..n {
        cells.push((ai, bi));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ai += sa[ax];
            bi += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
            ai -= sa[ax] * out[ax];
            bi -= sb[ax] * out[ax];
        }
    }
    cells
}
