use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index_for_test(i: usize) -> Self {
        Var(i)
    }
}

/// Operation tag of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Conv2d,
    Silu,
    Sigmoid,
    Abs,
    Reshape,
    Concat,
    Slice,
    Mean,
    Sum,
    BceWithLogits,
    Route,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    Scale(S),
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Silu,
    Sigmoid,
    Abs,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Mean,
    Sum,
    BceWithLogits,
    Route { coefficient: S },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Parameter,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Silu => OpKind::Silu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Abs => OpKind::Abs,
            Op::Reshape => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
            Op::BceWithLogits => OpKind::BceWithLogits,
            Op::Route { .. } => OpKind::Route,
        }
    }
}

/// One recorded operation: its inputs, forward value and accumulated
/// gradient.
#[derive(Clone, Debug)]
pub struct Node<S> {
    op: Op<S>,
    inputs: Vec<Var>,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Node<S> {
    pub fn op_kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<S>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

/// Append-only record of a computation, differentiated in reverse.
///
/// Nodes are stored in recording order, which is always a valid
/// topological order. A tape has a single owner; build one per step.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Clears node gradients (parameter accumulators are untouched).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<Var>, value: Tensor<S>) -> Var {
        let requires_grad = match op {
            Op::Constant => value.requires_grad(),
            Op::Param(_) => true,
            Op::BceWithLogits => self.nodes[inputs[0].0].requires_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        Tensor::new(shape, data).expect("kernel produced consistent shape")
    }

    /// Records a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Constant, vec![], t)
    }

    /// Records a parameter leaf; `backward` accumulates into its
    /// gradient accumulator in `store`.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(Op::Param(id), vec![], value)
    }

    /// Records a parameter's current value as a non-differentiated leaf.
    pub fn frozen_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.get(id).value.clone().with_requires_grad(false);
        self.push(Op::Constant, vec![], value)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(a).is_scalar() {
            Ok(Broadcast::LeftScalar)
        } else if self.value(b).is_scalar() {
            Ok(Broadcast::RightScalar)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?} (only scalar broadcasting is supported)"),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op<S>,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var, AutodiffError> {
        let mode = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, data) = match mode {
            Broadcast::Same => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LeftScalar => {
                let x = va.item();
                (vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::RightScalar => {
                let y = vb.item();
                (va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let t = self.make(shape, data);
        Ok(self.push(op, vec![a, b], t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a);
        let t = self.make(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect());
        self.push(Op::Scale(c), vec![a], t)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                for (o, &yv) in row.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *o += xv * yv;
                }
            }
        }
        let t = self.make(vec![m, n], out);
        Ok(self.push(Op::MatMul, vec![a, b], t))
    }

    /// Direct 2-D convolution over `[N, C, H, W]` input with `[O, C, KH, KW]`
    /// weights and optional `[O]` bias. Zero padding on all sides.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.o] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?} for {} output channels", self.shape(b), geo.o),
                });
            }
        }
        let mut out = vec![S::zero(); geo.n * geo.o * geo.oh * geo.ow];
        conv2d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = self.make(vec![geo.n, geo.o, geo.oh, geo.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, t))
    }

    fn unary(&mut self, op: Op<S>, a: Var, f: impl Fn(S) -> S) -> Var {
        let v = self.value(a);
        let t = self.make(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        self.push(op, vec![a], t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Op::Silu, a, S::silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, S::sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs, a, S::abs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a).reshaped(shape).map_err(|_| AutodiffError::ShapeMismatch {
            op: "reshape",
            detail: format!("{:?} -> {shape:?}", self.shape(a)),
        })?;
        Ok(self.push(Op::Reshape, vec![a], t))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} vs {base:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = self.make(shape, out);
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), t))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = self.make(shape, out);
        Ok(self.push(Op::Slice { axis, start }, vec![a], t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(S::zero(), |acc, &x| acc + x);
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = S::of(v.numel() as f64);
        let s = v.data().iter().fold(S::zero(), |acc, &x| acc + x) / n;
        self.push(Op::Mean, vec![a], Tensor::scalar(s))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against
    /// `targets` in `[0, 1]`. Targets are never differentiated.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, AutodiffError> {
        if self.shape(logits) != self.shape(targets) {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{:?} vs {:?}", self.shape(logits), self.shape(targets)),
            });
        }
        let (x, y) = (self.value(logits), self.value(targets));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&x, &y)| x.softplus() - y * x)
            .collect();
        let t = self.make(x.shape().to_vec(), data);
        Ok(self.push(Op::BceWithLogits, vec![logits, targets], t))
    }

    /// Identity in the forward pass; the backward pass multiplies the
    /// incoming gradient by `coefficient`. A zero coefficient stops the
    /// gradient entirely.
    pub fn route(&mut self, a: Var, coefficient: S) -> Var {
        let t = self.value(a).clone();
        self.push(Op::Route { coefficient }, vec![a], t)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Node gradients and parameter accumulators are added to, never
    /// overwritten, so several losses may be backpropagated in turn.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<(), AutodiffError> {
        self.backward_scaled(loss, S::one(), store)
    }

    /// As [`Tape::backward`], seeding the reverse pass with `seed` instead of 1.
    pub fn backward_scaled(
        &mut self,
        loss: Var,
        seed: S,
        store: &mut ParamStore<S>,
    ) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if let Op::Param(id) = self.nodes[i].op {
                store.accumulate_grad(id, &g)?;
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    node.grad =
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let mode = if self.shape(a) == self.shape(b) {
                    Broadcast::Same
                } else if self.value(a).is_scalar() {
                    Broadcast::LeftScalar
                } else {
                    Broadcast::RightScalar
                };
                let sign = if matches!(node.op, Op::Sub) { -S::one() } else { S::one() };
                let is_mul = matches!(node.op, Op::Mul);
                for (side, v, other) in [(0, a, b), (1, b, a)] {
                    if !needs(v) {
                        continue;
                    }
                    let factor = if side == 1 { sign } else { S::one() };
                    let ov = val(other);
                    let reduce = matches!(
                        (side, mode),
                        (0, Broadcast::LeftScalar) | (1, Broadcast::RightScalar)
                    );
                    let other_at = |k: usize| -> S {
                        if ov.len() == 1 {
                            ov[0]
                        } else {
                            ov[k]
                        }
                    };
                    let slot = slot(grads, v, self.value(v).numel());
                    if reduce {
                        let mut s = S::zero();
                        for (k, &gk) in g.iter().enumerate() {
                            s += if is_mul { gk * other_at(k) } else { gk };
                        }
                        slot[0] += factor * s;
                    } else {
                        for (k, (d, &gk)) in slot.iter_mut().zip(g).enumerate() {
                            *d += factor * if is_mul { gk * other_at(k) } else { gk };
                        }
                    }
                }
            }
            Op::Scale(c) => {
                let a = inputs[0];
                if needs(a) {
                    let slot = slot(grads, a, g.len());
                    slot.iter_mut().zip(g).for_each(|(d, &gk)| *d += *c * gk);
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if needs(a) {
                    let y = val(b);
                    let slot = slot(grads, a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += g[i * n + j] * y[p * n + j];
                            }
                            slot[i * k + p] += s;
                        }
                    }
                }
                if needs(b) {
                    let x = val(a);
                    let slot = slot(grads, b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x[i * k + p];
                            for j in 0..n {
                                slot[p * n + j] += xv * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (inputs[0], inputs[1]);
                let geo = ConvGeometry::new(self.shape(x), self.shape(w), *stride, *padding)
                    .expect("geometry validated in forward");
                if let Some(&b) = inputs.get(2) {
                    if needs(b) {
                        let slot = slot(grads, b, geo.o);
                        let plane = geo.oh * geo.ow;
                        for n in 0..geo.n {
                            for o in 0..geo.o {
                                let base = (n * geo.o + o) * plane;
                                slot[o] += g[base..base + plane]
                                    .iter()
                                    .fold(S::zero(), |acc, &v| acc + v);
                            }
                        }
                    }
                }
                let mut dx = needs(x).then(|| vec![S::zero(); self.value(x).numel()]);
                let mut dw = needs(w).then(|| vec![S::zero(); self.value(w).numel()]);
                conv2d_backward(&geo, val(x), val(w), g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(slot(grads, x, dx.len()), &dx);
                }
                if let Some(dw) = dw {
                    add_into(slot(grads, w, dw.len()), &dw);
                }
            }
            Op::Silu | Op::Sigmoid | Op::Abs => {
                let a = inputs[0];
                if needs(a) {
                    let x = val(a);
                    let y = node.value.data();
                    let slot = slot(grads, a, g.len());
                    for k in 0..g.len() {
                        let d = match node.op {
                            Op::Silu => {
                                let s = x[k].sigmoid();
                                s * (S::one() + x[k] * (S::one() - s))
                            }
                            Op::Sigmoid => y[k] * (S::one() - y[k]),
                            _ => {
                                if x[k] > S::zero() {
                                    S::one()
                                } else if x[k] < S::zero() {
                                    -S::one()
                                } else {
                                    S::zero()
                                }
                            }
                        };
                        slot[k] += g[k] * d;
                    }
                }
            }
            Op::Reshape => {
                let a = inputs[0];
                if needs(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let len = self.shape(p)[*axis] * inner;
                    if needs(p) {
                        let slot = slot(grads, p, outer * len);
                        for o in 0..outer {
                            add_into(
                                &mut slot[o * len..(o + 1) * len],
                                &g[o * total + offset..o * total + offset + len],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                let a = inputs[0];
                if needs(a) {
                    let src_shape = self.shape(a);
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis] * inner;
                    let full = src_shape[*axis] * inner;
                    let slot = slot(grads, a, outer * full);
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        add_into(&mut slot[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Sum | Op::Mean => {
                let a = inputs[0];
                if needs(a) {
                    let n = self.value(a).numel();
                    let d = if matches!(node.op, Op::Mean) {
                        g[0] / S::of(n as f64)
                    } else {
                        g[0]
                    };
                    slot(grads, a, n).iter_mut().for_each(|s| *s += d);
                }
            }
            Op::BceWithLogits => {
                let (x, y) = (inputs[0], inputs[1]);
                if needs(x) {
                    let (xv, yv) = (val(x), val(y));
                    let slot = slot(grads, x, g.len());
                    for k in 0..g.len() {
                        slot[k] += g[k] * (xv[k].sigmoid() - yv[k]);
                    }
                }
            }
            Op::Route { coefficient } => {
                let a = inputs[0];
                if needs(a) && *coefficient != S::zero() {
                    let slot = slot(grads, a, g.len());
                    slot.iter_mut().zip(g).for_each(|(d, &gk)| *d += *coefficient * gk);
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self, AutodiffError> {
        let err = |detail: String| AutodiffError::ShapeMismatch {
            op: "conv2d",
            detail,
        };
        if xs.len() != 4 || ws.len() != 4 {
            return Err(err(format!("input {xs:?} and weight {ws:?} must be rank 4")));
        }
        if xs[1] != ws[1] {
            return Err(err(format!(
                "input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(err("stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output indices `[lo, hi)` whose input coordinate `o*stride + k - pad`
    /// lands inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv2d_forward<S: Scalar>(
    geo: &ConvGeometry,
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let ConvGeometry {
        n, c, h, w: iw, o, kh, kw, oh, ow, stride, pad,
    } = *geo;
    for ni in 0..n {
        for oi in 0..o {
            let plane = &mut out[(ni * o + oi) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                plane.fill(b[oi]);
            }
            for ci in 0..c {
                let src = &x[(ni * c + ci) * h * iw..][..h * iw];
                for ky in 0..kh {
                    let (y0, y1) = geo.valid(ky, h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = geo.valid(kx, iw, ow);
                        let wv = w[((oi * c + ci) * kh + ky) * kw + kx];
                        for oy in y0..y1 {
                            let row = &src[(oy * stride + ky - pad) * iw..][..iw];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                for ox in x0..x1 {
                                    orow[ox] += wv * row[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<S: Scalar>(
    geo: &ConvGeometry,
    x: &[S],
    w: &[S],
    g: &[S],
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
) {
    let ConvGeometry {
        n, c, h, w: iw, o, kh, kw, oh, ow, stride, pad,
    } = *geo;
    for ni in 0..n {
        for oi in 0..o {
            let gplane = &g[(ni * o + oi) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let base = (ni * c + ci) * h * iw;
                for ky in 0..kh {
                    let (y0, y1) = geo.valid(ky, h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = geo.valid(kx, iw, ow);
                        let widx = ((oi * c + ci) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let mut acc = S::zero();
                        for oy in y0..y1 {
                            let row0 = base + (oy * stride + ky - pad) * iw;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if let Some(dx) = dx.as_deref_mut() {
                                for ox in x0..x1 {
                                    dx[row0 + ox * stride + kx - pad] += wv * grow[ox];
                                }
                            }
                            if dw.is_some() {
                                for ox in x0..x1 {
                                    acc += grow[ox] * x[row0 + ox * stride + kx - pad];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}
