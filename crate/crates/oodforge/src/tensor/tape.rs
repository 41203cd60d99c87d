//! The Wengert tape and its tensor handles.
//!
//! A [`Tape`] owns an append-only arena of nodes; a [`Tensor`] is a cheap
//! (tape, node-id) handle. Recording order is the topological order, so
//! `backward` is one reverse sweep over the arena. Gradients are accumulated
//! into a scratch vector during the sweep and written to the nodes at the
//! end, which keeps borrow lifetimes simple and the visit count at exactly
//! one per node.
//!
//! A tape and its tensors are confined to a single thread (`Rc` inside);
//! anything that must cross threads travels as a plain `ndarray` array.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

use super::conv::{col2im, im2col, ConvGeom};
use super::{sigmoid, Scalar, TensorError};

pub(crate) type NodeId = usize;

enum Op<E: Scalar> {
    Leaf,
    /// [m×k]·[k×n]
    Matmul(NodeId, NodeId),
    /// Same-shape elementwise sum.
    Add(NodeId, NodeId),
    /// [m×n] + row vector [n], broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Same-shape elementwise product.
    Mul(NodeId, NodeId),
    /// Tensor × scalar node (the dummy multiplier of the IRMv1 penalty).
    MulScalarNode(NodeId, NodeId),
    /// Elementwise product with a constant array (activation masks, label
    /// vectors); no gradient flows into the constant.
    MulConst(NodeId, ArrayD<E>),
    Scale(NodeId, E),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// [m×n] → [n], mean over axis 0.
    MeanRows(NodeId),
    /// [..., k] → [...], mean over the last axis (global average pooling).
    MeanLastAxis(NodeId),
    /// Euclidean norm of all elements → scalar.
    L2Norm(NodeId),
    /// Same-shape full contraction → scalar.
    Dot(NodeId, NodeId),
    /// Elementwise clamp; gradient passes only where lo ≤ x ≤ hi.
    Clamp(NodeId, E, E),
    /// 2-d transpose.
    Transpose(NodeId),
    Reshape(NodeId),
    /// Axis permutation; backward applies the inverse permutation.
    Permute(NodeId, Vec<usize>),
    Im2col(NodeId, ConvGeom),
    Col2im(NodeId, ConvGeom),
    /// Per-row softmax cross-entropy against constant class indices.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

struct Node<E: Scalar> {
    value: ArrayD<E>,
    grad: Option<ArrayD<E>>,
    op: Op<E>,
    needs_grad: bool,
}

struct TapeCore<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Recording context for one differentiable computation.
pub struct Tape<E: Scalar> {
    core: Rc<RefCell<TapeCore<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            core: Rc::clone(&self.core),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a tape.
pub struct Tensor<E: Scalar> {
    tape: Tape<E>,
    id: NodeId,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            core: Rc::new(RefCell::new(TapeCore { nodes: Vec::new() })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.core.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<E>, op: Op<E>, needs_grad: bool) -> Tensor<E> {
        let mut core = self.core.borrow_mut();
        let id = core.nodes.len();
        core.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Register an input value. Rejects non-finite data: this is the choke
    /// point through which all external values enter the tape.
    pub fn leaf(&self, value: ArrayD<E>, requires_grad: bool) -> Result<Tensor<E>, TensorError> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { context: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: ArrayD<E>) -> Result<Tensor<E>, TensorError> {
        self.leaf(value, false)
    }

    /// 0-d convenience leaf.
    pub fn scalar(&self, value: E, requires_grad: bool) -> Result<Tensor<E>, TensorError> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value), requires_grad)
    }

    /// Reverse sweep from a scalar root. Clears previous gradients first, so
    /// repeated calls on the same tape are idempotent, and visits each node
    /// exactly once in reverse recording order.
    pub fn backward(&self, root: &Tensor<E>) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&self.core, &root.tape.core) {
            return Err(TensorError::CrossTape);
        }
        let mut core = self.core.borrow_mut();
        if core.nodes[root.id].value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: core.nodes[root.id].value.shape().to_vec(),
            });
        }
        for n in core.nodes.iter_mut() {
            n.grad = None;
        }

        let n_nodes = root.id + 1;
        let mut grads: Vec<Option<ArrayD<E>>> = (0..n_nodes).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(
            core.nodes[root.id].value.raw_dim(),
            E::one(),
        ));

        fn accum<E: Scalar>(slot: &mut Option<ArrayD<E>>, contrib: ArrayD<E>) {
            match slot {
                Some(g) => *g += &contrib,
                None => *slot = Some(contrib),
            }
        }

        for id in (0..n_nodes).rev() {
            // Leaves keep their accumulated slot (written back below);
            // interior nodes consume theirs while distributing to parents.
            if matches!(core.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let nodes = &core.nodes;
            let needs = |pid: NodeId| nodes[pid].needs_grad;
            // (parent, contribution) pairs computed with immutable borrows,
            // then accumulated below.
            let mut out: Vec<(NodeId, ArrayD<E>)> = Vec::with_capacity(2);
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if needs(*a) {
                        let bv = nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                        out.push((*a, g2.dot(&bv.t()).into_dyn()));
                    }
                    if needs(*b) {
                        let av = nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                        out.push((*b, av.t().dot(&g2).into_dyn()));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        out.push((*a, g.clone()));
                    }
                    if needs(*b) {
                        out.push((*b, g.clone()));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(*a) {
                        out.push((*a, g.clone()));
                    }
                    if needs(*r) {
                        out.push((*r, g.sum_axis(Axis(0))));
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        out.push((*a, g.clone()));
                    }
                    if needs(*b) {
                        out.push((*b, g.mapv(|v| -v)));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        out.push((*a, &g * &nodes[*b].value));
                    }
                    if needs(*b) {
                        out.push((*b, &g * &nodes[*a].value));
                    }
                }
                Op::MulScalarNode(t, s) => {
                    let sv = *nodes[*s].value.iter().next().unwrap();
                    if needs(*t) {
                        out.push((*t, g.mapv(|v| v * sv)));
                    }
                    if needs(*s) {
                        let mut dot = E::zero();
                        for (gv, tv) in g.iter().zip(nodes[*t].value.iter()) {
                            dot = dot + *gv * *tv;
                        }
                        out.push((*s, ArrayD::from_elem(nodes[*s].value.raw_dim(), dot)));
                    }
                }
                Op::MulConst(t, c) => {
                    if needs(*t) {
                        out.push((*t, &g * c));
                    }
                }
                Op::Scale(t, c) => {
                    if needs(*t) {
                        let c = *c;
                        out.push((*t, g.mapv(|v| v * c)));
                    }
                }
                Op::Neg(t) => {
                    if needs(*t) {
                        out.push((*t, g.mapv(|v| -v)));
                    }
                }
                Op::Relu(t) => {
                    if needs(*t) {
                        let mut gi = g.clone();
                        gi.zip_mut_with(&nodes[*t].value, |gv, xv| {
                            if !(*xv > E::zero()) {
                                *gv = E::zero();
                            }
                        });
                        out.push((*t, gi));
                    }
                }
                Op::Sigmoid(t) => {
                    if needs(*t) {
                        let mut gi = g.clone();
                        gi.zip_mut_with(&nodes[id].value, |gv, sv| {
                            *gv = *gv * *sv * (E::one() - *sv);
                        });
                        out.push((*t, gi));
                    }
                }
                Op::Softplus(t) => {
                    if needs(*t) {
                        let mut gi = g.clone();
                        gi.zip_mut_with(&nodes[*t].value, |gv, xv| {
                            *gv = *gv * sigmoid(*xv);
                        });
                        out.push((*t, gi));
                    }
                }
                Op::Square(t) => {
                    if needs(*t) {
                        let two = E::from_f64(2.0);
                        let mut gi = g.clone();
                        gi.zip_mut_with(&nodes[*t].value, |gv, xv| {
                            *gv = *gv * two * *xv;
                        });
                        out.push((*t, gi));
                    }
                }
                Op::SumAll(t) => {
                    if needs(*t) {
                        let gs = *g.iter().next().unwrap();
                        out.push((*t, ArrayD::from_elem(nodes[*t].value.raw_dim(), gs)));
                    }
                }
                Op::MeanAll(t) => {
                    if needs(*t) {
                        let n = E::from_f64(nodes[*t].value.len() as f64);
                        let gs = *g.iter().next().unwrap() / n;
                        out.push((*t, ArrayD::from_elem(nodes[*t].value.raw_dim(), gs)));
                    }
                }
                Op::MeanRows(t) => {
                    if needs(*t) {
                        let shape = nodes[*t].value.shape();
                        let (m, n) = (shape[0], shape[1]);
                        let inv_m = E::one() / E::from_f64(m as f64);
                        let gt = ArrayD::from_shape_fn(IxDyn(&[m, n]), |ix| g[[ix[1]]] * inv_m);
                        out.push((*t, gt));
                    }
                }
                Op::MeanLastAxis(t) => {
                    if needs(*t) {
                        let shape = nodes[*t].value.shape().to_vec();
                        let k = *shape.last().unwrap();
                        let inv_k = E::one() / E::from_f64(k as f64);
                        let mut gt = ArrayD::<E>::zeros(IxDyn(&shape));
                        for (lane, gv) in gt
                            .rows_mut()
                            .into_iter()
                            .zip(g.iter())
                        {
                            let mut lane = lane;
                            lane.fill(*gv * inv_k);
                        }
                        out.push((*t, gt));
                    }
                }
                Op::L2Norm(t) => {
                    if needs(*t) {
                        let norm = *nodes[id].value.iter().next().unwrap();
                        let gs = *g.iter().next().unwrap();
                        let contrib = if norm > E::zero() {
                            let scale = gs / norm;
                            nodes[*t].value.mapv(|v| v * scale)
                        } else {
                            // Subgradient choice at the kink: 0.
                            ArrayD::zeros(nodes[*t].value.raw_dim())
                        };
                        out.push((*t, contrib));
                    }
                }
                Op::Dot(a, b) => {
                    let gs = *g.iter().next().unwrap();
                    if needs(*a) {
                        out.push((*a, nodes[*b].value.mapv(|v| v * gs)));
                    }
                    if needs(*b) {
                        out.push((*b, nodes[*a].value.mapv(|v| v * gs)));
                    }
                }
                Op::Clamp(t, lo, hi) => {
                    if needs(*t) {
                        let (lo, hi) = (*lo, *hi);
                        let mut gi = g.clone();
                        gi.zip_mut_with(&nodes[*t].value, |gv, xv| {
                            if *xv < lo || *xv > hi {
                                *gv = E::zero();
                            }
                        });
                        out.push((*t, gi));
                    }
                }
                Op::Transpose(t) => {
                    if needs(*t) {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        out.push((*t, g2.t().as_standard_layout().to_owned().into_dyn()));
                    }
                }
                Op::Reshape(t) => {
                    if needs(*t) {
                        let orig = nodes[*t].value.raw_dim();
                        let flat: Vec<E> = g.iter().copied().collect();
                        out.push((*t, ArrayD::from_shape_vec(orig, flat).unwrap()));
                    }
                }
                Op::Permute(t, order) => {
                    if needs(*t) {
                        let mut inverse = vec![0usize; order.len()];
                        for (dst, &src) in order.iter().enumerate() {
                            inverse[src] = dst;
                        }
                        let gp = g
                            .view()
                            .permuted_axes(IxDyn(&inverse))
                            .as_standard_layout()
                            .to_owned();
                        out.push((*t, gp));
                    }
                }
                Op::Im2col(t, geom) => {
                    if needs(*t) {
                        out.push((*t, col2im(&g, geom)));
                    }
                }
                Op::Col2im(t, geom) => {
                    if needs(*t) {
                        out.push((*t, im2col(&g, geom)));
                    }
                }
                Op::SoftmaxCrossEntropy(t, labels) => {
                    if needs(*t) {
                        let logits = nodes[*t].value.view().into_dimensionality::<Ix2>().unwrap();
                        let (b, c) = (logits.nrows(), logits.ncols());
                        let mut gt = ArrayD::<E>::zeros(IxDyn(&[b, c]));
                        for i in 0..b {
                            let row = logits.row(i);
                            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
                            let mut z = E::zero();
                            for v in row.iter() {
                                z = z + (*v - m).exp();
                            }
                            let gi = g[[i]];
                            for j in 0..c {
                                let sm = (row[j] - m).exp() / z;
                                let ind = if j == labels[i] { E::one() } else { E::zero() };
                                gt[[i, j]] = gi * (sm - ind);
                            }
                        }
                        out.push((*t, gt));
                    }
                }
            }
            drop(g);
            for (pid, contrib) in out {
                accum(&mut grads[pid], contrib);
            }
        }

        for (id, slot) in grads.into_iter().enumerate() {
            if core.nodes[id].needs_grad {
                core.nodes[id].grad = slot;
            }
        }
        Ok(())
    }
}

// ── Tensor accessors ────────────────────────────────────────────────────

impl<E: Scalar> Tensor<E> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.core.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.core.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.core.borrow().nodes[self.id].needs_grad
    }

    /// Clone of the node's value.
    pub fn value(&self) -> ArrayD<E> {
        self.tape.core.borrow().nodes[self.id].value.clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<E, TensorError> {
        let core = self.tape.core.borrow();
        let v = &core.nodes[self.id].value;
        if v.len() != 1 {
            return Err(TensorError::BadShape {
                op: "scalar_value",
                expected: "single-element tensor",
                got: v.shape().to_vec(),
            });
        }
        Ok(*v.iter().next().unwrap())
    }

    /// Gradient accumulated by the last `backward`. Populated on
    /// requires-grad leaves; interior nodes do not retain gradients.
    pub fn grad(&self) -> Option<ArrayD<E>> {
        self.tape.core.borrow().nodes[self.id].grad.clone()
    }

    pub fn tape(&self) -> Tape<E> {
        self.tape.clone()
    }

    fn same_tape(&self, other: &Tensor<E>) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.tape.core, &other.tape.core) {
            Ok(())
        } else {
            Err(TensorError::CrossTape)
        }
    }

    fn val<R>(&self, f: impl FnOnce(&ArrayD<E>) -> R) -> R {
        f(&self.tape.core.borrow().nodes[self.id].value)
    }

    fn needs(&self) -> bool {
        self.requires_grad()
    }

    fn needs2(&self, other: &Tensor<E>) -> bool {
        self.needs() || other.needs()
    }
}

// ── Operations ──────────────────────────────────────────────────────────

impl<E: Scalar> Tensor<E> {
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| {
            other.val(|b| {
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                a2.dot(&b2).into_dyn()
            })
        });
        Ok(self
            .tape
            .push(value, Op::Matmul(self.id, other.id), self.needs2(other)))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| other.val(|b| a + b));
        Ok(self
            .tape
            .push(value, Op::Add(self.id, other.id), self.needs2(other)))
    }

    /// [m×n] + [n]: broadcast a row vector over every row (bias addition).
    pub fn add_row(&self, row: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(row)?;
        let (ls, rs) = (self.shape(), row.shape());
        if ls.len() != 2 || rs.len() != 1 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| {
            row.val(|r| {
                let mut out = a.clone();
                let r1 = r.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                for mut lane in out
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .rows_mut()
                {
                    lane += &r1;
                }
                out
            })
        });
        Ok(self
            .tape
            .push(value, Op::AddRow(self.id, row.id), self.needs2(row)))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| other.val(|b| a - b));
        Ok(self
            .tape
            .push(value, Op::Sub(self.id, other.id), self.needs2(other)))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| other.val(|b| a * b));
        Ok(self
            .tape
            .push(value, Op::Mul(self.id, other.id), self.needs2(other)))
    }

    /// Multiply by a single-element tensor, broadcast over all elements.
    pub fn mul_scalar_node(&self, s: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(s)?;
        if s.len() != 1 {
            return Err(TensorError::BadShape {
                op: "mul_scalar_node",
                expected: "single-element scalar tensor",
                got: s.shape(),
            });
        }
        let sv = s.scalar_value()?;
        let value = self.val(|a| a.mapv(|v| v * sv));
        Ok(self
            .tape
            .push(value, Op::MulScalarNode(self.id, s.id), self.needs2(s)))
    }

    /// Elementwise product with a constant array (no gradient into `c`).
    pub fn mul_const(&self, c: &ArrayD<E>) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        if ls != c.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: ls,
                rhs: c.shape().to_vec(),
            });
        }
        let value = self.val(|a| a * c);
        Ok(self
            .tape
            .push(value, Op::MulConst(self.id, c.clone()), self.needs()))
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let value = self.val(|a| a.mapv(|v| v * c));
        self.tape.push(value, Op::Scale(self.id, c), self.needs())
    }

    pub fn neg(&self) -> Tensor<E> {
        let value = self.val(|a| a.mapv(|v| -v));
        self.tape.push(value, Op::Neg(self.id), self.needs())
    }

    pub fn relu(&self) -> Tensor<E> {
        let value = self.val(|a| a.mapv(|v| v.max(E::zero())));
        self.tape.push(value, Op::Relu(self.id), self.needs())
    }

    pub fn sigmoid_op(&self) -> Tensor<E> {
        let value = self.val(|a| a.mapv(sigmoid));
        self.tape.push(value, Op::Sigmoid(self.id), self.needs())
    }

    pub fn softplus_op(&self) -> Tensor<E> {
        let value = self.val(|a| a.mapv(super::softplus));
        self.tape.push(value, Op::Softplus(self.id), self.needs())
    }

    pub fn square(&self) -> Tensor<E> {
        let value = self.val(|a| a.mapv(|v| v * v));
        self.tape.push(value, Op::Square(self.id), self.needs())
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let value = self.val(|a| ArrayD::from_elem(IxDyn(&[]), a.iter().fold(E::zero(), |s, v| s + *v)));
        self.tape.push(value, Op::SumAll(self.id), self.needs())
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.len() as f64);
        let value = self.val(|a| {
            ArrayD::from_elem(IxDyn(&[]), a.iter().fold(E::zero(), |s, v| s + *v) / n)
        });
        self.tape.push(value, Op::MeanAll(self.id), self.needs())
    }

    /// [m×n] → [n]: column means.
    pub fn mean_rows(&self) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        if ls.len() != 2 {
            return Err(TensorError::BadShape {
                op: "mean_rows",
                expected: "2-d tensor",
                got: ls,
            });
        }
        let inv_m = E::one() / E::from_f64(ls[0] as f64);
        let value = self.val(|a| a.sum_axis(Axis(0)).mapv(|v| v * inv_m));
        Ok(self.tape.push(value, Op::MeanRows(self.id), self.needs()))
    }

    /// [..., k] → [...]: mean over the trailing axis.
    pub fn mean_last_axis(&self) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        if ls.is_empty() {
            return Err(TensorError::BadShape {
                op: "mean_last_axis",
                expected: "tensor with at least one axis",
                got: ls,
            });
        }
        let k = E::from_f64(ls[ls.len() - 1] as f64);
        let value = self.val(|a| a.sum_axis(Axis(ls.len() - 1)).mapv(|v| v / k));
        Ok(self
            .tape
            .push(value, Op::MeanLastAxis(self.id), self.needs()))
    }

    /// Euclidean norm over all elements → scalar.
    pub fn l2_norm(&self) -> Tensor<E> {
        let value = self.val(|a| {
            let ss = a.iter().fold(E::zero(), |s, v| s + *v * *v);
            ArrayD::from_elem(IxDyn(&[]), ss.sqrt())
        });
        self.tape.push(value, Op::L2Norm(self.id), self.needs())
    }

    /// Full contraction of two same-shape tensors → scalar.
    pub fn dot(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.same_tape(other)?;
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: ls,
                rhs: rs,
            });
        }
        let value = self.val(|a| {
            other.val(|b| {
                let s = a
                    .iter()
                    .zip(b.iter())
                    .fold(E::zero(), |s, (x, y)| s + *x * *y);
                ArrayD::from_elem(IxDyn(&[]), s)
            })
        });
        Ok(self
            .tape
            .push(value, Op::Dot(self.id, other.id), self.needs2(other)))
    }

    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        assert!(lo <= hi, "clamp: lo must not exceed hi");
        let value = self.val(|a| a.mapv(|v| v.max(lo).min(hi)));
        self.tape
            .push(value, Op::Clamp(self.id, lo, hi), self.needs())
    }

    pub fn transpose(&self) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        if ls.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "2-d tensor",
                got: ls,
            });
        }
        let value = self.val(|a| {
            a.view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .t()
                .as_standard_layout()
                .to_owned()
                .into_dyn()
        });
        Ok(self.tape.push(value, Op::Transpose(self.id), self.needs()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>, TensorError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "shape with matching element count",
                got: shape.to_vec(),
            });
        }
        let value = self.val(|a| {
            let flat: Vec<E> = a.iter().copied().collect();
            ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap()
        });
        Ok(self.tape.push(value, Op::Reshape(self.id), self.needs()))
    }

    pub fn permute(&self, order: &[usize]) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        let mut seen = vec![false; ls.len()];
        let valid = order.len() == ls.len()
            && order.iter().all(|&a| {
                if a >= ls.len() || seen[a] {
                    false
                } else {
                    seen[a] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::BadShape {
                op: "permute",
                expected: "a permutation of the tensor's axes",
                got: order.to_vec(),
            });
        }
        let value = self.val(|a| {
            a.view()
                .permuted_axes(IxDyn(order))
                .as_standard_layout()
                .to_owned()
        });
        Ok(self
            .tape
            .push(value, Op::Permute(self.id, order.to_vec()), self.needs()))
    }

    pub fn im2col_op(&self, geom: &ConvGeom) -> Result<Tensor<E>, TensorError> {
        if !geom.valid() || self.shape() != geom.input_shape() {
            return Err(TensorError::BadShape {
                op: "im2col",
                expected: "tensor matching the conv geometry input shape",
                got: self.shape(),
            });
        }
        let value = self.val(|a| im2col(a, geom));
        Ok(self
            .tape
            .push(value, Op::Im2col(self.id, *geom), self.needs()))
    }

    pub fn col2im_op(&self, geom: &ConvGeom) -> Result<Tensor<E>, TensorError> {
        if !geom.valid() || self.shape() != geom.col_shape() {
            return Err(TensorError::BadShape {
                op: "col2im",
                expected: "tensor matching the conv geometry column shape",
                got: self.shape(),
            });
        }
        let value = self.val(|a| col2im(a, geom));
        Ok(self
            .tape
            .push(value, Op::Col2im(self.id, *geom), self.needs()))
    }

    /// Per-sample logistic loss softplus(−y·ŷ) for labels in {−1,+1}.
    /// `self` holds one logit per label (any shape with matching length).
    pub fn logistic_loss(&self, labels: &[i8]) -> Result<Tensor<E>, TensorError> {
        if labels.len() != self.len() {
            return Err(TensorError::BadShape {
                op: "logistic_loss",
                expected: "one label per logit",
                got: self.shape(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(TensorError::Domain(format!(
                "logistic_loss: label {bad} outside {{-1,+1}}"
            )));
        }
        let shape = self.shape();
        let neg_y = ArrayD::from_shape_vec(
            IxDyn(&shape),
            labels.iter().map(|&y| E::from_f64(-(y as f64))).collect(),
        )
        .unwrap();
        Ok(self.mul_const(&neg_y)?.softplus_op())
    }

    /// Per-row softmax cross-entropy against class indices → losses [m].
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<E>, TensorError> {
        let ls = self.shape();
        if ls.len() != 2 || labels.len() != ls[0] {
            return Err(TensorError::BadShape {
                op: "softmax_cross_entropy",
                expected: "2-d logits with one label per row",
                got: ls,
            });
        }
        let c = ls[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Domain(format!(
                "softmax_cross_entropy: class index {bad} out of range for {c} classes"
            )));
        }
        let value = self.val(|a| {
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let mut losses = ArrayD::<E>::zeros(IxDyn(&[ls[0]]));
            for (i, row) in a2.rows().into_iter().enumerate() {
                let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for v in row.iter() {
                    z = z + (*v - m).exp();
                }
                losses[[i]] = m + z.ln() - row[labels[i]];
            }
            losses
        });
        Ok(self.tape.push(
            value,
            Op::SoftmaxCrossEntropy(self.id, labels.to_vec()),
            self.needs(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grad, GradCheckConfig};
    use ndarray::{arr1, arr2, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn dyn2(rows: Vec<Vec<f64>>) -> ArrayD<f64> {
        let r = rows.len();
        let c = rows[0].len();
        ArrayD::from_shape_vec(IxDyn(&[r, c]), rows.into_iter().flatten().collect()).unwrap()
    }

    fn scalar_leaf(tape: &Tape<f64>, v: f64) -> Tensor<f64> {
        tape.scalar(v, true).unwrap()
    }

    // ── matmul ──────────────────────────────────────────────────────────

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(dyn2(vec![vec![1., 0.], vec![0., 1.]])).unwrap();
        let v = tape.constant(dyn2(vec![vec![5.], vec![7.]])).unwrap();
        let out = i2.matmul(&v).unwrap();
        assert_eq!(out.value(), dyn2(vec![vec![5.], vec![7.]]));
    }

    #[test]
    fn matmul_direct_arithmetic() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(dyn2(vec![vec![1., 2.], vec![3., 4.]])).unwrap();
        let b = tape.constant(dyn2(vec![vec![1.], vec![1.]])).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.value(), dyn2(vec![vec![3.], vec![7.]]));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expected = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let tape = Tape::<f64>::new();
        let ta = tape
            .constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), a).unwrap())
            .unwrap();
        let tb = tape
            .constant(ArrayD::from_shape_vec(IxDyn(&[4, 2]), b).unwrap())
            .unwrap();
        let out = ta.matmul(&tb).unwrap().value();
        for (got, want) in out.iter().zip(expected.iter()) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(dyn2(vec![vec![1., 2.]])).unwrap();
        let b = tape.constant(dyn2(vec![vec![1., 2.]])).unwrap();
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    // ── relu ────────────────────────────────────────────────────────────

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(arr1(&[-1.0, 0.0, 2.0]).into_dyn(), true)
            .unwrap();
        let y = x.relu();
        assert_eq!(y.value(), arr1(&[0.0, 0.0, 2.0]).into_dyn());
        let root = y.sum_all();
        tape.backward(&root).unwrap();
        // subgradient at exactly 0 is 0
        assert_eq!(x.grad().unwrap(), arr1(&[0.0, 0.0, 1.0]).into_dyn());
    }

    #[test]
    fn relu_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = tape
            .constant(ArrayD::from_shape_fn(IxDyn(&[5, 7]), |_| {
                rng.gen_range(-3.0..3.0)
            }))
            .unwrap();
        let once = x.relu();
        let twice = once.relu();
        assert_eq!(once.value(), twice.value());
    }

    // ── logistic loss ───────────────────────────────────────────────────

    #[test]
    fn logistic_loss_at_zero_logit_is_ln2_with_grad_half() {
        let tape = Tape::<f64>::new();
        let logit = scalar_leaf(&tape, 0.0);
        let loss = logit.logistic_loss(&[1]).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), std::f64::consts::LN_2);
        tape.backward(&loss).unwrap();
        let g = logit.grad().unwrap();
        assert!((g.iter().next().unwrap() - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn logistic_loss_is_stable_at_large_logits() {
        let tape = Tape::<f64>::new();
        let confident = scalar_leaf(&tape, 40.0);
        let loss = confident.logistic_loss(&[1]).unwrap().scalar_value().unwrap();
        assert!(loss.is_finite() && loss >= 0.0 && loss < 1e-15, "loss={loss}");

        let wrong = scalar_leaf(&tape, -40.0);
        let loss = wrong.logistic_loss(&[1]).unwrap().scalar_value().unwrap();
        assert!(loss.is_finite() && (loss - 40.0).abs() < 1e-12, "loss={loss}");
    }

    #[test]
    fn logistic_loss_rejects_bad_labels() {
        let tape = Tape::<f64>::new();
        let logit = scalar_leaf(&tape, 1.0);
        assert!(matches!(
            logit.logistic_loss(&[0]),
            Err(TensorError::Domain(_))
        ));
    }

    #[test]
    fn logistic_loss_is_nonnegative_and_matches_naive_form() {
        // softplus(−yŷ) == −ln σ(yŷ) wherever the naive form is computable
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let tape = Tape::<f64>::new();
        for _ in 0..200 {
            let yh: f64 = rng.gen_range(-30.0..30.0);
            let y: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
            let loss = tape
                .scalar(yh, false)
                .unwrap()
                .logistic_loss(&[y])
                .unwrap()
                .scalar_value()
                .unwrap();
            assert!(loss >= 0.0);
            let naive = -sigmoid(y as f64 * yh).ln();
            assert!(
                (loss - naive).abs() <= 1e-12 * naive.max(1.0),
                "{loss} vs {naive}"
            );
        }
    }

    #[test]
    fn logistic_loss_gradient_matches_finite_differences() {
        let f = |v: &[f64]| {
            let tape = Tape::<f64>::new();
            let logit = tape.scalar(v[0], false).unwrap();
            logit.logistic_loss(&[1]).unwrap().scalar_value().unwrap()
        };
        let tape = Tape::<f64>::new();
        let logit = scalar_leaf(&tape, 1.0);
        let loss = logit.logistic_loss(&[1]).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = [*logit.grad().unwrap().iter().next().unwrap()];
        let report = check_grad(
            f,
            &[1.0],
            &analytic,
            &GradCheckConfig {
                rel_tol: 1e-8,
                ..GradCheckConfig::default()
            },
        );
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    // ── backward basics ─────────────────────────────────────────────────

    #[test]
    fn backward_square_at_three_gives_six() {
        let tape = Tape::<f64>::new();
        let x = scalar_leaf(&tape, 3.0);
        let y = x.square();
        tape.backward(&y).unwrap();
        assert_eq!(*x.grad().unwrap().iter().next().unwrap(), 6.0);
    }

    #[test]
    fn backward_constant_gets_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = scalar_leaf(&tape, 3.0);
        let c = tape.scalar(5.0, false).unwrap();
        let y = x.mul(&c).unwrap();
        tape.backward(&y).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(*x.grad().unwrap().iter().next().unwrap(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn(), true).unwrap();
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x·x + x ⇒ dy/dx = 2x + 1
        let tape = Tape::<f64>::new();
        let x = scalar_leaf(&tape, 4.0);
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(*x.grad().unwrap().iter().next().unwrap(), 9.0);
    }

    #[test]
    fn backward_is_deterministic_and_idempotent() {
        let build = || {
            let tape = Tape::<f64>::new();
            let x = tape
                .leaf(arr1(&[0.3, -0.7, 1.9]).into_dyn(), true)
                .unwrap();
            let w = tape
                .leaf(dyn2(vec![vec![0.2], vec![-0.4], vec![0.6]]), true)
                .unwrap();
            let logit = x.reshape(&[1, 3]).unwrap().matmul(&w).unwrap();
            let loss = logit.logistic_loss(&[-1]).unwrap().mean_all();
            (tape, x, w, loss)
        };
        let (t1, x1, w1, l1) = build();
        t1.backward(&l1).unwrap();
        let gx_first = x1.grad().unwrap();
        let gw_first = w1.grad().unwrap();
        // run backward twice on the same tape: grads reset, not doubled
        t1.backward(&l1).unwrap();
        assert_eq!(x1.grad().unwrap(), gx_first);
        // a freshly built identical tape gives bit-identical gradients
        let (t2, x2, w2, l2) = build();
        t2.backward(&l2).unwrap();
        assert_eq!(x2.grad().unwrap(), gx_first);
        assert_eq!(w2.grad().unwrap(), gw_first);
    }

    // ── finite-difference sweeps over composite graphs ──────────────────

    /// Autodiff/FD comparison for a scalar-valued graph over a flat input.
    fn fd_graph_check(
        shape: &[usize],
        x0: &[f64],
        build: impl Fn(&Tape<f64>, Tensor<f64>) -> Tensor<f64>,
        rel_tol: f64,
    ) {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(ArrayD::from_shape_vec(IxDyn(shape), x0.to_vec()).unwrap(), true)
            .unwrap();
        let root = build(&tape, x.clone());
        tape.backward(&root).unwrap();
        let analytic: Vec<f64> = x.grad().unwrap().iter().copied().collect();
        let report = check_grad(
            |v: &[f64]| {
                let tape = Tape::<f64>::new();
                let x = tape
                    .leaf(
                        ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap(),
                        false,
                    )
                    .unwrap();
                build(&tape, x).scalar_value().unwrap()
            },
            x0,
            &analytic,
            &GradCheckConfig {
                rel_tol,
                ..GradCheckConfig::default()
            },
        );
        assert!(
            report.passed,
            "max rel err {} at coord {:?}",
            report.max_rel_err, report.worst_coord
        );
    }

    #[test]
    fn elementwise_and_reduction_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        for trial in 0..20 {
            let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
            fd_graph_check(
                &[3, 4],
                &x0,
                |_t, x| {
                    x.sigmoid_op()
                        .mul(&x.softplus_op())
                        .unwrap()
                        .add(&x.square().scale(0.3))
                        .unwrap()
                        .mean_all()
                },
                1e-5,
            );
            // trial-dependent second graph: norms, dots, clamps
            let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            fd_graph_check(
                &[8],
                &x0,
                |t, x| {
                    let w = t
                        .constant(arr1(&[0.5, -0.25, 1.0, 0.75, -1.5, 0.1, 0.9, -0.3]).into_dyn())
                        .unwrap();
                    let a = x.dot(&w).unwrap().square();
                    let b = x.clamp(-1.0, 1.0).l2_norm();
                    a.add(&b).unwrap().add(&x.neg().sum_all()).unwrap()
                },
                1e-5,
            );
            let _ = trial;
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        fd_graph_check(
            &[2, 3],
            &x0,
            |t, x| {
                let w = t
                    .constant(dyn2(vec![vec![0.4, -0.2], vec![0.7, 0.1], vec![-0.5, 0.9]]))
                    .unwrap();
                let b = t.constant(arr1(&[0.05, -0.15]).into_dyn()).unwrap();
                let h = x.matmul(&w).unwrap().add_row(&b).unwrap().relu();
                let ht = h.transpose().unwrap();
                ht.matmul(&h).unwrap().mean_all()
            },
            1e-5,
        );
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        fd_graph_check(
            &[2, 3],
            &x0,
            |_t, x| x.mean_rows().unwrap().l2_norm(),
            1e-5,
        );
    }

    #[test]
    fn two_layer_relu_net_parameter_gradients_match_finite_differences() {
        // every parameter of a random 2-layer ReLU net, against central FD
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let x_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n_w1 = 4 * 6;
        let n_b1 = 6;
        let n_w2 = 6 * 1;
        let theta0: Vec<f64> = (0..n_w1 + n_b1 + n_w2)
            .map(|_| rng.gen_range(-0.7..0.7))
            .collect();
        let labels = [1i8, -1];

        let eval = |theta: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
            let tape = Tape::<f64>::new();
            let x = tape
                .constant(ArrayD::from_shape_vec(IxDyn(&[2, 4]), x_data.clone()).unwrap())
                .unwrap();
            let w1 = tape
                .leaf(
                    ArrayD::from_shape_vec(IxDyn(&[4, 6]), theta[..n_w1].to_vec()).unwrap(),
                    want_grads,
                )
                .unwrap();
            let b1 = tape
                .leaf(
                    ArrayD::from_shape_vec(IxDyn(&[6]), theta[n_w1..n_w1 + n_b1].to_vec())
                        .unwrap(),
                    want_grads,
                )
                .unwrap();
            let w2 = tape
                .leaf(
                    ArrayD::from_shape_vec(IxDyn(&[6, 1]), theta[n_w1 + n_b1..].to_vec())
                        .unwrap(),
                    want_grads,
                )
                .unwrap();
            let h = x.matmul(&w1).unwrap().add_row(&b1).unwrap().relu();
            let logits = h.matmul(&w2).unwrap();
            let loss = logits.logistic_loss(&labels).unwrap().mean_all();
            let value = loss.scalar_value().unwrap();
            if !want_grads {
                return (value, vec![]);
            }
            tape.backward(&loss).unwrap();
            let mut grads = Vec::with_capacity(theta.len());
            grads.extend(w1.grad().unwrap().iter());
            grads.extend(b1.grad().unwrap().iter());
            grads.extend(w2.grad().unwrap().iter());
            (value, grads)
        };

        let (_, analytic) = eval(&theta0, true);
        let report = check_grad(
            |theta: &[f64]| eval(theta, false).0,
            &theta0,
            &analytic,
            &GradCheckConfig::default(),
        );
        assert!(
            report.passed,
            "max rel err {} at coord {:?}",
            report.max_rel_err, report.worst_coord
        );
    }

    // ── kink subgradients and masking ops ───────────────────────────────

    #[test]
    fn l2_norm_subgradient_at_origin_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[0.0, 0.0, 0.0]).into_dyn(), true).unwrap();
        let n = x.l2_norm();
        tape.backward(&n).unwrap();
        assert_eq!(x.grad().unwrap(), arr1(&[0.0, 0.0, 0.0]).into_dyn());
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::<f64>::new();
        let x = tape
            .leaf(arr1(&[-0.5, 0.5, 1.5, 5.0]).into_dyn(), true)
            .unwrap();
        let y = x.clamp(0.0, 2.0).sum_all();
        tape.backward(&y).unwrap();
        assert_eq!(
            x.grad().unwrap(),
            arr1(&[0.0, 1.0, 1.0, 0.0]).into_dyn()
        );
    }

    #[test]
    fn mul_scalar_node_routes_gradient_to_the_dummy() {
        // d/dw mean(logistic(w·ŷ, y)) at w=1 equals mean(σ(−yŷ)·(−y·ŷ))
        let tape = Tape::<f64>::new();
        let logits = tape
            .constant(arr1(&[1.2, -0.4, 0.8]).into_dyn())
            .unwrap();
        let labels = [1i8, 1, -1];
        let w = scalar_leaf(&tape, 1.0);
        let scaled = logits.mul_scalar_node(&w).unwrap();
        let loss = scaled.logistic_loss(&labels).unwrap().mean_all();
        tape.backward(&loss).unwrap();
        let got = *w.grad().unwrap().iter().next().unwrap();
        let want: f64 = [
            (1.0f64, 1.2f64),
            (1.0, -0.4),
            (-1.0, 0.8),
        ]
        .iter()
        .map(|&(y, yh)| sigmoid(-y * yh) * (-y * yh))
        .sum::<f64>()
            / 3.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    // ── conv building blocks on the tape ────────────────────────────────

    #[test]
    fn im2col_matmul_conv_matches_finite_differences() {
        let geom = ConvGeom {
            batch: 1,
            in_ch: 2,
            in_h: 4,
            in_w: 4,
            k_h: 3,
            k_w: 3,
            stride: 1,
            pad: 1,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5150);
        let x0: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wk: Vec<f64> = (0..2 * 9 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        fd_graph_check(
            &[1, 2, 4, 4],
            &x0,
            move |t, x| {
                let w = t
                    .constant(ArrayD::from_shape_vec(IxDyn(&[18, 3]), wk.clone()).unwrap())
                    .unwrap();
                x.im2col_op(&geom)
                    .unwrap()
                    .matmul(&w)
                    .unwrap()
                    .relu()
                    .mean_all()
            },
            1e-5,
        );
    }

    #[test]
    fn permute_roundtrip_and_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let x0: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        fd_graph_check(
            &[2, 3, 4],
            &x0,
            |_t, x| {
                let p = x.permute(&[2, 0, 1]).unwrap();
                let back = p.permute(&[1, 2, 0]).unwrap();
                // roundtrip must reproduce the original values
                assert_eq!(back.value().shape(), &[2, 3, 4]);
                p.square().mean_all()
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_cross_entropy_matches_naive_oracle_and_fd() {
        let logits = vec![2.0, -1.0, 0.5, 0.1, 0.2, -0.7];
        let labels = [0usize, 2];
        // naive oracle: −ln softmax
        let naive = |row: &[f64], y: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        };
        let tape = Tape::<f64>::new();
        let t = tape
            .constant(ArrayD::from_shape_vec(IxDyn(&[2, 3]), logits.clone()).unwrap())
            .unwrap();
        let losses = t.softmax_cross_entropy(&labels).unwrap().value();
        assert!((losses[[0]] - naive(&logits[..3], 0)).abs() < 1e-12);
        assert!((losses[[1]] - naive(&logits[3..], 2)).abs() < 1e-12);

        fd_graph_check(
            &[2, 3],
            &logits,
            |_t, x| x.softmax_cross_entropy(&[0, 2]).unwrap().mean_all(),
            1e-5,
        );
    }

    // ── entry validation ────────────────────────────────────────────────

    #[test]
    fn leaf_rejects_non_finite_values() {
        let tape = Tape::<f64>::new();
        assert!(matches!(
            tape.leaf(arr1(&[1.0, f64::NAN]).into_dyn(), true),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            tape.scalar(f64::INFINITY, false),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn cross_tape_operands_are_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.scalar(1.0, false).unwrap();
        let b = t2.scalar(2.0, false).unwrap();
        assert!(matches!(a.add(&b), Err(TensorError::CrossTape)));
    }

    #[test]
    fn f32_tape_runs_the_same_graph() {
        let tape = Tape::<f32>::new();
        let x = tape.scalar(3.0f32, true).unwrap();
        let y = x.square();
        tape.backward(&y).unwrap();
        assert_eq!(*x.grad().unwrap().iter().next().unwrap(), 6.0f32);
    }

    #[test]
    fn sigmoid_and_softplus_extremes_stay_finite() {
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(super::super::softplus(800.0f64), 800.0);
        assert_eq!(super::super::softplus(-800.0f64), 0.0);
        let _ = arr2(&[[0.0f64]]);
    }
}
