//! Reverse-mode automatic differentiation on an append-only operation graph.
//!
//! Every operation appends a node holding its kind, parent handles and the
//! eagerly computed output values. `backward` walks the graph in reverse
//! insertion order and expresses each adjoint *as graph operations*, so the
//! returned gradients are themselves differentiable: a second `backward`
//! through a gradient (gradient-of-gradient, Hessian-vector products) is
//! exact rather than approximated. This is what lets an attack objective
//! containing a full parameter gradient be minimized over the input.
//!
//! A graph is single-threaded by construction. Concurrent work (attack
//! restarts, experiment cells) builds one graph per thread over shared
//! read-only parameter tensors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation kinds the graph can record.
///
/// `Gather`/`ScatterAdd` are exact transposes of each other under a shared
/// index map (`-1` gathers a zero), which makes every structural movement
/// of data — padding, im2col, pooling layout, broadcast, permutation —
/// linear with an exact adjoint at every order.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    AddScalar(f64),
    ScalarMul(f64),
    Mul,
    MatMul { ta: bool, tb: bool },
    Relu,
    Sigmoid,
    Abs,
    Exp,
    Log,
    Sqrt,
    Recip,
    Sum,
    BroadcastScalar,
    Gather { index: Arc<Vec<i64>> },
    ScatterAdd { index: Arc<Vec<i64>> },
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::AddScalar(_) => "add_scalar",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Sum => "sum",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True when the node is a differentiable leaf or depends on one.
    active: bool,
}

/// Append-only computation graph. Parents of node `i` always have indices
/// `< i`, so insertion order is a topological order and backward traversal
/// is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Graph::backward`], one entry per requested leaf
/// in request order.
pub struct GradMap {
    entries: Vec<(NodeId, Tensor, Option<NodeId>)>,
}

impl GradMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.entries.iter().find(|(l, _, _)| *l == leaf).map(|(_, t, _)| t)
    }

    /// Graph handle of a gradient; present when backward ran with
    /// `create_graph`.
    pub fn node(&self, leaf: NodeId) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(l, _, _)| *l == leaf)
            .and_then(|(_, _, n)| *n)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor, Option<NodeId>)> {
        self.entries.iter().map(|(l, t, n)| (*l, t, *n))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Detach a node's current values into a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("graph node values always match their shape")
    }

    /// Sole value of a scalar node.
    pub fn item(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].values.len(), 1, "item() on non-scalar node");
        self.nodes[id.0].values[0]
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::NotInGraph(id.0));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let active = parents.iter().any(|p| self.nodes[p.0].active);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            shape,
            values,
            active,
        });
        id
    }

    // ----- leaves -------------------------------------------------------

    /// Differentiable leaf (input or parameter the caller wants gradients
    /// for).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            active: true,
        });
        id
    }

    /// Constant leaf: participates in values but never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            active: false,
        });
        id
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(&Tensor::scalar(v))
    }

    // ----- elementwise / scalar ops --------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add, vec![a, b], shape, values))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scalar_mul(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::AddScalar(c), vec![a], shape, values))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::ScalarMul(c), vec![a], shape, values))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul, vec![a, b], shape, values))
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a)?;
        let values = self.nodes[a.0].values.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(op, vec![a], shape, values))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Recip, a, f64::recip)
    }

    // ----- matmul ---------------------------------------------------------

    /// 2-D matrix product `op(a) · op(b)` where `ta`/`tb` transpose their
    /// operand. Stored layouts are untouched; transposition is resolved in
    /// the kernel.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let values = matmul_values(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            m,
            ka,
            n,
            ta,
            tb,
        );
        Ok(self.push(Op::MatMul { ta, tb }, vec![a, b], vec![m, n], values))
    }

    // ----- reductions / broadcasts ---------------------------------------

    /// Sum of all entries, producing a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v: f64 = self.nodes[a.0].values.iter().sum();
        Ok(self.push(Op::Sum, vec![a], vec![], vec![v]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].values.len().max(1) as f64;
        let s = self.sum(a)?;
        self.scalar_mul(s, 1.0 / n)
    }

    /// Fill `shape` with a scalar node's value.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a.0].values.len() != 1 {
            return Err(Error::InvalidShape {
                op: "broadcast_scalar",
                shape: self.nodes[a.0].shape.clone(),
                reason: "source must be scalar".into(),
            });
        }
        let n: usize = shape.iter().product();
        let values = vec![self.nodes[a.0].values[0]; n];
        Ok(self.push(Op::BroadcastScalar, vec![a], shape.to_vec(), values))
    }

    pub fn inner_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    // ----- data movement --------------------------------------------------

    /// `out[j] = a[index[j]]`, with `-1` producing a zero. Covers crop,
    /// padding, permutation, broadcast-by-repetition and im2col layouts.
    pub fn gather(&mut self, a: NodeId, index: Arc<Vec<i64>>, out_shape: Vec<usize>) -> Result<NodeId> {
        self.check(a)?;
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: out_shape,
                reason: format!("index length {} does not match", index.len()),
            });
        }
        let src = &self.nodes[a.0].values;
        let len = src.len() as i64;
        let mut values = Vec::with_capacity(n);
        for &i in index.iter() {
            if i < 0 {
                values.push(0.0);
            } else if i < len {
                values.push(src[i as usize]);
            } else {
                return Err(Error::InvalidShape {
                    op: "gather",
                    shape: self.nodes[a.0].shape.clone(),
                    reason: format!("index {} out of range {}", i, len),
                });
            }
        }
        Ok(self.push(Op::Gather { index }, vec![a], out_shape, values))
    }

    /// Transpose of [`Graph::gather`] under the same index map:
    /// `out[i] = Σ_{j : index[j] = i} a[j]`.
    pub fn scatter_add(
        &mut self,
        a: NodeId,
        index: Arc<Vec<i64>>,
        out_shape: Vec<usize>,
    ) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a.0].values.len() != index.len() {
            return Err(Error::InvalidShape {
                op: "scatter_add",
                shape: self.nodes[a.0].shape.clone(),
                reason: format!("index length {} does not match", index.len()),
            });
        }
        let n: usize = out_shape.iter().product();
        let mut values = vec![0.0; n];
        for (j, &i) in index.iter().enumerate() {
            if i >= 0 {
                let i = i as usize;
                if i >= n {
                    return Err(Error::InvalidShape {
                        op: "scatter_add",
                        shape: out_shape,
                        reason: format!("index {} out of range {}", i, n),
                    });
                }
                values[i] += self.nodes[a.0].values[j];
            }
        }
        Ok(self.push(Op::ScatterAdd { index }, vec![a], out_shape, values))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(a)?;
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].values.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count {} does not match", self.nodes[a.0].values.len()),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(Op::Reshape, vec![a], shape, values))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss` to the requested `leaves`.
    ///
    /// Adjoints are recorded as graph operations, so with `create_graph`
    /// the returned gradients carry node handles valid for a further
    /// backward pass (second-order gradients).
    pub fn backward(&mut self, loss: NodeId, leaves: &[NodeId], create_graph: bool) -> Result<GradMap> {
        self.check(loss)?;
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for (i, l) in leaves.iter().enumerate() {
            self.check(*l)?;
            if leaves[..i].contains(l) {
                return Err(Error::DuplicateLeaf(l.0));
            }
        }

        // Ancestors of the loss, found by a reverse reachability walk.
        let bound = loss.0 + 1;
        let mut reach = vec![false; bound];
        reach[loss.0] = true;
        for id in (0..bound).rev() {
            if reach[id] {
                for p in &self.nodes[id].parents {
                    reach[p.0] = true;
                }
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; bound];
        adj[loss.0] = Some(self.constant_scalar(1.0));

        for id in (0..bound).rev() {
            if !reach[id] || !self.nodes[id].active {
                continue;
            }
            let Some(d) = adj[id] else { continue };
            let parents = self.nodes[id].parents.clone();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add => {
                    self.accumulate(&mut adj, parents[0], d)?;
                    self.accumulate(&mut adj, parents[1], d)?;
                }
                Op::AddScalar(_) | Op::Reshape => {
                    let g = if matches!(op, Op::Reshape) {
                        let shape = self.nodes[parents[0].0].shape.clone();
                        self.reshape(d, shape)?
                    } else {
                        d
                    };
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::ScalarMul(c) => {
                    let g = self.scalar_mul(d, c)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Mul => {
                    let (a, b) = (parents[0], parents[1]);
                    if self.nodes[a.0].active {
                        let g = self.mul(d, b)?;
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if self.nodes[b.0].active {
                        let g = self.mul(d, a)?;
                        self.accumulate(&mut adj, b, g)?;
                    }
                }
                Op::MatMul { ta, tb } => {
                    let (a, b) = (parents[0], parents[1]);
                    if self.nodes[a.0].active {
                        let ga = match (ta, tb) {
                            (false, false) => self.matmul(d, b, false, true)?,
                            (true, false) => self.matmul(b, d, false, true)?,
                            (false, true) => self.matmul(d, b, false, false)?,
                            (true, true) => self.matmul(b, d, true, true)?,
                        };
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.0].active {
                        let gb = match (ta, tb) {
                            (false, false) => self.matmul(a, d, true, false)?,
                            (true, false) => self.matmul(a, d, false, false)?,
                            (false, true) => self.matmul(d, a, true, false)?,
                            (true, true) => self.matmul(d, a, true, true)?,
                        };
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Relu => {
                    // d/dx relu = 1 for x > 0, 0 otherwise (0 at exactly 0).
                    let mask: Vec<f64> = self.nodes[parents[0].0]
                        .values
                        .iter()
                        .map(|x| if *x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let shape = self.nodes[parents[0].0].shape.clone();
                    let m = self.constant(&Tensor::new(shape, mask)?);
                    let g = self.mul(d, m)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Abs => {
                    let mask: Vec<f64> = self.nodes[parents[0].0]
                        .values
                        .iter()
                        .map(|x| {
                            if *x > 0.0 {
                                1.0
                            } else if *x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let shape = self.nodes[parents[0].0].shape.clone();
                    let m = self.constant(&Tensor::new(shape, mask)?);
                    let g = self.mul(d, m)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Sigmoid => {
                    // y' = y(1-y), kept symbolic for higher-order passes.
                    let y = NodeId(id);
                    let ny = self.scalar_mul(y, -1.0)?;
                    let om = self.add_scalar(ny, 1.0)?;
                    let yp = self.mul(y, om)?;
                    let g = self.mul(d, yp)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Exp => {
                    let g = self.mul(d, NodeId(id))?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Log => {
                    let r = self.recip(parents[0])?;
                    let g = self.mul(d, r)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Sqrt => {
                    // y' = 1 / (2 sqrt(x)) = 1 / (2 y)
                    let two_y = self.scalar_mul(NodeId(id), 2.0)?;
                    let r = self.recip(two_y)?;
                    let g = self.mul(d, r)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Recip => {
                    // y' = -y^2
                    let y = NodeId(id);
                    let y2 = self.mul(y, y)?;
                    let dy = self.mul(d, y2)?;
                    let g = self.scalar_mul(dy, -1.0)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Sum => {
                    let shape = self.nodes[parents[0].0].shape.clone();
                    let g = self.broadcast_scalar(d, &shape)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::BroadcastScalar => {
                    let g = self.sum(d)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::Gather { index } => {
                    let shape = self.nodes[parents[0].0].shape.clone();
                    let g = self.scatter_add(d, index, shape)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
                Op::ScatterAdd { index } => {
                    let shape = self.nodes[parents[0].0].shape.clone();
                    let g = self.gather(d, index, shape)?;
                    self.accumulate(&mut adj, parents[0], g)?;
                }
            }
        }

        let mut entries = Vec::with_capacity(leaves.len());
        for &l in leaves {
            match adj.get(l.0).copied().flatten() {
                Some(gn) => {
                    let t = self.tensor(gn);
                    entries.push((l, t, create_graph.then_some(gn)));
                }
                None => {
                    let z = Tensor::zeros(&self.nodes[l.0].shape.clone());
                    let gn = create_graph.then(|| self.constant(&z));
                    entries.push((l, z, gn));
                }
            }
        }
        Ok(GradMap { entries })
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], p: NodeId, g: NodeId) -> Result<()> {
        if !self.nodes[p.0].active {
            return Ok(());
        }
        adj[p.0] = Some(match adj[p.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Hessian-vector product `∇(⟨∇loss, v⟩)` at `leaf`.
    pub fn hvp(&mut self, loss: NodeId, leaf: NodeId, v: &Tensor) -> Result<Tensor> {
        self.check(leaf)?;
        if v.shape() != self.shape(leaf) {
            return Err(Error::ShapeMismatch {
                op: "hvp",
                lhs: v.shape().to_vec(),
                rhs: self.shape(leaf).to_vec(),
            });
        }
        let grads = self.backward(loss, &[leaf], true)?;
        let g = grads.node(leaf).expect("create_graph returns grad nodes");
        let vc = self.constant(v);
        let s = self.inner_product(g, vc)?;
        let second = self.backward(s, &[leaf], false)?;
        Ok(second.get(leaf).expect("requested leaf present").clone())
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n..(kk + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b stored (n, k): dot products of rows
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            // a stored (k, m)
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // a stored (k, m), b stored (n, k)
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[kk * m + i] * b[j * k + kk];
                    }
                    c[i * n + j] = acc;
                }
            }
        }
    }
    c
}
