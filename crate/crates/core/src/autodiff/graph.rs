use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::{
    broadcast_binary, broadcast_shape, concat, expand_from_reduced, index_select,
    index_select_backward, logsumexp_axis, matmul, reduce_to_shape, reduced_count,
    reduced_shape, sum_axes, transpose2, Tensor,
};

pub type NodeId = usize;

/// Primitive op tags. The set is fixed; composite functions (clamps, losses,
/// norms) are built from these so every graph stays finite-difference
/// checkable.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf bound at evaluation time.
    Input,
    /// Leaf bound at evaluation time; eligible for gradients.
    Param,
    /// Leaf with a value fixed at build time.
    Const,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Neg,
    Square,
    Exp,
    Ln,
    Softplus,
    Tanh,
    Relu,
    Sum { axes: Vec<usize>, keepdims: bool },
    Mean { axes: Vec<usize>, keepdims: bool },
    LogSumExp { axis: usize, keepdims: bool },
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
    /// x * scale + shift with build-time constants.
    Affine { scale: f64, shift: f64 },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Neg => "neg",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Softplus => "softplus",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Affine { .. } => "affine",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    label: Option<String>,
    constant: Option<Tensor>,
}

/// Append-only computation graph. Parents of node i always have index < i.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    inputs: Vec<NodeId>,
}

/// Leaf values for one evaluation.
#[derive(Default, Clone)]
pub struct Bindings {
    map: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, id: NodeId, t: Tensor) -> &mut Self {
        self.map.insert(id, t);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        self.map.get_mut(&id)
    }
}

/// Forward values, one per node.
#[derive(Debug)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id]
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.vals[id].to_scalar()
    }
}

/// Result of a backward pass: one tensor per requested node.
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.map[&id]
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id].label {
            Some(l) => format!("{} '{}'", self.nodes[id].op.tag(), l),
            None => self.nodes[id].op.tag().to_string(),
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, parents, shape, label: None, constant: None });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: &[usize], label: &str) -> NodeId {
        let id = self.push(Op::Input, vec![], shape.to_vec());
        self.nodes[id].label = Some(label.to_string());
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, shape: &[usize], label: &str) -> NodeId {
        let id = self.push(Op::Param, vec![], shape.to_vec());
        self.nodes[id].label = Some(label.to_string());
        self.params.push(id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Const, vec![], t.shape().to_vec());
        self.nodes[id].constant = Some(t);
        id
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shape(&self.nodes[a].shape, &self.nodes[b].shape).ok_or_else(
            || Error::ShapeMismatch {
                node: self.nodes.len(),
                op: op.tag().to_string(),
                detail: format!(
                    "cannot broadcast {:?} with {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            },
        )?;
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                node: self.nodes.len(),
                op: "matmul".into(),
                detail: format!("incompatible {:?} x {:?}", sa, sb),
            });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(op, vec![a], shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(Op::Affine { scale, shift }, a)
    }

    fn check_axes(&self, a: NodeId, axes: &[usize], op: &str) -> Result<()> {
        let rank = self.nodes[a].shape.len();
        for &ax in axes {
            if ax >= rank {
                return Err(Error::ShapeMismatch {
                    node: self.nodes.len(),
                    op: op.to_string(),
                    detail: format!("axis {ax} out of range for rank {rank}"),
                });
            }
        }
        Ok(())
    }

    /// Sum over `axes`; empty axes means all axes.
    pub fn sum(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        self.check_axes(a, axes, "sum")?;
        let shape = reduced_shape(&self.nodes[a].shape, axes, keepdims);
        Ok(self.push(Op::Sum { axes: axes.to_vec(), keepdims }, vec![a], shape))
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        self.check_axes(a, axes, "mean")?;
        let shape = reduced_shape(&self.nodes[a].shape, axes, keepdims);
        Ok(self.push(Op::Mean { axes: axes.to_vec(), keepdims }, vec![a], shape))
    }

    pub fn logsumexp(&mut self, a: NodeId, axis: usize, keepdims: bool) -> Result<NodeId> {
        self.check_axes(a, &[axis], "logsumexp")?;
        let shape = reduced_shape(&self.nodes[a].shape, &[axis], keepdims);
        Ok(self.push(Op::LogSumExp { axis, keepdims }, vec![a], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Graph("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0]].shape.clone();
        self.check_axes(parts[0], &[axis], "concat")?;
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::ShapeMismatch {
                    node: self.nodes.len(),
                    op: "concat".into(),
                    detail: format!("part shape {:?} incompatible with {:?}", s, first),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first;
        shape[axis] = axis_total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        self.check_axes(a, &[axis], "index_select")?;
        let ext = self.nodes[a].shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= ext) {
            return Err(Error::ShapeMismatch {
                node: self.nodes.len(),
                op: "index_select".into(),
                detail: format!("index {bad} out of range for extent {ext}"),
            });
        }
        let mut shape = self.nodes[a].shape.clone();
        shape[axis] = indices.len();
        Ok(self.push(
            Op::IndexSelect { axis, indices: indices.to_vec() },
            vec![a],
            shape,
        ))
    }

    /// clamp(x, lo, hi) with pass-through gradient inside the range and zero
    /// outside, composed as relu(x - lo) - relu(x - hi) + lo. This form
    /// avoids large-magnitude cancellation for in-range values, which would
    /// otherwise quantize them to the ulp of `hi`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let above_lo = self.affine(a, 1.0, -lo);
        let r1 = self.relu(above_lo);
        let above_hi = self.affine(a, 1.0, -hi);
        let r2 = self.relu(above_hi);
        let span = self.sub(r1, r2).expect("same-shape sub");
        self.affine(span, 1.0, lo)
    }

    /// Forward pass. Every node is computed exactly once; any non-finite
    /// output aborts with the offending node.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Values> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let t = match &node.op {
                Op::Input | Op::Param => {
                    let bound = bindings.get(id).ok_or_else(|| {
                        Error::Graph(format!("unbound leaf node {id} ({})", self.describe(id)))
                    })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            node: id,
                            op: self.describe(id),
                            detail: format!(
                                "bound shape {:?} != declared {:?}",
                                bound.shape(),
                                node.shape
                            ),
                        });
                    }
                    bound.clone()
                }
                Op::Const => node.constant.clone().expect("const node holds tensor"),
                Op::Add => self.eval_binary(id, &vals, |x, y| x + y)?,
                Op::Sub => self.eval_binary(id, &vals, |x, y| x - y)?,
                Op::Mul => self.eval_binary(id, &vals, |x, y| x * y)?,
                Op::Div => self.eval_binary(id, &vals, |x, y| x / y)?,
                Op::MatMul => {
                    let a = &vals[node.parents[0]];
                    let b = &vals[node.parents[1]];
                    matmul(a, b)?
                }
                Op::Neg => vals[node.parents[0]].map(|x| -x),
                Op::Square => vals[node.parents[0]].map(|x| x * x),
                Op::Exp => vals[node.parents[0]].map(f64::exp),
                Op::Ln => vals[node.parents[0]].map(f64::ln),
                Op::Softplus => vals[node.parents[0]].map(stable_softplus),
                Op::Tanh => vals[node.parents[0]].map(f64::tanh),
                Op::Relu => vals[node.parents[0]].map(|x| x.max(0.0)),
                Op::Sum { axes, keepdims } => {
                    sum_axes(&vals[node.parents[0]], axes, *keepdims)
                }
                Op::Mean { axes, keepdims } => {
                    let p = &vals[node.parents[0]];
                    let cnt = reduced_count(p.shape(), axes) as f64;
                    let s = sum_axes(p, axes, *keepdims);
                    s.map(|x| x / cnt)
                }
                Op::LogSumExp { axis, keepdims } => {
                    logsumexp_axis(&vals[node.parents[0]], *axis, *keepdims)
                }
                Op::Concat { axis } => {
                    let parts: Vec<&Tensor> = node.parents.iter().map(|&p| &vals[p]).collect();
                    concat(&parts, *axis)?
                }
                Op::IndexSelect { axis, indices } => {
                    index_select(&vals[node.parents[0]], *axis, indices)
                }
                Op::Affine { scale, shift } => {
                    let (s, h) = (*scale, *shift);
                    vals[node.parents[0]].map(|x| x * s + h)
                }
            };
            if !t.is_finite() {
                return Err(Error::NonFinite { node: id, op: self.describe(id) });
            }
            vals.push(t);
        }
        Ok(Values { vals })
    }

    fn eval_binary(
        &self,
        id: NodeId,
        vals: &[Tensor],
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let node = &self.nodes[id];
        let a = &vals[node.parents[0]];
        let b = &vals[node.parents[1]];
        broadcast_binary(a, b, f).ok_or_else(|| Error::ShapeMismatch {
            node: id,
            op: self.describe(id),
            detail: format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        })
    }

    /// Reverse pass from a scalar output. Returns one gradient per requested
    /// node; nodes the output does not depend on get zero tensors.
    pub fn gradient(
        &self,
        values: &Values,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<Gradients> {
        if !self.nodes[output].shape.is_empty() {
            return Err(Error::Graph(format!(
                "gradient requires a scalar output, node {output} has shape {:?}",
                self.nodes[output].shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output] = Some(Tensor::scalar(1.0));

        for id in (0..=output).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param | Op::Const => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Add => {
                    self.accumulate(&mut adj, node.parents[0], reduce_to_shape(&g, self.shape(node.parents[0])));
                    self.accumulate(&mut adj, node.parents[1], reduce_to_shape(&g, self.shape(node.parents[1])));
                }
                Op::Sub => {
                    self.accumulate(&mut adj, node.parents[0], reduce_to_shape(&g, self.shape(node.parents[0])));
                    let neg = g.map(|x| -x);
                    self.accumulate(&mut adj, node.parents[1], reduce_to_shape(&neg, self.shape(node.parents[1])));
                }
                Op::Mul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let ga = broadcast_binary(&g, values.get(b), |x, y| x * y).unwrap();
                    let gb = broadcast_binary(&g, values.get(a), |x, y| x * y).unwrap();
                    self.accumulate(&mut adj, a, reduce_to_shape(&ga, self.shape(a)));
                    self.accumulate(&mut adj, b, reduce_to_shape(&gb, self.shape(b)));
                }
                Op::Div => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let ga = broadcast_binary(&g, values.get(b), |x, y| x / y).unwrap();
                    // d(a/b)/db = -a/b^2 = -(a/b)/b
                    let gz = broadcast_binary(&g, values.get(id), |x, z| x * z).unwrap();
                    let gb = broadcast_binary(&gz, values.get(b), |x, y| -x / y).unwrap();
                    self.accumulate(&mut adj, a, reduce_to_shape(&ga, self.shape(a)));
                    self.accumulate(&mut adj, b, reduce_to_shape(&gb, self.shape(b)));
                }
                Op::MatMul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let bt = transpose2(values.get(b));
                    let at = transpose2(values.get(a));
                    let ga = matmul(&g, &bt)?;
                    let gb = matmul(&at, &g)?;
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Neg => {
                    self.accumulate(&mut adj, node.parents[0], g.map(|x| -x));
                }
                Op::Square => {
                    let a = node.parents[0];
                    let ga = broadcast_binary(&g, values.get(a), |x, y| 2.0 * x * y).unwrap();
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp => {
                    let ga = broadcast_binary(&g, values.get(id), |x, z| x * z).unwrap();
                    self.accumulate(&mut adj, node.parents[0], ga);
                }
                Op::Ln => {
                    let a = node.parents[0];
                    let ga = broadcast_binary(&g, values.get(a), |x, y| x / y).unwrap();
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Softplus => {
                    let a = node.parents[0];
                    let ga =
                        broadcast_binary(&g, values.get(a), |x, y| x * stable_sigmoid(y)).unwrap();
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Tanh => {
                    let ga =
                        broadcast_binary(&g, values.get(id), |x, z| x * (1.0 - z * z)).unwrap();
                    self.accumulate(&mut adj, node.parents[0], ga);
                }
                Op::Relu => {
                    // Subgradient 0 at the kink.
                    let a = node.parents[0];
                    let ga = broadcast_binary(&g, values.get(a), |x, y| {
                        if y > 0.0 {
                            x
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sum { axes, keepdims } => {
                    let a = node.parents[0];
                    let ga = expand_from_reduced(&g, self.shape(a), axes, *keepdims);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Mean { axes, keepdims } => {
                    let a = node.parents[0];
                    let cnt = reduced_count(self.shape(a), axes) as f64;
                    let ga = expand_from_reduced(&g, self.shape(a), axes, *keepdims);
                    self.accumulate(&mut adj, a, ga.map(|x| x / cnt));
                }
                Op::LogSumExp { axis, keepdims } => {
                    let a = node.parents[0];
                    let gex = expand_from_reduced(&g, self.shape(a), &[*axis], *keepdims);
                    let lse = expand_from_reduced(values.get(id), self.shape(a), &[*axis], *keepdims);
                    let softmax = broadcast_binary(values.get(a), &lse, |x, m| (x - m).exp()).unwrap();
                    let ga = broadcast_binary(&gex, &softmax, |x, s| x * s).unwrap();
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Concat { axis } => {
                    let axis = *axis;
                    let mut off = 0usize;
                    for &p in &node.parents {
                        let pshape = self.shape(p).to_vec();
                        let idxs: Vec<usize> = (off..off + pshape[axis]).collect();
                        let slice = index_select(&g, axis, &idxs);
                        off += pshape[axis];
                        self.accumulate(&mut adj, p, slice);
                    }
                }
                Op::IndexSelect { axis, indices } => {
                    let a = node.parents[0];
                    let ga = index_select_backward(&g, self.shape(a), *axis, indices);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Affine { scale, .. } => {
                    let s = *scale;
                    self.accumulate(&mut adj, node.parents[0], g.map(|x| x * s));
                }
            }
        }

        let mut map = HashMap::new();
        for &id in wrt {
            let g = adj[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
            if !g.is_finite() {
                return Err(Error::NonFinite { node: id, op: format!("grad of {}", self.describe(id)) });
            }
            map.insert(id, g);
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        debug_assert_eq!(g.shape(), self.shape(id));
        match &mut adj[id] {
            Some(acc) => {
                let data = acc.data_mut();
                for (a, b) in data.iter_mut().zip(g.data().iter()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}
