//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! Tapes are cheap, per-evaluation structures: the render path builds one
//! tape per ray, runs a single reverse pass from the scalar loss, and
//! accumulates the parameter adjoint into a global gradient in a fixed
//! order, which keeps gradients bit-reproducible.
//!
//! Heavy physics steps are fused primitives with hand-derived adjoints:
//! the per-segment radiative-transfer update, the instrument-lineshape
//! convolution (one linear node instead of per-tap scalar ops), and
//! vector-valued functions of a few scalars carrying their cached
//! Jacobians (absorption and blackbody spectra).

use crate::{Error, Result};
use std::ops::Range;
use std::sync::Arc;

pub type NodeId = usize;

/// Flat differentiable parameter set with named slices.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<(String, Range<usize>)>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<(String, Range<usize>)>) -> Result<Self> {
        let mut covered = 0;
        for (name, range) in &layout {
            if range.start != covered {
                return Err(Error::Shape(format!(
                    "layout slice '{name}' starts at {} but {covered} covered",
                    range.start
                )));
            }
            covered = range.end;
        }
        if covered != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {covered} of {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameter values must be finite".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the layout slice containing a flat index.
    pub fn slice_name(&self, index: usize) -> &str {
        for (name, range) in &self.layout {
            if range.contains(&index) {
                return name;
            }
        }
        "<unknown>"
    }

    pub fn slice_range(&self, name: &str) -> Option<Range<usize>> {
        self.layout
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }
}

enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Offset,
    SubConst,
    Exp,
    Sigmoid,
    SigmoidDeriv,
    Softplus,
    Sin,
    Cos,
    Powf(f64),
    Abs,
    Square,
    Sum,
    Mean,
    Gather(Vec<usize>),
    Dot,
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    AddBiasCols {
        rows: usize,
        cols: usize,
    },
    RowScale {
        rows: usize,
        cols: usize,
    },
    RteStep {
        ds: f64,
        attn: Vec<f64>,
    },
    Convolve {
        taps: Arc<Vec<f64>>,
        centers: Arc<Vec<usize>>,
    },
    JacVec {
        partials: Arc<Vec<Vec<f64>>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset => "offset",
            Op::SubConst => "sub_const",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::SigmoidDeriv => "sigmoid_deriv",
            Op::Softplus => "softplus",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Powf(_) => "powf",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Gather(_) => "gather",
            Op::Dot => "dot",
            Op::MatMul { .. } => "matmul",
            Op::AddBiasCols { .. } => "add_bias_cols",
            Op::RowScale { .. } => "row_scale",
            Op::RteStep { .. } => "rte_step",
            Op::Convolve { .. } => "convolve",
            Op::JacVec { .. } => "jac_vec",
        }
    }
}

struct Node {
    value: Vec<f64>,
    parents: Vec<NodeId>,
    op: Op,
    needs_grad: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One reverse-differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn len(&self, id: NodeId) -> usize {
        self.nodes[id].value.len()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Vec<f64>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, vec![], values)
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Constant, vec![], values)
    }

    fn binary_same_len(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.len(a) != self.len(b) {
            return Err(Error::Shape(format!(
                "{}: operand lengths {} vs {}",
                op.name(),
                self.len(a),
                self.len(b)
            )));
        }
        let value: Vec<f64> = match op {
            Op::Add => self.nodes[a]
                .value
                .iter()
                .zip(&self.nodes[b].value)
                .map(|(x, y)| x + y)
                .collect(),
            Op::Sub => self.nodes[a]
                .value
                .iter()
                .zip(&self.nodes[b].value)
                .map(|(x, y)| x - y)
                .collect(),
            Op::Mul => self.nodes[a]
                .value
                .iter()
                .zip(&self.nodes[b].value)
                .map(|(x, y)| x * y)
                .collect(),
            _ => unreachable!(),
        };
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_len(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_len(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_len(Op::Mul, a, b)
    }

    fn map(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a].value.iter().map(|&x| f(x)).collect();
        self.push(op, vec![a], value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(Op::Scale(c), a, |x| c * x)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(Op::Offset, a, |x| x + c)
    }

    pub fn sub_const(&mut self, a: NodeId, c: &[f64]) -> Result<NodeId> {
        if self.len(a) != c.len() {
            return Err(Error::Shape("sub_const: length mismatch".into()));
        }
        let value = self.nodes[a]
            .value
            .iter()
            .zip(c)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::SubConst, vec![a], value))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Exp, a, f64::exp)
    }

    pub fn sigmoid_node(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Sigmoid, a, sigmoid)
    }

    pub fn sigmoid_deriv_node(&mut self, a: NodeId) -> NodeId {
        self.map(Op::SigmoidDeriv, a, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softplus_node(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Softplus, a, softplus)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Sin, a, f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Cos, a, f64::cos)
    }

    pub fn powf(&mut self, a: NodeId, e: f64) -> Result<NodeId> {
        if e.fract() != 0.0 && self.nodes[a].value.iter().any(|&x| x < 0.0) {
            return Err(Error::Eval {
                primitive: "powf".into(),
                msg: "fractional power of negative base".into(),
            });
        }
        Ok(self.map(Op::Powf(e), a, |x| x.powf(e)))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Abs, a, f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(Op::Square, a, |x| x * x)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(Op::Sum, vec![a], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.len(a) as f64;
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(Op::Mean, vec![a], vec![s / n])
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let src = &self.nodes[a].value;
        let mut value = Vec::with_capacity(indices.len());
        for &i in &indices {
            let v = src.get(i).ok_or_else(|| Error::Eval {
                primitive: "gather".into(),
                msg: format!("index {i} out of range {}", src.len()),
            })?;
            value.push(*v);
        }
        Ok(self.push(Op::Gather(indices), vec![a], value))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.len(a) != self.len(b) {
            return Err(Error::Shape("dot: length mismatch".into()));
        }
        let s: f64 = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot, vec![a, b], vec![s]))
    }

    /// Row-major matrix product: A is m x k, B is k x n.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, m: usize, k: usize, n: usize) -> Result<NodeId> {
        if self.len(a) != m * k || self.len(b) != k * n {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} * {k}x{n}: got lengths {} and {}",
                self.len(a),
                self.len(b)
            )));
        }
        let mut value = vec![0.0; m * n];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let crow = &mut value[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul { m, k, n }, vec![a, b], value))
    }

    /// Broadcast-add a bias column vector to each column of a matrix.
    pub fn add_bias_cols(
        &mut self,
        mat: NodeId,
        bias: NodeId,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        if self.len(mat) != rows * cols || self.len(bias) != rows {
            return Err(Error::Shape("add_bias_cols: shape mismatch".into()));
        }
        let mut value = self.nodes[mat].value.clone();
        for i in 0..rows {
            let b = self.nodes[bias].value[i];
            for v in &mut value[i * cols..(i + 1) * cols] {
                *v += b;
            }
        }
        Ok(self.push(Op::AddBiasCols { rows, cols }, vec![mat, bias], value))
    }

    /// Scale each matrix row by the matching entry of a vector.
    pub fn row_scale(
        &mut self,
        s: NodeId,
        mat: NodeId,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        if self.len(mat) != rows * cols || self.len(s) != rows {
            return Err(Error::Shape("row_scale: shape mismatch".into()));
        }
        let mut value = self.nodes[mat].value.clone();
        for i in 0..rows {
            let f = self.nodes[s].value[i];
            for v in &mut value[i * cols..(i + 1) * cols] {
                *v *= f;
            }
        }
        Ok(self.push(Op::RowScale { rows, cols }, vec![s, mat], value))
    }

    /// Fused per-segment radiative-transfer update:
    /// I' = I a + I_b (1 - a), a = exp(-kappa ds).
    pub fn rte_step(
        &mut self,
        intensity: NodeId,
        kappa: NodeId,
        ib: NodeId,
        ds: f64,
    ) -> Result<NodeId> {
        let n = self.len(intensity);
        if self.len(kappa) != n || self.len(ib) != n {
            return Err(Error::Shape("rte_step: spectral lengths differ".into()));
        }
        if ds <= 0.0 {
            return Err(Error::Eval {
                primitive: "rte_step".into(),
                msg: format!("segment length {ds} must be positive"),
            });
        }
        let mut attn = Vec::with_capacity(n);
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            let a = (-self.nodes[kappa].value[i] * ds).exp();
            attn.push(a);
            value.push(self.nodes[intensity].value[i] * a + self.nodes[ib].value[i] * (1.0 - a));
        }
        Ok(self.push(
            Op::RteStep { ds, attn },
            vec![intensity, kappa, ib],
            value,
        ))
    }

    /// Linear convolution sampled at selected output centers with
    /// zero-padding outside the input: one linear node whose adjoint is
    /// correlation with the flipped kernel.
    pub fn convolve(
        &mut self,
        a: NodeId,
        taps: Arc<Vec<f64>>,
        centers: Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        let input = &self.nodes[a].value;
        let half = (taps.len() - 1) as isize / 2;
        let mut value = Vec::with_capacity(centers.len());
        for &c in centers.iter() {
            let mut acc = 0.0;
            for (k, &tap) in taps.iter().enumerate() {
                let idx = c as isize + k as isize - half;
                if idx >= 0 && (idx as usize) < input.len() {
                    acc += tap * input[idx as usize];
                }
            }
            value.push(acc);
        }
        Ok(self.push(Op::Convolve { taps, centers }, vec![a], value))
    }

    /// Vector-valued function of a small vector parent with a cached
    /// Jacobian: partials[i] = d value / d parent[i].
    pub fn jac_vec(
        &mut self,
        parent: NodeId,
        value: Vec<f64>,
        partials: Arc<Vec<Vec<f64>>>,
    ) -> Result<NodeId> {
        if partials.len() != self.len(parent) || partials.iter().any(|p| p.len() != value.len()) {
            return Err(Error::Shape("jac_vec: partial shapes mismatch".into()));
        }
        Ok(self.push(Op::JacVec { partials }, vec![parent], value))
    }

    /// Reverse pass from a scalar root. Returns per-node adjoints
    /// (empty vectors for nodes that do not require gradients).
    pub fn backward(&self, root: NodeId) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[root].value.len(), 1, "root must be scalar");
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        adj[root] = vec![1.0];
        for id in (0..=root).rev() {
            if adj[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let a = std::mem::take(&mut adj[id]);
            self.propagate(id, &a, &mut adj);
            adj[id] = a;
        }
        adj
    }

    fn ensure<'a>(&self, adj: &'a mut Vec<Vec<f64>>, id: NodeId) -> &'a mut Vec<f64> {
        if adj[id].is_empty() {
            adj[id] = vec![0.0; self.nodes[id].value.len()];
        }
        &mut adj[id]
    }

    fn propagate(&self, id: NodeId, a: &[f64], adj: &mut Vec<Vec<f64>>) {
        let node = &self.nodes[id];
        let grad_parent =
            |p: usize| -> bool { self.nodes[node.parents[p]].needs_grad };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                for p in 0..2 {
                    if grad_parent(p) {
                        let dst = self.ensure(adj, node.parents[p]);
                        for (d, &g) in dst.iter_mut().zip(a) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sub => {
                if grad_parent(0) {
                    let dst = self.ensure(adj, node.parents[0]);
                    for (d, &g) in dst.iter_mut().zip(a) {
                        *d += g;
                    }
                }
                if grad_parent(1) {
                    let dst = self.ensure(adj, node.parents[1]);
                    for (d, &g) in dst.iter_mut().zip(a) {
                        *d -= g;
                    }
                }
            }
            Op::Mul => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                if grad_parent(0) {
                    let bv = self.nodes[pb].value.clone();
                    let dst = self.ensure(adj, pa);
                    for i in 0..a.len() {
                        dst[i] += a[i] * bv[i];
                    }
                }
                if grad_parent(1) {
                    let av = self.nodes[pa].value.clone();
                    let dst = self.ensure(adj, pb);
                    for i in 0..a.len() {
                        dst[i] += a[i] * av[i];
                    }
                }
            }
            Op::Neg => {
                let dst = self.ensure(adj, node.parents[0]);
                for (d, &g) in dst.iter_mut().zip(a) {
                    *d -= g;
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let dst = self.ensure(adj, node.parents[0]);
                for (d, &g) in dst.iter_mut().zip(a) {
                    *d += c * g;
                }
            }
            Op::Offset | Op::SubConst => {
                let dst = self.ensure(adj, node.parents[0]);
                for (d, &g) in dst.iter_mut().zip(a) {
                    *d += g;
                }
            }
            Op::Exp => {
                let v = node.value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += a[i] * v[i];
                }
            }
            Op::Sigmoid => {
                let v = node.value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += a[i] * v[i] * (1.0 - v[i]);
                }
            }
            Op::SigmoidDeriv => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    let s = sigmoid(x[i]);
                    dst[i] += a[i] * s * (1.0 - s) * (1.0 - 2.0 * s);
                }
            }
            Op::Softplus => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += a[i] * sigmoid(x[i]);
                }
            }
            Op::Sin => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += a[i] * x[i].cos();
                }
            }
            Op::Cos => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] -= a[i] * x[i].sin();
                }
            }
            Op::Powf(e) => {
                let e = *e;
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += a[i] * e * x[i].powf(e - 1.0);
                }
            }
            Op::Abs => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    // Subgradient at the kink taken as 0.
                    dst[i] += a[i] * if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Op::Square => {
                let x = self.nodes[node.parents[0]].value.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for i in 0..a.len() {
                    dst[i] += 2.0 * a[i] * x[i];
                }
            }
            Op::Sum => {
                let g = a[0];
                let dst = self.ensure(adj, node.parents[0]);
                for d in dst.iter_mut() {
                    *d += g;
                }
            }
            Op::Mean => {
                let n = self.nodes[node.parents[0]].value.len() as f64;
                let g = a[0] / n;
                let dst = self.ensure(adj, node.parents[0]);
                for d in dst.iter_mut() {
                    *d += g;
                }
            }
            Op::Gather(indices) => {
                let indices = indices.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for (i, &src) in indices.iter().enumerate() {
                    dst[src] += a[i];
                }
            }
            Op::Dot => {
                let (pa, pb) = (node.parents[0], node.parents[1]);
                let g = a[0];
                if grad_parent(0) {
                    let bv = self.nodes[pb].value.clone();
                    let dst = self.ensure(adj, pa);
                    for i in 0..bv.len() {
                        dst[i] += g * bv[i];
                    }
                }
                if grad_parent(1) {
                    let av = self.nodes[pa].value.clone();
                    let dst = self.ensure(adj, pb);
                    for i in 0..av.len() {
                        dst[i] += g * av[i];
                    }
                }
            }
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (pa, pb) = (node.parents[0], node.parents[1]);
                if grad_parent(0) {
                    // adjA = adjC * B^T
                    let bv = self.nodes[pb].value.clone();
                    let dst = self.ensure(adj, pa);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let arow = &a[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += arow[j] * brow[j];
                            }
                            dst[i * k + p] += acc;
                        }
                    }
                }
                if grad_parent(1) {
                    // adjB = A^T * adjC
                    let av = self.nodes[pa].value.clone();
                    let dst = self.ensure(adj, pb);
                    for i in 0..m {
                        let arow = &a[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut dst[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * arow[j];
                            }
                        }
                    }
                }
            }
            Op::AddBiasCols { rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if grad_parent(0) {
                    let dst = self.ensure(adj, node.parents[0]);
                    for (d, &g) in dst.iter_mut().zip(a) {
                        *d += g;
                    }
                }
                if grad_parent(1) {
                    let dst = self.ensure(adj, node.parents[1]);
                    for i in 0..rows {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += a[i * cols + j];
                        }
                        dst[i] += acc;
                    }
                }
            }
            Op::RowScale { rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let (ps, pm) = (node.parents[0], node.parents[1]);
                if grad_parent(0) {
                    let mv = self.nodes[pm].value.clone();
                    let dst = self.ensure(adj, ps);
                    for i in 0..rows {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += a[i * cols + j] * mv[i * cols + j];
                        }
                        dst[i] += acc;
                    }
                }
                if grad_parent(1) {
                    let sv = self.nodes[ps].value.clone();
                    let dst = self.ensure(adj, pm);
                    for i in 0..rows {
                        for j in 0..cols {
                            dst[i * cols + j] += sv[i] * a[i * cols + j];
                        }
                    }
                }
            }
            Op::RteStep { ds, attn } => {
                let ds = *ds;
                let attn = attn.clone();
                let (pi, pk, pb) = (node.parents[0], node.parents[1], node.parents[2]);
                let iv = self.nodes[pi].value.clone();
                let bv = self.nodes[pb].value.clone();
                if grad_parent(0) {
                    let dst = self.ensure(adj, pi);
                    for i in 0..a.len() {
                        dst[i] += a[i] * attn[i];
                    }
                }
                if grad_parent(1) {
                    let dst = self.ensure(adj, pk);
                    for i in 0..a.len() {
                        dst[i] += a[i] * ds * attn[i] * (bv[i] - iv[i]);
                    }
                }
                if grad_parent(2) {
                    let dst = self.ensure(adj, pb);
                    for i in 0..a.len() {
                        dst[i] += a[i] * (1.0 - attn[i]);
                    }
                }
            }
            Op::Convolve { taps, centers } => {
                let taps = taps.clone();
                let centers = centers.clone();
                let half = (taps.len() - 1) as isize / 2;
                let input_len = self.nodes[node.parents[0]].value.len();
                let dst = self.ensure(adj, node.parents[0]);
                for (j, &c) in centers.iter().enumerate() {
                    let g = a[j];
                    for (k, &tap) in taps.iter().enumerate() {
                        let idx = c as isize + k as isize - half;
                        if idx >= 0 && (idx as usize) < input_len {
                            dst[idx as usize] += g * tap;
                        }
                    }
                }
            }
            Op::JacVec { partials } => {
                let partials = partials.clone();
                let dst = self.ensure(adj, node.parents[0]);
                for (i, partial) in partials.iter().enumerate() {
                    let mut acc = 0.0;
                    for (j, &p) in partial.iter().enumerate() {
                        acc += a[j] * p;
                    }
                    dst[i] += acc;
                }
            }
        }
    }
}

/// A scalar-valued computation over a flat parameter vector that can
/// report its value and full gradient in one reverse pass.
pub trait Differentiable {
    fn param_len(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Evaluate a differentiable computation at `theta`.
pub fn evaluate_with_gradient(
    f: &dyn Differentiable,
    theta: &ParamVector,
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != f.param_len() {
        return Err(Error::Shape(format!(
            "parameter length {} does not match computation ({})",
            theta.len(),
            f.param_len()
        )));
    }
    f.value_and_grad(&theta.values)
}

/// Compare the reverse-mode gradient against central finite differences
/// at sampled coordinates; returns the worst relative error with a 1e-12
/// absolute floor.
pub fn check_gradient(
    f: &dyn Differentiable,
    theta: &ParamVector,
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(0.0..=1e-2).contains(&eps) || eps == 0.0 {
        return Err(Error::Domain("eps must lie in (0, 1e-2]".into()));
    }
    let (_, grad) = evaluate_with_gradient(f, theta)?;
    let mut worst = 0.0_f64;
    let mut values = theta.values.clone();
    for &c in coords {
        let h = eps * values[c].abs().max(1.0);
        let orig = values[c];
        values[c] = orig + h;
        let fp = f.value(&values)?;
        values[c] = orig - h;
        let fm = f.value(&values)?;
        values[c] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (grad[c] - fd).abs() / grad[c].abs().max(fd.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
