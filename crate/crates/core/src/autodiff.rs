//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, WspError};
use crate::exec;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Exp,
    Log,
    Relu,
    Neg,
    AddConst(f64),
    MulConst(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Unary(Var, Elementwise),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    LogSumExp {
        x: Var,
        axis: usize,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
    },
    L2Normalize(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElements {
        x: Var,
        index: Vec<(usize, usize)>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Images per group when accumulating convolution kernel gradients. Fixed so
/// that the summation order does not depend on the thread count.
const CONV_GRAD_GROUP: usize = 8;

/// Recording of one forward pass. Use from a single thread at a time.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn node_value(&self, v: Var) -> Result<Arc<Tensor>> {
        self.nodes
            .borrow()
            .get(v.0)
            .map(|n| Arc::clone(&n.value))
            .ok_or_else(|| WspError::Contract(format!("var {} is not on this tape", v.0)))
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter()
            .any(|v| nodes.get(v.0).is_some_and(|n| n.requires_grad))
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.node_value(v).expect("var belongs to this tape")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// `x·W + b` for `x: B×I`, `W: I×O`, `b: O`.
    pub fn affine(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.node_value(x)?;
        let wv = self.node_value(w)?;
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(WspError::Dimension(format!(
                "affine: x {xs:?} incompatible with W {ws:?}"
            )));
        }
        let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; rows * cols];
        if let Some(b) = b {
            let bv = self.node_value(b)?;
            if bv.shape() != [cols] {
                return Err(WspError::Dimension(format!(
                    "affine: bias {:?} does not match {cols} outputs",
                    bv.shape()
                )));
            }
            for r in 0..rows {
                out[r * cols..(r + 1) * cols].copy_from_slice(bv.data());
            }
        }
        gemm(false, false, rows, cols, inner, xv.data(), wv.data(), 1.0, &mut out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_requires(&parents);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Affine { x, w, b }, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.node_value(a)?;
        let bv = self.node_value(b)?;
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(WspError::Dimension(format!(
                "matmul: {sa:?} incompatible with {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, n, k, av.data(), bv.data(), 0.0, &mut out);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 2 {
            return Err(WspError::Dimension(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::from_fn(&[c, r], |k| xv.data()[(k % r) * c + k / r]);
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Valid cross-correlation of `x: B×C×H×W` with `kernel: F×C×kh×kw`,
    /// plus an optional per-filter bias.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xv = self.node_value(x)?;
        let kv = self.node_value(kernel)?;
        let geo = ConvGeometry::new(xv.shape(), kv.shape(), stride)?;
        let bv = match bias {
            Some(b) => {
                let bv = self.node_value(b)?;
                if bv.shape() != [geo.filters] {
                    return Err(WspError::Dimension(format!(
                        "conv2d: bias {:?} does not match {} filters",
                        bv.shape(),
                        geo.filters
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let per_out = geo.filters * geo.positions();
        let mut out = vec![0.0; geo.batch * per_out];
        exec::for_each_chunk_mut(&mut out, per_out, |b, out_b| {
            let cols = geo.im2col(&xv.data()[b * geo.image_len()..(b + 1) * geo.image_len()]);
            if let Some(bv) = &bv {
                for (f, chunk) in out_b.chunks_mut(geo.positions()).enumerate() {
                    chunk.fill(bv.data()[f]);
                }
            }
            gemm(
                false,
                false,
                geo.filters,
                geo.positions(),
                geo.patch_len(),
                kv.data(),
                &cols,
                1.0,
                out_b,
            );
        });
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let rg = self.any_requires(&parents);
        let shape = vec![geo.batch, geo.filters, geo.out_h, geo.out_w];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn elementwise(&self, x: Var, kind: Elementwise) -> Result<Var> {
        let xv = self.node_value(x)?;
        if kind == Elementwise::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                return Err(WspError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = xv.map(|v| match kind {
            Elementwise::Exp => v.exp(),
            Elementwise::Log => v.ln(),
            Elementwise::Relu => v.max(0.0),
            Elementwise::Neg => -v,
            Elementwise::AddConst(c) => v + c,
            Elementwise::MulConst(c) => v * c,
        });
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Unary(x, kind), rg))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Log)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Relu)
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.elementwise(x, Elementwise::Neg)
    }

    pub fn add_const(&self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(x, Elementwise::AddConst(c))
    }

    pub fn mul_const(&self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(x, Elementwise::MulConst(c))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let av = self.node_value(a)?;
        let bv = self.node_value(b)?;
        if av.shape() != bv.shape() {
            return Err(WspError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Ok((av, bv))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(av.shape().to_vec(), data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(av.shape().to_vec(), data)?, Op::Mul(a, b), rg))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.data().iter().sum();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s: f64 = xv.data().iter().sum();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(s / xv.len() as f64), Op::Mean(x), rg))
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 4 {
            return Err(WspError::Dimension(format!("global_avg_pool on {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = xv
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::GlobalAvgPool(x), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.node_value(x)?;
        let out = xv.reshape(shape)?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `m + log Σ exp(x − m)` along `axis`, with `m` the maximum along it.
    pub fn reduce_logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if axis >= s.len() {
            return Err(WspError::Dimension(format!(
                "logsumexp axis {axis} on rank-{} tensor",
                s.len()
            )));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let acc: f64 = (0..n).map(|j| (at(j) - m).exp()).sum();
                out[o * inner + i] = m + acc.ln();
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp { x, axis }, rg))
    }

    /// Row-wise logsumexp of `x: R×C` over the entries where `mask` is set.
    pub fn masked_logsumexp(&self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 2 || mask.len() != xv.len() {
            return Err(WspError::Dimension(format!(
                "masked_logsumexp: x {s:?}, mask of {}",
                mask.len()
            )));
        }
        let cols = s[1];
        let mut out = Vec::with_capacity(s[0]);
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let m_row = &mask[r * cols..(r + 1) * cols];
            let m = row
                .iter()
                .zip(m_row)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(WspError::Dimension(format!("masked_logsumexp: row {r} is empty")));
            }
            let acc: f64 = row
                .iter()
                .zip(m_row)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - m).exp())
                .sum();
            out.push(m + acc.ln());
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::new(vec![s[0]], out)?, Op::MaskedLogSumExp { x, mask }, rg))
    }

    /// Scale each row of `x: B×D` to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 2 {
            return Err(WspError::Dimension(format!("l2_normalize on {s:?}")));
        }
        let mut out = Vec::with_capacity(xv.len());
        for (r, row) in xv.data().chunks(s[1]).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(WspError::Degenerate(format!("row {r} has norm {norm}")));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::new(s.to_vec(), out)?, Op::L2Normalize(x), rg))
    }

    /// Select rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) || rows.is_empty() {
            return Err(WspError::Dimension(format!("gather_rows out of range for {s:?}")));
        }
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in &rows {
            out.extend_from_slice(xv.row(r));
        }
        let rg = self.any_requires(&[x]);
        let shape = vec![rows.len(), s[1]];
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { x, rows }, rg))
    }

    /// Pick `x[r, c]` for each `(r, c)` into a vector.
    pub fn gather_elements(&self, x: Var, index: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.node_value(x)?;
        let s = xv.shape();
        if s.len() != 2 || index.is_empty() || index.iter().any(|&(r, c)| r >= s[0] || c >= s[1]) {
            return Err(WspError::Dimension(format!("gather_elements out of range for {s:?}")));
        }
        let out = index.iter().map(|&(r, c)| xv.at2(r, c)).collect();
        let rg = self.any_requires(&[x]);
        let shape = vec![index.len()];
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherElements { x, index }, rg))
    }

    /// `Σ_k weights[k]·x[k]` with constant weights.
    pub fn weighted_sum(&self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.node_value(x)?;
        if weights.len() != xv.len() {
            return Err(WspError::Dimension(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(output.0)
            .ok_or_else(|| WspError::Contract("backward: var not on tape".into()))?;
        if root.value.len() != 1 {
            return Err(WspError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` does not influence the
    /// output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let wants = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, inner, cols) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            if wants(*x) {
                let mut dx = vec![0.0; rows * inner];
                gemm(false, true, rows, inner, cols, g, wv.data(), 0.0, &mut dx);
                accumulate(nodes, grads, *x, dx);
            }
            if wants(*w) {
                let mut dw = vec![0.0; inner * cols];
                gemm(true, false, inner, cols, rows, xv.data(), g, 0.0, &mut dw);
                accumulate(nodes, grads, *w, dw);
            }
            if let Some(b) = b {
                if wants(*b) {
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(nodes, grads, *b, db);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(false, true, m, k, n, g, bv.data(), 0.0, &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(true, false, k, n, m, av.data(), g, 0.0, &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Transpose(x) => {
            let s = val(*x).shape();
            let (r, c) = (s[0], s[1]);
            // g is c×r
            let dx = (0..r * c).map(|k| g[(k % c) * r + k / c]).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            stride,
        } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let geo = ConvGeometry::new(xv.shape(), kv.shape(), *stride)?;
            let per_out = geo.filters * geo.positions();
            if wants(*kernel) {
                let groups = geo.batch.div_ceil(CONV_GRAD_GROUP);
                let partial = exec::map_indexed(groups, |grp| {
                    let mut dk = vec![0.0; geo.filters * geo.patch_len()];
                    let lo = grp * CONV_GRAD_GROUP;
                    let hi = (lo + CONV_GRAD_GROUP).min(geo.batch);
                    for b in lo..hi {
                        let cols = geo.im2col(&xv.data()[b * geo.image_len()..(b + 1) * geo.image_len()]);
                        gemm(
                            false,
                            true,
                            geo.filters,
                            geo.patch_len(),
                            geo.positions(),
                            &g[b * per_out..(b + 1) * per_out],
                            &cols,
                            1.0,
                            &mut dk,
                        );
                    }
                    dk
                });
                let mut dk = vec![0.0; geo.filters * geo.patch_len()];
                for p in partial {
                    for (a, v) in dk.iter_mut().zip(&p) {
                        *a += v;
                    }
                }
                accumulate(nodes, grads, *kernel, dk);
            }
            if let Some(b) = bias {
                if wants(*b) {
                    let mut db = vec![0.0; geo.filters];
                    for img in g.chunks(per_out) {
                        for (f, chunk) in img.chunks(geo.positions()).enumerate() {
                            db[f] += chunk.iter().sum::<f64>();
                        }
                    }
                    accumulate(nodes, grads, *b, db);
                }
            }
            if wants(*x) {
                let mut dx = vec![0.0; xv.len()];
                exec::for_each_chunk_mut(&mut dx, geo.image_len(), |b, dx_b| {
                    let mut dcols = vec![0.0; geo.patch_len() * geo.positions()];
                    gemm(
                        true,
                        false,
                        geo.patch_len(),
                        geo.positions(),
                        geo.filters,
                        kv.data(),
                        &g[b * per_out..(b + 1) * per_out],
                        0.0,
                        &mut dcols,
                    );
                    geo.col2im_add(&dcols, dx_b);
                });
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::Unary(x, kind) => {
            let xv = val(*x);
            let y = &node.value;
            let dx: Vec<f64> = match kind {
                Elementwise::Exp => g.iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                Elementwise::Log => g.iter().zip(xv.data()).map(|(g, x)| g / x).collect(),
                Elementwise::Relu => g
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Elementwise::Neg => g.iter().map(|g| -g).collect(),
                Elementwise::AddConst(_) => g.to_vec(),
                Elementwise::MulConst(c) => g.iter().map(|g| g * c).collect(),
            };
            accumulate(nodes, grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let da = g.iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                let db = g.iter().zip(av.data()).map(|(g, v)| g * v).collect();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let hw = s[2] * s[3];
            let dx = g
                .iter()
                .flat_map(|&v| std::iter::repeat(v / hw as f64).take(hw))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::LogSumExp { x, axis } => {
            let xv = val(*x);
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            let y = node.value.data();
            let mut dx = vec![0.0; xv.len()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let k = (o * n + j) * inner + i;
                        let r = o * inner + i;
                        dx[k] = g[r] * (xv.data()[k] - y[r]).exp();
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::MaskedLogSumExp { x, mask } => {
            let xv = val(*x);
            let cols = xv.shape()[1];
            let y = node.value.data();
            let dx = xv
                .data()
                .iter()
                .zip(mask)
                .enumerate()
                .map(|(k, (&v, &keep))| {
                    let r = k / cols;
                    if keep {
                        g[r] * (v - y[r]).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::L2Normalize(x) => {
            let xv = val(*x);
            let d = xv.shape()[1];
            let y = node.value.data();
            let mut dx = Vec::with_capacity(xv.len());
            for ((xr, yr), gr) in xv.data().chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherRows { x, rows } => {
            let xv = val(*x);
            let c = xv.shape()[1];
            let mut dx = vec![0.0; xv.len()];
            for (q, &r) in rows.iter().enumerate() {
                for (a, v) in dx[r * c..(r + 1) * c].iter_mut().zip(&g[q * c..(q + 1) * c]) {
                    *a += v;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherElements { x, index } => {
            let xv = val(*x);
            let c = xv.shape()[1];
            let mut dx = vec![0.0; xv.len()];
            for (q, &(r, col)) in index.iter().enumerate() {
                dx[r * c + col] += g[q];
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::WeightedSum { x, weights } => {
            let dx = weights.iter().map(|w| w * g[0]).collect();
            accumulate(nodes, grads, *x, dx);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(WspError::Dimension(format!("conv2d: input {x:?}, kernel {k:?}")));
        }
        if stride == 0 {
            return Err(WspError::Dimension("conv2d: stride must be >= 1".into()));
        }
        if x[1] != k[1] {
            return Err(WspError::Dimension(format!(
                "conv2d: input has {} channels, kernel expects {}",
                x[1], k[1]
            )));
        }
        if k[2] > x[2] || k[3] > x[3] {
            return Err(WspError::Dimension(format!(
                "conv2d: kernel {}x{} larger than input {}x{}",
                k[2], k[3], x[2], x[3]
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            channels: x[1],
            in_h: x[2],
            in_w: x[3],
            filters: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            out_h: (x[2] - k[2]) / stride + 1,
            out_w: (x[3] - k[3]) / stride + 1,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn image_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Patch matrix of one image: `patch_len × positions`.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let src_row = (c * self.in_h + oh * self.stride + ki) * self.in_w + kj;
                        for ow in 0..self.out_w {
                            dst[oh * self.out_w + ow] = img[src_row + ow * self.stride];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let dst_row = (c * self.in_h + oh * self.stride + ki) * self.in_w + kj;
                        for ow in 0..self.out_w {
                            img[dst_row + ow * self.stride] += src[oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Central differences `(f(x+εe_k) − f(x−εe_k)) / 2ε` for every coordinate.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(WspError::Contract(format!("finite differences need eps > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest coordinate-wise `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from turning
/// finite-difference noise into large relative errors.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Evaluate `build` on a fresh tape for finite differences.
    fn eval(build: &dyn Fn(&Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&tape, v)?;
        tape.value(out).item()
    }

    fn check_grad(build: &dyn Fn(&Tape, Var) -> Result<Var>, x: &Tensor) -> f64 {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&tape, v).unwrap();
        let analytic = tape.backward(out).unwrap().wrt(v);
        let numeric = finite_diff_gradient(|t| eval(build, t), x, 1e-5).unwrap();
        max_relative_error(&analytic, &numeric, 1e-3)
    }

    #[test]
    fn affine_identity_and_hand_arithmetic() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 4], 1));
        let w = tape.param(random(&[4, 2], 2));
        let b = tape.param(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // each output column receives one unit per row
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
        let tape = Tape::new();
        let x = tape.constant(random(&[1, 4], 1));
        let w = tape.param(random(&[4, 2], 2));
        let b = tape.param(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.affine(x, w, None), Err(WspError::Dimension(_))));
    }

    #[test]
    fn conv_all_ones_and_delta_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0));
        let k = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0));
        let y = tape.conv2d(x, k, None, 1).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let img = random(&[1, 1, 5, 5], 3);
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
        let y = tape.conv2d(x, k, None, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(out.data()[r * 3 + c], img.data()[(r + 1) * 5 + c + 1]);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1), Err(WspError::Dimension(_))));
    }

    #[test]
    fn conv_stride_output_size() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 9, 8]));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, k, None, 2).unwrap();
        assert_eq!(tape.shape(y), vec![2, 4, 4, 3]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let kernel = random(&[2, 1, 3, 3], 11);
        let bias = random(&[2], 12);
        let input = random(&[2, 1, 5, 5], 10);
        // wrt input
        let build_x = |t: &Tape, x: Var| {
            let k = t.constant(kernel.clone());
            let b = t.constant(bias.clone());
            let y = t.conv2d(x, k, Some(b), 1)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        assert!(check_grad(&build_x, &input) < 1e-6);
        // wrt kernel, strided
        let build_k = |t: &Tape, k: Var| {
            let x = t.constant(input.clone());
            let y = t.conv2d(x, k, None, 2)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        assert!(check_grad(&build_k, &kernel) < 1e-6);
        let build_b = |t: &Tape, b: Var| {
            let x = t.constant(input.clone());
            let k = t.constant(kernel.clone());
            let y = t.conv2d(x, k, Some(b), 1)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        assert!(check_grad(&build_b, &bias) < 1e-6);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let e = tape.exp(x).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, std::f64::consts::E]);
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let bad = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(bad), Err(WspError::Domain(_))));
        let r = random(&[50], 4);
        let x = tape.constant(r.clone());
        let y = tape.log(tape.exp(x).unwrap()).unwrap();
        assert!(tape.value(y).max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(&[6], 5).map(|v| v + 1.5);
        for kind in [
            Elementwise::Exp,
            Elementwise::Log,
            Elementwise::Neg,
            Elementwise::AddConst(0.3),
            Elementwise::MulConst(-2.0),
        ] {
            let build = move |t: &Tape, v: Var| {
                let y = t.elementwise(v, kind)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            };
            assert!(check_grad(&build, &x) < 1e-6, "{kind:?}");
        }
        let x = random(&[6], 6);
        let build = |t: &Tape, v: Var| {
            let y = t.relu(v)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        assert!(check_grad(&build, &x) < 1e-6);
    }

    #[test]
    fn logsumexp_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.reduce_logsumexp(x, 0).unwrap();
        assert!((tape.value(y).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.reduce_logsumexp(x, 0).unwrap();
        assert!((tape.value(y).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let x = tape.constant(Tensor::new(vec![1], vec![-3.25]).unwrap());
        let y = tape.reduce_logsumexp(x, 0).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), -3.25);
        assert!(tape.reduce_logsumexp(x, 1).is_err());
    }

    #[test]
    fn logsumexp_bounds_and_gradient() {
        let x = random(&[3, 4, 2], 7).map(|v| 3.0 * v);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.reduce_logsumexp(v, 1).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[3, 2]);
        for o in 0..3 {
            for i in 0..2 {
                let m = (0..4).map(|j| x.data()[(o * 4 + j) * 2 + i]).fold(f64::MIN, f64::max);
                let l = yv.data()[o * 2 + i];
                assert!(l >= m && l <= m + 4f64.ln());
            }
        }
        for axis in 0..3 {
            let build = move |t: &Tape, v: Var| {
                let y = t.reduce_logsumexp(v, axis)?;
                let w = (0..t.value(y).len()).map(|k| 1.0 + k as f64).collect();
                t.weighted_sum(y, w)
            };
            assert!(check_grad(&build, &x) < 1e-6);
        }
    }

    #[test]
    fn masked_logsumexp_matches_direct_sum() {
        let x = random(&[3, 4], 8);
        let mask = vec![
            true, false, true, true, //
            false, true, false, false, //
            true, true, true, true,
        ];
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.masked_logsumexp(v, mask.clone()).unwrap();
        for r in 0..3 {
            let direct: f64 = (0..4)
                .filter(|&c| mask[r * 4 + c])
                .map(|c| x.at2(r, c).exp())
                .sum::<f64>()
                .ln();
            assert!((tape.value(y).data()[r] - direct).abs() < 1e-14);
        }
        let m2 = mask.clone();
        let build = move |t: &Tape, v: Var| {
            let y = t.masked_logsumexp(v, m2.clone())?;
            t.weighted_sum(y, vec![0.5, -1.0, 2.0])
        };
        assert!(check_grad(&build, &x) < 1e-6);
        let empty = vec![false; 12];
        assert!(tape.masked_logsumexp(v, empty).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        let out = tape.value(y);
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 0.8).abs() < 1e-15);
        let y2 = tape.l2_normalize(y).unwrap();
        assert!(tape.value(y2).max_abs_diff(&out) < 1e-12);
        let z = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(matches!(tape.l2_normalize(z), Err(WspError::Degenerate(_))));
    }

    #[test]
    fn l2_normalize_gradient() {
        let x = random(&[4, 5], 9);
        let target = random(&[4, 5], 19);
        let build = move |t: &Tape, v: Var| {
            let y = t.l2_normalize(v)?;
            t.weighted_sum(y, target.data().to_vec())
        };
        assert!(check_grad(&build, &x) < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let x0 = random(&[5], 20);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let unused = tape.param(random(&[3], 21));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).max_abs_diff(&x0.map(|v| 2.0 * v)) < 1e-15);
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
        assert!(g.get(unused).is_none());
        assert!(matches!(tape.backward(sq), Err(WspError::Contract(_))));
        // replay
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), g2.wrt(x).data());
    }

    #[test]
    fn chain_through_normalize_and_dot() {
        let x = random(&[3, 4], 22);
        let build = |t: &Tape, v: Var| {
            let z = t.l2_normalize(v)?;
            let zt = t.transpose(z)?;
            let s = t.matmul(z, zt)?;
            let e = t.exp(s)?;
            let l = t.reduce_logsumexp(e, 1)?;
            t.sum(l)
        };
        assert!(check_grad(&build, &x) < 1e-6);
    }

    #[test]
    fn gather_and_pool_gradients() {
        let x = random(&[4, 3], 23);
        let build = |t: &Tape, v: Var| {
            let g = t.gather_rows(v, vec![2, 0, 2])?;
            let e = t.gather_elements(g, vec![(0, 1), (2, 2), (1, 0), (0, 1)])?;
            let sq = t.mul(e, e)?;
            t.sum(sq)
        };
        assert!(check_grad(&build, &x) < 1e-6);
        let x = random(&[2, 3, 2, 2], 24);
        let build = |t: &Tape, v: Var| {
            let p = t.global_avg_pool(v)?;
            let sq = t.mul(p, p)?;
            t.mean(sq)
        };
        assert!(check_grad(&build, &x) < 1e-6);
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-9 && (g.data()[1] - 4.0).abs() < 1e-9);
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
